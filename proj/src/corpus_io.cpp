#include "tokmat/corpus_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

namespace tokmat {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

std::vector<TokenId> encode(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
  return ids;
}

std::string decode(std::span<const TokenId> ids) {
  std::string out;
  out.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const TokenId id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab::kSize) {
      throw std::out_of_range("decode: id " + std::to_string(id) + " at index " +
                              std::to_string(i) + " outside vocabulary");
    }
    if (!vocab::is_special(id)) out.push_back(static_cast<char>(id));
  }
  return out;
}

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<TokenId> load_corpus(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::recursive_directory_iterator(path)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else if (fs::is_regular_file(path)) {
    files.push_back(path);
  } else {
    throw std::runtime_error("corpus path not found: " + path.string());
  }
  std::vector<TokenId> ids;
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (i > 0) ids.push_back(vocab::kEos);
    const auto part = encode(read_file(files[i]));
    ids.insert(ids.end(), part.begin(), part.end());
  }
  return ids;
}

BatchIterator::BatchIterator(std::vector<TokenId> corpus, std::size_t seq_len,
                             std::size_t batch_size, std::uint64_t seed)
    : corpus_(std::move(corpus)), seq_len_(seq_len), batch_size_(batch_size), rng_(seed) {
  if (seq_len_ == 0 || batch_size_ == 0) {
    throw std::invalid_argument("BatchIterator: seq_len and batch_size must be positive");
  }
  if (corpus_.size() < seq_len_) {
    throw std::invalid_argument("BatchIterator: corpus of " + std::to_string(corpus_.size()) +
                                " tokens is shorter than seq_len " + std::to_string(seq_len_));
  }
  for (TokenId id : corpus_) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab::kSize) {
      throw std::invalid_argument("BatchIterator: corpus id " + std::to_string(id) +
                                  " outside vocabulary");
    }
  }
  new_epoch();
}

void BatchIterator::new_epoch() {
  const std::size_t slack = corpus_.size() - seq_len_;
  const std::size_t offset =
      slack == 0 ? 0 : std::uniform_int_distribution<std::size_t>(0, std::min(slack, seq_len_ - 1))(rng_);
  starts_.clear();
  for (std::size_t s = offset; s <= slack; s += seq_len_) starts_.push_back(s);
  std::shuffle(starts_.begin(), starts_.end(), rng_);
  cursor_ = 0;
}

std::vector<std::vector<TokenId>> BatchIterator::next() {
  std::vector<std::vector<TokenId>> batch;
  batch.reserve(batch_size_);
  for (std::size_t b = 0; b < batch_size_; ++b) {
    if (cursor_ == starts_.size()) {
      ++epoch_;
      new_epoch();
    }
    const auto first = corpus_.begin() + static_cast<std::ptrdiff_t>(starts_[cursor_++]);
    batch.emplace_back(first, first + static_cast<std::ptrdiff_t>(seq_len_));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// checkpoint

std::string_view to_string(CheckpointError::Kind k) {
  switch (k) {
    case CheckpointError::Kind::io: return "io";
    case CheckpointError::Kind::bad_magic: return "bad_magic";
    case CheckpointError::Kind::version_mismatch: return "version_mismatch";
    case CheckpointError::Kind::truncated: return "truncated";
    case CheckpointError::Kind::shape_table: return "shape_table";
    case CheckpointError::Kind::payload_checksum: return "payload_checksum";
    case CheckpointError::Kind::header_checksum: return "header_checksum";
    case CheckpointError::Kind::invalid: return "invalid";
  }
  return "unknown";
}

const NamedTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

namespace {

using Kind = CheckpointError::Kind;
constexpr char kMagic[4] = {'T', 'M', 'C', 'K'};
constexpr std::size_t kFixedHeader = 20;

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf.insert(buf.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf.insert(buf.end(), p, p + n);
  }
  template <typename T>
  void patch(std::size_t at, T v) {
    std::memcpy(buf.data() + at, &v, sizeof(T));
  }
  std::vector<std::uint8_t> buf;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes(b) {}
  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
  void need(std::size_t n, const char* what) const {
    if (bytes.size() - pos < n) {
      throw CheckpointError(Kind::truncated,
                            std::string("checkpoint truncated while reading ") + what);
    }
  }
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
};

std::uint64_t element_count(const std::vector<std::uint64_t>& shape) {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.tensors.empty()) {
    throw CheckpointError(Kind::invalid, "refusing to save a checkpoint with no tensors");
  }
  for (const auto& t : ckpt.tensors) {
    if (t.name.empty() || t.name.size() > 0xFFFF) {
      throw CheckpointError(Kind::invalid, "tensor name must be 1..65535 bytes", t.name);
    }
    if (t.shape.empty() || element_count(t.shape) != t.data.size()) {
      throw CheckpointError(Kind::invalid, "tensor '" + t.name + "' shape does not match data",
                            t.name);
    }
  }
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(0);  // length, patched below
  w.put<std::uint32_t>(0);  // crc, patched below
  w.put<std::uint64_t>(ckpt.step);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.config_json.size()));
  w.put_bytes(ckpt.config_json.data(), ckpt.config_json.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.put_bytes(t.name.data(), t.name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.put<std::uint64_t>(d);
    const std::span<const std::uint8_t> payload(
        reinterpret_cast<const std::uint8_t*>(t.data.data()), t.data.size() * sizeof(float));
    w.put<std::uint32_t>(crc32_of(payload));
  }
  for (const auto& t : ckpt.tensors) w.put_bytes(t.data.data(), t.data.size() * sizeof(float));

  w.patch<std::uint64_t>(8, w.buf.size());
  w.patch<std::uint32_t>(16, crc32_of(std::span(w.buf).subspan(kFixedHeader)));
  return std::move(w.buf);
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const std::string magic = r.get_string(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw CheckpointError(Kind::bad_magic, "not a checkpoint (bad magic bytes)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::version_mismatch,
                          "checkpoint version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
  }
  const auto length = r.get<std::uint64_t>("length");
  const auto file_crc = r.get<std::uint32_t>("checksum");
  if (bytes.size() < length) {
    throw CheckpointError(Kind::truncated, "checkpoint truncated: " + std::to_string(bytes.size()) +
                                               " of " + std::to_string(length) + " bytes");
  }
  if (bytes.size() > length) {
    throw CheckpointError(Kind::shape_table, "checkpoint has " +
                                                 std::to_string(bytes.size() - length) +
                                                 " trailing bytes");
  }
  const bool header_ok = crc32_of(bytes.subspan(kFixedHeader)) == file_crc;

  // Failures past this point are corruption of a complete file. When the
  // whole-file checksum fails too, report them as shape-table damage.
  auto table_error = [&](const std::string& msg) {
    return CheckpointError(Kind::shape_table, "checkpoint shape table corrupt: " + msg);
  };

  Checkpoint ckpt;
  std::vector<std::uint32_t> crcs;
  try {
    ckpt.step = r.get<std::uint64_t>("step");
    const auto cfg_len = r.get<std::uint32_t>("config length");
    ckpt.config_json = r.get_string(cfg_len, "config");
    const auto count = r.get<std::uint32_t>("tensor count");
    if (count == 0) throw table_error("zero tensors");
    std::uint64_t payload_bytes = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
      NamedTensor t;
      const auto name_len = r.get<std::uint16_t>("tensor name length");
      if (name_len == 0) throw table_error("empty tensor name at entry " + std::to_string(i));
      t.name = r.get_string(name_len, "tensor name");
      const auto rank = r.get<std::uint32_t>("tensor rank");
      if (rank == 0 || rank > 8) {
        throw table_error("tensor '" + t.name + "' has rank " + std::to_string(rank));
      }
      for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(r.get<std::uint64_t>("dims"));
      crcs.push_back(r.get<std::uint32_t>("tensor checksum"));
      const std::uint64_t n = element_count(t.shape);
      if (n > bytes.size()) throw table_error("tensor '" + t.name + "' dims exceed file size");
      payload_bytes += n * sizeof(float);
      ckpt.tensors.push_back(std::move(t));
    }
    if (bytes.size() - r.pos != payload_bytes) {
      throw table_error("payload area holds " + std::to_string(bytes.size() - r.pos) +
                        " bytes, table declares " + std::to_string(payload_bytes));
    }
  } catch (const CheckpointError& e) {
    if (e.kind() == Kind::truncated) {
      throw table_error(std::string(e.what()) + " inside a complete file");
    }
    throw;
  }

  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    auto& t = ckpt.tensors[i];
    const std::size_t n = static_cast<std::size_t>(element_count(t.shape));
    const auto payload = bytes.subspan(r.pos, n * sizeof(float));
    if (crc32_of(payload) != crcs[i]) {
      throw CheckpointError(Kind::payload_checksum,
                            "checkpoint payload checksum mismatch in tensor '" + t.name + "'",
                            t.name);
    }
    t.data.resize(n);
    std::memcpy(t.data.data(), payload.data(), payload.size());
    r.pos += payload.size();
  }
  if (!header_ok) {
    throw CheckpointError(Kind::header_checksum,
                          "checkpoint content checksum mismatch (header or config damaged)");
  }
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(Kind::io, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(Kind::io, "write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(Kind::io, "cannot move checkpoint into " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::io, "cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                        std::istreambuf_iterator<char>()};
  return parse_checkpoint(bytes);
}

NamedTensor to_named_tensor(std::string name, const Matrix& m) {
  NamedTensor t;
  t.name = std::move(name);
  t.shape = {m.rows(), m.cols()};
  t.data.resize(m.size());
  std::transform(m.flat().begin(), m.flat().end(), t.data.begin(),
                 [](Scalar v) { return static_cast<float>(v); });
  return t;
}

Matrix to_matrix(const NamedTensor& t) {
  if (t.shape.size() != 2) {
    throw CheckpointError(Kind::shape_table, "tensor '" + t.name + "' is not rank 2", t.name);
  }
  std::vector<Scalar> data(t.data.begin(), t.data.end());
  return Matrix(static_cast<std::size_t>(t.shape[0]), static_cast<std::size_t>(t.shape[1]),
                std::move(data));
}

}  // namespace tokmat
