#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tokmat/tensor.hpp"

namespace tokmat {

// Byte-level vocabulary: ids 0..255 are the bytes themselves, then three
// special ids.
namespace vocab {
inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr TokenId kPad = 258;
inline constexpr std::size_t kSize = 259;

inline bool is_special(TokenId id) { return id >= kBos && id <= kPad; }
}  // namespace vocab

std::vector<TokenId> encode(std::string_view text);
/// Bytes for every non-special id; specials are dropped. Throws on ids outside
/// the vocabulary.
std::string decode(std::span<const TokenId> ids);

/// Reads a UTF-8 file, or every regular file under a directory (sorted by
/// path), into one id stream. Files are separated by EOS.
std::vector<TokenId> load_corpus(const std::filesystem::path& path);

/// Deterministic, endless stream of [batch_size x seq_len] windows. Window
/// starts step through the corpus at stride seq_len from a per-epoch random
/// offset, shuffled per epoch.
class BatchIterator {
 public:
  BatchIterator(std::vector<TokenId> corpus, std::size_t seq_len, std::size_t batch_size,
                std::uint64_t seed);

  std::vector<std::vector<TokenId>> next();
  std::size_t epoch() const { return epoch_; }
  std::size_t windows_per_epoch() const { return starts_.size(); }

 private:
  void new_epoch();

  std::vector<TokenId> corpus_;
  std::size_t seq_len_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> starts_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint file, little-endian throughout:
//
//   0   char[4]  "TMCK"
//   4   u32      format version (1)
//   8   u64      total file length in bytes
//   16  u32      CRC-32 of bytes [20, end)
//   20  u64      training step
//   28  u32      config length N, then N bytes of UTF-8 JSON
//       u32      tensor count
//       per tensor: u16 name length, name bytes, u32 rank, u64 dims[rank],
//                   u32 CRC-32 of the tensor payload
//       payloads, in table order, row-major float32
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<float> data;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct Checkpoint {
  std::uint64_t step = 0;
  std::string config_json = "{}";
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(std::string_view name) const;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, truncated, shape_table, payload_checksum,
                    header_checksum, invalid };

  CheckpointError(Kind kind, std::string message, std::string tensor = {})
      : std::runtime_error(std::move(message)), kind_(kind), tensor_(std::move(tensor)) {}

  Kind kind() const { return kind_; }
  /// Name of the tensor at fault, when the failure is tied to one.
  const std::string& tensor() const { return tensor_; }

 private:
  Kind kind_;
  std::string tensor_;
};

std::string_view to_string(CheckpointError::Kind k);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

NamedTensor to_named_tensor(std::string name, const Matrix& m);
Matrix to_matrix(const NamedTensor& t);

}  // namespace tokmat
