#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "../support.hpp"
#include "tokmat/corpus_io.hpp"

using namespace tokmat;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tokmat_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_file(const fs::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

Checkpoint sample_checkpoint() {
  std::mt19937_64 rng(21);
  Checkpoint c;
  c.step = 42;
  c.config_json = R"({"a":"1"})";
  c.tensors.push_back(to_named_tensor("alpha", tmtest::random_matrix(3, 4, rng)));
  c.tensors.push_back(to_named_tensor("beta", tmtest::random_matrix(1, 5, rng)));
  c.tensors.push_back(to_named_tensor("gamma", tmtest::random_matrix(2, 2, rng)));
  return c;
}

CheckpointError::Kind failure_kind(const std::vector<std::uint8_t>& bytes, std::string* tensor = nullptr) {
  try {
    parse_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    if (tensor) *tensor = e.tensor();
    return e.kind();
  }
  FAIL("corrupted checkpoint parsed cleanly");
  return CheckpointError::Kind::io;
}

}  // namespace

TEST_CASE("byte vocabulary") {
  const auto ids = encode("h\xC3\xA9!");
  CHECK(ids == std::vector<TokenId>{'h', 0xC3, 0xA9, '!'});
  CHECK(decode(ids) == "h\xC3\xA9!");
  CHECK(decode(std::vector<TokenId>{vocab::kBos, 'a', vocab::kEos, 'b', vocab::kPad}) == "ab");
  CHECK(vocab::kSize == 259);
  CHECK(vocab::is_special(257));
  CHECK_FALSE(vocab::is_special(255));
  CHECK_THROWS_AS(decode(std::vector<TokenId>{259}), std::out_of_range);
  CHECK_THROWS(decode(std::vector<TokenId>{-1}));
  for (int b = 0; b < 256; ++b) {
    const std::string s(1, static_cast<char>(b));
    CHECK(decode(encode(s)) == s);
  }
}

TEST_CASE("load_corpus reads files and directories") {
  const auto dir = scratch_dir("corpus");
  write_file(dir / "b.txt", "yz");
  write_file(dir / "a.txt", "abc");
  CHECK(load_corpus(dir / "a.txt") == std::vector<TokenId>{'a', 'b', 'c'});
  CHECK(load_corpus(dir) == std::vector<TokenId>{'a', 'b', 'c', vocab::kEos, 'y', 'z'});
  CHECK_THROWS(load_corpus(dir / "missing"));
  fs::remove_all(dir);
}

TEST_CASE("batch iterator") {
  std::vector<TokenId> corpus;
  for (int i = 0; i < 103; ++i) corpus.push_back(i);
  BatchIterator a(corpus, 10, 4, 3), b(corpus, 10, 4, 3);
  std::set<TokenId> starts;
  for (int i = 0; i < 10; ++i) {
    const auto ba = a.next();
    CHECK(ba == b.next());
    REQUIRE(ba.size() == 4);
    for (const auto& row : ba) {
      REQUIRE(row.size() == 10);
      for (std::size_t k = 1; k < 10; ++k) CHECK(row[k] == row[0] + static_cast<TokenId>(k));
      starts.insert(row[0]);
    }
  }
  CHECK(a.epoch() >= 3);
  CHECK(a.windows_per_epoch() == 10);
  CHECK(starts.size() > 10);
  BatchIterator c(corpus, 10, 4, 4);
  CHECK(c.next() != BatchIterator(corpus, 10, 4, 3).next());

  BatchIterator exact(std::vector<TokenId>{1, 2, 3}, 3, 2, 1);
  CHECK(exact.next() == std::vector<std::vector<TokenId>>{{1, 2, 3}, {1, 2, 3}});
  CHECK_THROWS(BatchIterator(corpus, 200, 1, 1));
  CHECK_THROWS(BatchIterator(corpus, 0, 1, 1));
  CHECK_THROWS(BatchIterator(std::vector<TokenId>{1, 300}, 1, 1, 1));
}

TEST_CASE("checkpoint round trip") {
  const Checkpoint c = sample_checkpoint();
  const auto bytes = serialize_checkpoint(c);
  CHECK(std::memcmp(bytes.data(), "TMCK", 4) == 0);
  const Checkpoint back = parse_checkpoint(bytes);
  CHECK(back == c);
  CHECK(serialize_checkpoint(back) == bytes);
  REQUIRE(back.find("beta") != nullptr);
  CHECK(back.find("delta") == nullptr);
  CHECK(to_matrix(*back.find("alpha")).rows() == 3);

  const auto dir = scratch_dir("ckpt");
  write_checkpoint(c, dir / "x.tmck");
  CHECK(read_checkpoint(dir / "x.tmck") == c);
  CHECK_THROWS_AS(read_checkpoint(dir / "nope.tmck"), CheckpointError);
  fs::remove_all(dir);

  Checkpoint empty;
  CHECK_THROWS_AS(serialize_checkpoint(empty), CheckpointError);
}

TEST_CASE("checkpoint damage is classified") {
  using K = CheckpointError::Kind;
  const auto good = serialize_checkpoint(sample_checkpoint());

  auto bytes = good;
  bytes[0] = 'X';
  CHECK(failure_kind(bytes) == K::bad_magic);

  bytes = good;
  bytes[4] = 2;
  CHECK(failure_kind(bytes) == K::version_mismatch);

  bytes = good;
  bytes.resize(bytes.size() - 7);
  CHECK(failure_kind(bytes) == K::truncated);
  CHECK(failure_kind(std::vector<std::uint8_t>(good.begin(), good.begin() + 10)) == K::truncated);

  bytes = good;
  bytes.push_back(0);
  CHECK(failure_kind(bytes) == K::shape_table);

  // every payload byte: the checksum of the owning tensor catches it
  const std::size_t payload_start = good.size() - (12 + 5 + 4) * sizeof(float);
  const char* owners[] = {"alpha", "beta", "gamma"};
  const std::size_t ends[] = {12, 17, 21};
  for (std::size_t off = payload_start; off < good.size(); ++off) {
    bytes = good;
    bytes[off] ^= 0x01;
    std::string tensor;
    CHECK(failure_kind(bytes, &tensor) == K::payload_checksum);
    const std::size_t elem = (off - payload_start) / sizeof(float);
    std::size_t t = 0;
    while (elem >= ends[t]) ++t;
    CHECK(tensor == owners[t]);
  }

  // a dimension in the table
  const std::string needle = "beta";
  const auto it = std::search(good.begin(), good.end(), needle.begin(), needle.end());
  const std::size_t dims_at = static_cast<std::size_t>(it - good.begin()) + 4 + 4;
  bytes = good;
  bytes[dims_at + 8] = 9;
  CHECK(failure_kind(bytes) == K::shape_table);

  // the stored config
  bytes = good;
  bytes[33] ^= 0x20;
  CHECK(failure_kind(bytes) == K::header_checksum);
}
