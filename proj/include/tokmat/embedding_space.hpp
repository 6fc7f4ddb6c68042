#pragma once

#include <random>
#include <span>
#include <vector>

#include "tokmat/tensor.hpp"

namespace tokmat {

/// The vocabulary embedding matrix. Every row lies on the sphere of radius R,
/// which is what makes inner-product commitment and cosine ranking agree.
/// Immutable once built; share it freely between sessions.
class EmbeddingTable {
 public:
  /// Rescales every row of `raw` to norm `radius`. Throws naming the first
  /// zero-norm (or non-finite) row.
  static EmbeddingTable from_rows(const Matrix& raw, Scalar radius);
  /// Rows read back from storage: each must already have norm `radius` within
  /// `tolerance` (relative) and is kept bit-for-bit.
  static EmbeddingTable from_stored(const Matrix& rows, Scalar radius, Scalar tolerance = 1e-5);
  /// Uniformly random directions scaled to `radius`.
  static EmbeddingTable random(std::size_t vocab_size, std::size_t dim, Scalar radius,
                               std::mt19937_64& rng);

  const Matrix& vectors() const { return vectors_; }
  std::span<const Scalar> row(TokenId id) const;
  Scalar radius() const { return radius_; }
  std::size_t vocab_size() const { return vectors_.rows(); }
  std::size_t dim() const { return vectors_.cols(); }
  bool valid_id(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < vectors_.rows();
  }

 private:
  EmbeddingTable(Matrix vectors, Scalar radius) : vectors_(std::move(vectors)), radius_(radius) {}

  Matrix vectors_;
  Scalar radius_ = 1.0;
};

inline constexpr Scalar kDefaultRadius = 1.0;

EmbeddingTable normalize_to_sphere(const Matrix& raw, Scalar radius);

/// A uniformly random unit vector of dimension `dim`.
Vector random_direction(std::size_t dim, std::mt19937_64& rng);

/// Projection commitment: argmax_i <z, e_i>, lowest id wins ties.
TokenId commit(std::span<const Scalar> z, const EmbeddingTable& table);

struct CandidateRanking {
  std::vector<TokenId> token_ids;
  std::vector<Scalar> scores;  // raw inner products, non-increasing
};

/// The k best-scoring tokens for z, ordered exactly like commit() would pick them.
CandidateRanking top_k_candidates(std::span<const Scalar> z, const EmbeddingTable& table,
                                  std::size_t k);

/// Entropy (nats) of softmax(cos(z, e_i) / temperature) over the vocabulary.
Scalar implicit_entropy(std::span<const Scalar> z, const EmbeddingTable& table,
                        Scalar temperature = 1.0);

}  // namespace tokmat
