#include "tokmat/embedding_space.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <string>

#include "tokmat/kernels.hpp"

namespace tokmat {

namespace {

void require_finite(std::span<const Scalar> z, const char* what) {
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!std::isfinite(z[i])) {
      throw std::invalid_argument(std::string(what) + ": non-finite component " +
                                  std::to_string(i) + " (" + std::to_string(z[i]) + ")");
    }
  }
}

void require_dim(std::span<const Scalar> z, const EmbeddingTable& table, const char* what) {
  if (z.size() != table.dim()) {
    throw std::invalid_argument(std::string(what) + ": vector has dim " +
                                std::to_string(z.size()) + ", table has dim " +
                                std::to_string(table.dim()));
  }
}

}  // namespace

EmbeddingTable EmbeddingTable::from_rows(const Matrix& raw, Scalar radius) {
  if (!(radius > 0.0) || !std::isfinite(radius)) {
    throw std::invalid_argument("normalize_to_sphere: radius must be positive, got " +
                                std::to_string(radius));
  }
  if (raw.rows() < 2 || raw.cols() < 2) {
    throw std::invalid_argument("normalize_to_sphere: need at least 2x2, got " +
                                shape_string(raw));
  }
  Matrix out = raw;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const Scalar n = norm(row);
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw std::invalid_argument("normalize_to_sphere: row " + std::to_string(r) +
                                  " has zero or non-finite norm");
    }
    const Scalar s = radius / n;
    for (auto& v : row) v *= s;
  }
  return EmbeddingTable(std::move(out), radius);
}

EmbeddingTable EmbeddingTable::from_stored(const Matrix& rows, Scalar radius, Scalar tolerance) {
  const EmbeddingTable checked = from_rows(rows, radius);
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    const Scalar n = norm(rows.row(r));
    if (std::abs(n - radius) > tolerance * radius) {
      throw std::invalid_argument("EmbeddingTable: stored row " + std::to_string(r) + " has norm " +
                                  std::to_string(n) + ", expected " + std::to_string(radius));
    }
  }
  return EmbeddingTable(rows, checked.radius_);
}

EmbeddingTable EmbeddingTable::random(std::size_t vocab_size, std::size_t dim, Scalar radius,
                                      std::mt19937_64& rng) {
  Matrix raw(vocab_size, dim);
  for (std::size_t r = 0; r < vocab_size; ++r) raw.set_row(r, random_direction(dim, rng));
  return from_rows(raw, radius);
}

std::span<const Scalar> EmbeddingTable::row(TokenId id) const {
  if (!valid_id(id)) {
    throw std::out_of_range("EmbeddingTable: token id " + std::to_string(id) +
                            " outside vocabulary of " + std::to_string(vocab_size()));
  }
  return vectors_.row(static_cast<std::size_t>(id));
}

EmbeddingTable normalize_to_sphere(const Matrix& raw, Scalar radius) {
  return EmbeddingTable::from_rows(raw, radius);
}

Vector random_direction(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<Scalar> gauss(0.0, 1.0);
  Vector v(dim);
  Scalar n = 0.0;
  do {
    for (auto& x : v) x = gauss(rng);
    n = norm(v);
  } while (n < 1e-12);
  for (auto& x : v) x /= n;
  return v;
}

TokenId commit(std::span<const Scalar> z, const EmbeddingTable& table) {
  require_dim(z, table, "commit");
  require_finite(z, "commit");
  Vector scores(table.vocab_size());
  kernels::row_dots(table.vectors(), z, scores);
  // strict > keeps the first (lowest) id among equal maxima
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

CandidateRanking top_k_candidates(std::span<const Scalar> z, const EmbeddingTable& table,
                                  std::size_t k) {
  require_dim(z, table, "top_k_candidates");
  require_finite(z, "top_k_candidates");
  if (k < 1 || k > table.vocab_size()) {
    throw std::out_of_range("top_k_candidates: k=" + std::to_string(k) + " outside [1, " +
                            std::to_string(table.vocab_size()) + "]");
  }
  Vector scores(table.vocab_size());
  kernels::row_dots(table.vectors(), z, scores);
  std::vector<TokenId> ids(scores.size());
  std::iota(ids.begin(), ids.end(), 0);
  auto better = [&](TokenId a, TokenId b) {
    const Scalar sa = scores[static_cast<std::size_t>(a)];
    const Scalar sb = scores[static_cast<std::size_t>(b)];
    return sa > sb || (sa == sb && a < b);
  };
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), better);
  CandidateRanking out;
  out.token_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k));
  out.scores.reserve(k);
  for (TokenId id : out.token_ids) out.scores.push_back(scores[static_cast<std::size_t>(id)]);
  return out;
}

Scalar implicit_entropy(std::span<const Scalar> z, const EmbeddingTable& table,
                        Scalar temperature) {
  require_dim(z, table, "implicit_entropy");
  require_finite(z, "implicit_entropy");
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("implicit_entropy: temperature must be positive");
  }
  const Scalar zn = norm(z);
  if (!(zn > 0.0)) throw std::invalid_argument("implicit_entropy: zero vector has no direction");

  Vector logits(table.vocab_size());
  kernels::row_dots(table.vectors(), z, logits);
  Scalar max_logit = -std::numeric_limits<Scalar>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const Scalar en = norm(table.vectors().row(i));
    logits[i] = logits[i] / (zn * en) / temperature;
    max_logit = std::max(max_logit, logits[i]);
  }
  // H = log Z - sum p_i l_i, with logits shifted by their max
  Scalar partition = 0.0, weighted = 0.0;
  for (Scalar& l : logits) {
    l -= max_logit;
    const Scalar w = std::exp(l);
    partition += w;
    weighted += w * l;
  }
  const Scalar h = std::log(partition) - weighted / partition;
  return std::clamp(h, 0.0, std::log(static_cast<Scalar>(table.vocab_size())));
}

}  // namespace tokmat
