#include <doctest.h>

#include <cmath>

#include "../support.hpp"
#include "tokmat/embedding_space.hpp"

using namespace tokmat;

TEST_CASE("from_rows projects every row onto the sphere") {
  std::mt19937_64 rng(1);
  const Matrix raw = tmtest::random_matrix(20, 6, rng, 3.0);
  const auto t = EmbeddingTable::from_rows(raw, 2.5);
  for (std::size_t r = 0; r < 20; ++r) {
    CHECK(norm(t.vectors().row(r)) == doctest::Approx(2.5).epsilon(1e-12));
    // direction preserved
    CHECK(dot(t.vectors().row(r), raw.row(r)) / (2.5 * norm(raw.row(r))) ==
          doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(t.radius() == 2.5);
  CHECK(t.vocab_size() == 20);
  CHECK(t.dim() == 6);
}

TEST_CASE("from_rows rejects degenerate input") {
  Matrix raw{{1, 0}, {0, 0}, {0, 1}};
  try {
    EmbeddingTable::from_rows(raw, 1.0);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("row 1") != std::string::npos);
  }
  CHECK_THROWS(EmbeddingTable::from_rows(Matrix{{1, 0}, {0, 1}}, 0.0));
  CHECK_THROWS(EmbeddingTable::from_rows(Matrix{{1, 0}}, 1.0));
  raw(1, 0) = std::nan("");
  CHECK_THROWS(EmbeddingTable::from_rows(raw, 1.0));
}

TEST_CASE("from_stored keeps rows bit-exact and checks norms") {
  std::mt19937_64 rng(2);
  const auto t = EmbeddingTable::random(10, 4, 1.0, rng);
  const auto s = EmbeddingTable::from_stored(t.vectors(), 1.0);
  CHECK(s.vectors() == t.vectors());
  Matrix off = t.vectors();
  off(3, 0) += 0.1;
  CHECK_THROWS(EmbeddingTable::from_stored(off, 1.0));
}

TEST_CASE("row lookup is range checked") {
  std::mt19937_64 rng(2);
  const auto t = EmbeddingTable::random(5, 3, 1.0, rng);
  CHECK_THROWS_AS(t.row(5), std::out_of_range);
  CHECK_THROWS_AS(t.row(-1), std::out_of_range);
  CHECK(t.valid_id(4));
}

TEST_CASE("commit picks the largest inner product") {
  const auto t = EmbeddingTable::from_rows(Matrix{{1, 0}, {0, 1}, {-1, 0}}, 1.0);
  CHECK(commit(Vector{0.2, 0.9}, t) == 1);
  CHECK(commit(Vector{-3, 0.1}, t) == 2);
  // equal scores: lowest id
  CHECK(commit(Vector{1, 1}, t) == 0);
  CHECK(commit(Vector{0, 0}, t) == 0);
  CHECK_THROWS(commit(Vector{std::nan(""), 0}, t));
  CHECK_THROWS(commit(Vector{1, 0, 0}, t));
}

TEST_CASE("commit matches a brute-force scan and is scale invariant") {
  std::mt19937_64 rng(3);
  const auto t = EmbeddingTable::random(50, 8, 1.0, rng);
  std::uniform_real_distribution<Scalar> scale(1e-3, 1e3);
  for (int trial = 0; trial < 200; ++trial) {
    Vector z = tmtest::random_vector(8, rng);
    TokenId best = 0;
    for (TokenId i = 1; i < 50; ++i) {
      if (dot(z, t.row(i)) > dot(z, t.row(best))) best = i;
    }
    CHECK(commit(z, t) == best);
    const Scalar c = scale(rng);
    for (auto& v : z) v *= c;
    CHECK(commit(z, t) == best);
  }
}

TEST_CASE("top_k_candidates ranks like commit") {
  std::mt19937_64 rng(4);
  const auto t = EmbeddingTable::random(30, 5, 1.0, rng);
  const Vector z = tmtest::random_vector(5, rng);
  const auto r = top_k_candidates(z, t, 8);
  REQUIRE(r.token_ids.size() == 8);
  CHECK(r.token_ids[0] == commit(z, t));
  for (std::size_t i = 1; i < 8; ++i) CHECK(r.scores[i - 1] >= r.scores[i]);
  for (std::size_t i = 0; i < 8; ++i) CHECK(r.scores[i] == doctest::Approx(dot(z, t.row(r.token_ids[i]))));
  CHECK_THROWS(top_k_candidates(z, t, 0));
  CHECK_THROWS(top_k_candidates(z, t, 31));
  CHECK(top_k_candidates(z, t, 30).token_ids.size() == 30);

  // ties broken by id
  const auto tied = EmbeddingTable::from_rows(Matrix{{0, 1}, {1, 0}, {0, 1}, {1, 0}}, 1.0);
  CHECK(top_k_candidates(Vector{1, 0}, tied, 4).token_ids == std::vector<TokenId>{1, 3, 0, 2});
}

TEST_CASE("implicit entropy of an equidistant configuration is ln V") {
  // rows e_0..e_{V-1}, z orthogonal to all of them: every cosine is 0
  const std::size_t V = 7;
  Matrix rows(V, V + 1);
  for (std::size_t i = 0; i < V; ++i) rows(i, i) = 1.0;
  const auto t = EmbeddingTable::from_rows(rows, 1.0);
  Vector z(V + 1, 0.0);
  z[V] = 0.3;
  CHECK(implicit_entropy(z, t) == doctest::Approx(std::log(7.0)).epsilon(1e-12));
}

TEST_CASE("implicit entropy against a direct softmax") {
  std::mt19937_64 rng(6);
  const auto t = EmbeddingTable::random(40, 6, 3.0, rng);
  const Vector z = tmtest::random_vector(6, rng);
  for (Scalar temp : {1.0, 0.1, 0.02}) {
    std::vector<Scalar> logits;
    for (TokenId i = 0; i < 40; ++i) logits.push_back(dot(z, t.row(i)) / (norm(z) * 3.0) / temp);
    Scalar mx = *std::max_element(logits.begin(), logits.end()), zsum = 0;
    for (auto l : logits) zsum += std::exp(l - mx);
    Scalar h = 0;
    for (auto l : logits) {
      const Scalar p = std::exp(l - mx) / zsum;
      h -= p * std::log(p);
    }
    CHECK(implicit_entropy(z, t, temp) == doctest::Approx(h).epsilon(1e-10));
    CHECK(implicit_entropy(z, t, temp) <= std::log(40.0));
  }
  CHECK_THROWS(implicit_entropy(Vector(6, 0.0), t));
}

TEST_CASE("random_direction has unit norm") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 10; ++i) CHECK(norm(random_direction(9, rng)) == doctest::Approx(1.0));
}
