#include <doctest.h>

#include "../support.hpp"
#include "tokmat/kernels.hpp"

using namespace tokmat;
using tmtest::random_matrix;

TEST_CASE("matmul_nt on a hand example") {
  const Matrix a{{1, 2}, {3, 4}};
  const Matrix b{{5, 6}, {7, 8}, {9, 10}};
  Matrix c(2, 3);
  kernels::matmul_nt(a, b, c);
  CHECK(c == Matrix{{17, 23, 29}, {39, 53, 67}});
  kernels::matmul_nt(a, b, c, kernels::Accumulate::yes);
  CHECK(c == Matrix{{34, 46, 58}, {78, 106, 134}});
}

TEST_CASE("parallel kernels agree with the serial reference") {
  std::mt19937_64 rng(3);
  // the large shapes cross the size at which the OpenMP path switches on
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 5, 7}, {17, 9, 4}, {300, 64, 200}}) {
    CAPTURE(m);
    const Matrix a = random_matrix(m, k, rng), bt = random_matrix(n, k, rng),
                 b = random_matrix(k, n, rng);
    Matrix c1(m, n), c2(m, n);
    kernels::matmul_nt(a, bt, c1);
    kernels::reference::matmul_nt(a, bt, c2);
    CHECK(tmtest::rel_diff(c1, c2) <= 1e-13);

    kernels::matmul_nn(a, b, c1);
    kernels::reference::matmul_nn(a, b, c2);
    CHECK(tmtest::rel_diff(c1, c2) <= 1e-13);
  }
}

TEST_CASE("matmul_tn_acc accumulates A^T B") {
  std::mt19937_64 rng(4);
  for (auto [k, m, n] : {std::tuple{4, 3, 2}, {257, 40, 90}}) {
    const Matrix a = random_matrix(k, m, rng), b = random_matrix(k, n, rng);
    const Matrix start = random_matrix(m, n, rng);
    Matrix c1 = start, c2 = start;
    kernels::matmul_tn_acc(a, b, c1);
    kernels::reference::matmul_tn_acc(a, b, c2);
    CHECK(tmtest::rel_diff(c1, c2) <= 1e-12);
    // independent check of one entry
    Scalar s = start(1, 1);
    for (std::size_t r = 0; r < static_cast<std::size_t>(k); ++r) s += a(r, 1) * b(r, 1);
    CHECK(c1(1, 1) == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("row_dots, bias and column sums") {
  std::mt19937_64 rng(5);
  const Matrix t = random_matrix(5000, 16, rng);
  const Vector z = tmtest::random_vector(16, rng);
  Vector o1(5000), o2(5000);
  kernels::row_dots(t, z, o1);
  kernels::reference::row_dots(t, z, o2);
  CHECK(o1 == o2);

  Matrix m{{1, 2}, {3, 4}};
  const Vector bias{10, 20};
  kernels::add_row_bias(m, bias);
  CHECK(m == Matrix{{11, 22}, {13, 24}});
  Vector sums{1, 1};
  kernels::column_sums_acc(m, sums);
  CHECK(sums == Vector{25, 47});
  CHECK(kernels::thread_count() >= 1);
}

TEST_CASE("shape mismatches throw") {
  Matrix a(2, 3), b(4, 2), c(2, 4);
  CHECK_THROWS_AS(kernels::matmul_nt(a, b, c), std::invalid_argument);
}
