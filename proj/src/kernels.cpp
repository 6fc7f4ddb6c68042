#include "tokmat/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace tokmat::kernels {

namespace {

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1 << 15;

void check(bool ok, const char* what, const Matrix& a, const Matrix& b, const Matrix& c) {
  if (!ok) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a) + " " +
                                shape_string(b) + " -> " + shape_string(c));
  }
}

}  // namespace

int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c, Accumulate acc) {
  check(a.cols() == b.cols() && c.rows() == a.rows() && c.cols() == b.rows(), "matmul_nt", a, b,
        c);
  const std::size_t m = a.rows(), n = b.rows(), k = a.cols();
  const bool add = acc == Accumulate::yes;
  const long long mm = static_cast<long long>(m);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (long long ii = 0; ii < mm; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const Scalar* ar = a.data() + i * k;
    Scalar* cr = c.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const Scalar* br = b.data() + j * k;
      Scalar s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      cr[j] = add ? cr[j] + s : s;
    }
  }
}

void matmul_nn(const Matrix& a, const Matrix& b, Matrix& c, Accumulate acc) {
  check(a.cols() == b.rows() && c.rows() == a.rows() && c.cols() == b.cols(), "matmul_nn", a, b,
        c);
  const std::size_t m = a.rows(), n = b.cols(), k = a.cols();
  const bool add = acc == Accumulate::yes;
  const long long mm = static_cast<long long>(m);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (long long ii = 0; ii < mm; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    Scalar* cr = c.data() + i * n;
    if (!add) std::fill(cr, cr + n, 0.0);
    const Scalar* ar = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar av = ar[p];
      const Scalar* br = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  check(a.rows() == b.rows() && c.rows() == a.cols() && c.cols() == b.cols(), "matmul_tn_acc", a,
        b, c);
  const std::size_t m = a.cols(), n = b.cols(), k = a.rows();
  const long long mm = static_cast<long long>(m);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (long long ii = 0; ii < mm; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    Scalar* cr = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar av = a.data()[p * m + i];
      if (av == 0.0) continue;
      const Scalar* br = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

void row_dots(const Matrix& table, std::span<const Scalar> z, std::span<Scalar> out) {
  if (z.size() != table.cols() || out.size() != table.rows()) {
    throw std::invalid_argument("row_dots: shape mismatch");
  }
  const std::size_t n = table.rows(), k = table.cols();
  const long long nn = static_cast<long long>(n);
#pragma omp parallel for schedule(static) if (n * k > kParallelWork)
  for (long long ii = 0; ii < nn; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const Scalar* r = table.data() + i * k;
    Scalar s = 0.0;
    for (std::size_t p = 0; p < k; ++p) s += r[p] * z[p];
    out[i] = s;
  }
}

void add_row_bias(Matrix& out, std::span<const Scalar> bias) {
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
  }
}

void column_sums_acc(const Matrix& g, std::span<Scalar> bias_grad) {
  for (std::size_t r = 0; r < g.rows(); ++r) {
    const auto row = g.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) bias_grad[j] += row[j];
  }
}

namespace reference {

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c, Accumulate acc) {
  check(a.cols() == b.cols() && c.rows() == a.rows() && c.cols() == b.rows(), "matmul_nt", a, b,
        c);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      Scalar s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(j, p);
      c(i, j) = acc == Accumulate::yes ? c(i, j) + s : s;
    }
  }
}

void matmul_nn(const Matrix& a, const Matrix& b, Matrix& c, Accumulate acc) {
  check(a.cols() == b.rows() && c.rows() == a.rows() && c.cols() == b.cols(), "matmul_nn", a, b,
        c);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      Scalar s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      c(i, j) = acc == Accumulate::yes ? c(i, j) + s : s;
    }
  }
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  check(a.rows() == b.rows() && c.rows() == a.cols() && c.cols() == b.cols(), "matmul_tn_acc", a,
        b, c);
  for (std::size_t i = 0; i < a.cols(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      Scalar s = 0.0;
      for (std::size_t p = 0; p < a.rows(); ++p) s += a(p, i) * b(p, j);
      c(i, j) += s;
    }
  }
}

void row_dots(const Matrix& table, std::span<const Scalar> z, std::span<Scalar> out) {
  if (z.size() != table.cols() || out.size() != table.rows()) {
    throw std::invalid_argument("row_dots: shape mismatch");
  }
  for (std::size_t i = 0; i < table.rows(); ++i) out[i] = dot(table.row(i), z);
}

}  // namespace reference

}  // namespace tokmat::kernels
