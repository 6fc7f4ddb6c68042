#include <chrono>
#include <cstdio>
#include <functional>
#include <random>

#include "tokmat/kernels.hpp"

using namespace tokmat;
namespace k = tokmat::kernels;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<Scalar> g;
  Matrix m(r, c);
  for (auto& v : m.flat()) v = g(rng);
  return m;
}

double max_diff(const Matrix& a, const Matrix& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.flat()[i] - b.flat()[i]));
  return d;
}

double time_ms(const std::function<void()>& f, int reps) {
  f();
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const char* name, const char* shape, double par, double ref, double diff) {
  std::printf("%-14s %-18s %10.3f %10.3f %8.2fx %10.2e\n", name, shape, par, ref, ref / par, diff);
}

}  // namespace

int main(int argc, char** argv) {
  const int reps = argc > 1 ? std::atoi(argv[1]) : 20;
  std::mt19937_64 rng(7);
  std::printf("threads %d\n", k::thread_count());
  std::printf("%-14s %-18s %10s %10s %9s %10s\n", "kernel", "shape", "omp_ms", "serial_ms",
              "speedup", "max_diff");

  for (std::size_t n : {64, 256, 512}) {
    const Matrix a = random_matrix(n, 128, rng), b = random_matrix(n, 128, rng);
    Matrix c1(n, n), c2(n, n);
    const double par = time_ms([&] { k::matmul_nt(a, b, c1); }, reps);
    const double ref = time_ms([&] { k::reference::matmul_nt(a, b, c2); }, reps);
    char shape[32];
    std::snprintf(shape, sizeof shape, "%zux128 * %zux128'", n, n);
    report("matmul_nt", shape, par, ref, max_diff(c1, c2));
  }
  for (std::size_t n : {64, 256, 512}) {
    const Matrix a = random_matrix(n, 128, rng), b = random_matrix(128, 512, rng);
    Matrix c1(n, 512), c2(n, 512);
    const double par = time_ms([&] { k::matmul_nn(a, b, c1); }, reps);
    const double ref = time_ms([&] { k::reference::matmul_nn(a, b, c2); }, reps);
    char shape[32];
    std::snprintf(shape, sizeof shape, "%zux128 * 128x512", n);
    report("matmul_nn", shape, par, ref, max_diff(c1, c2));
  }
  for (std::size_t n : {64, 256, 512}) {
    const Matrix a = random_matrix(n, 128, rng), b = random_matrix(n, 512, rng);
    Matrix c1(128, 512), c2(128, 512);
    const double par = time_ms([&] { k::matmul_tn_acc(a, b, c1); }, reps);
    const double ref = time_ms([&] { k::reference::matmul_tn_acc(a, b, c2); }, reps);
    char shape[32];
    std::snprintf(shape, sizeof shape, "%zux128' * %zux512", n, n);
    report("matmul_tn_acc", shape, par, ref, max_diff(c1, c2));
  }
  for (std::size_t v : {259, 4096, 32768}) {
    const Matrix t = random_matrix(v, 64, rng);
    const Matrix z = random_matrix(1, 64, rng);
    Matrix o1(1, v), o2(1, v);
    const double par = time_ms([&] { k::row_dots(t, z.row(0), o1.row(0)); }, reps * 10);
    const double ref = time_ms([&] { k::reference::row_dots(t, z.row(0), o2.row(0)); }, reps * 10);
    char shape[32];
    std::snprintf(shape, sizeof shape, "%zux64 . 64", v);
    report("row_dots", shape, par, ref, max_diff(o1, o2));
  }
  return 0;
}
