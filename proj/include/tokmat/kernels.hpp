#pragma once

#include "tokmat/tensor.hpp"

// Dense kernels used by the backbone, the losses and the vocabulary scans.
//
// Every kernel exists twice: the default (OpenMP, row-parallel) version and a
// serial version in kernels::reference that spells out the textbook loop. The
// reference path is what the kernel tests compare against and what
// bench_kernels times the parallel path against. Both are deterministic: each
// output element is owned by exactly one thread and summed in a fixed order.

namespace tokmat::kernels {

enum class Accumulate { no, yes };

// C = A * B^T      A: m x k, B: n x k, C: m x n
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c, Accumulate acc = Accumulate::no);
// C = A * B        A: m x k, B: k x n, C: m x n
void matmul_nn(const Matrix& a, const Matrix& b, Matrix& c, Accumulate acc = Accumulate::no);
// C += A^T * B     A: k x m, B: k x n, C: m x n
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c);
// out[i] = <table.row(i), z>
void row_dots(const Matrix& table, std::span<const Scalar> z, std::span<Scalar> out);
// out[r, :] += bias
void add_row_bias(Matrix& out, std::span<const Scalar> bias);
// bias_grad += column sums of g
void column_sums_acc(const Matrix& g, std::span<Scalar> bias_grad);

namespace reference {
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c, Accumulate acc = Accumulate::no);
void matmul_nn(const Matrix& a, const Matrix& b, Matrix& c, Accumulate acc = Accumulate::no);
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c);
void row_dots(const Matrix& table, std::span<const Scalar> z, std::span<Scalar> out);
}  // namespace reference

// Number of OpenMP threads the parallel kernels will use (1 when built without OpenMP).
int thread_count();

}  // namespace tokmat::kernels
