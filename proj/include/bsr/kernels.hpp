#pragma once

#include "bsr/matrix.hpp"

// Dense products used by the training engine and candidate evaluation.
// Every kernel exists twice: a plain serial reference and an OpenMP variant.
// The OpenMP versions partition independent output rows with a static
// schedule and never split an accumulation across threads, so they are
// bitwise identical to the serial reference at any thread count. The serial
// versions stay as the ground truth for tests and the benchmark.
namespace bsr::kernels {

// c = a * b            a: p×q, b: q×r, c: p×r
void gemm_nn_serial(const Matrix & a, const Matrix & b, Matrix & c);
void gemm_nn_omp(const Matrix & a, const Matrix & b, Matrix & c, int threads);

// c = a * b^T          a: p×q, b: r×q, c: p×r
void gemm_nt_serial(const Matrix & a, const Matrix & b, Matrix & c);
void gemm_nt_omp(const Matrix & a, const Matrix & b, Matrix & c, int threads);

// c = a^T * b          a: p×q, b: p×r, c: q×r
void gemm_tn_serial(const Matrix & a, const Matrix & b, Matrix & c);
void gemm_tn_omp(const Matrix & a, const Matrix & b, Matrix & c, int threads);

// Dispatching entry points honoring the global thread setting.
void gemm_nn(const Matrix & a, const Matrix & b, Matrix & c);
void gemm_nt(const Matrix & a, const Matrix & b, Matrix & c);
void gemm_tn(const Matrix & a, const Matrix & b, Matrix & c);

// Global thread count for the dispatchers. 1 = serial reference path.
void set_threads(int n);
int threads();

} // namespace bsr::kernels
