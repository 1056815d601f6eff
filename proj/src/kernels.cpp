#include "bsr/kernels.hpp"

#include <atomic>

#include "bsr/errors.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace bsr::kernels {

namespace {

std::atomic<int> g_threads{1};

void check_nn(const Matrix & a, const Matrix & b, const Matrix & c) {
    if (a.cols != b.rows || c.rows != a.rows || c.cols != b.cols) {
        throw InvalidInput("gemm_nn: shape mismatch");
    }
}

void check_nt(const Matrix & a, const Matrix & b, const Matrix & c) {
    if (a.cols != b.cols || c.rows != a.rows || c.cols != b.rows) {
        throw InvalidInput("gemm_nt: shape mismatch");
    }
}

void check_tn(const Matrix & a, const Matrix & b, const Matrix & c) {
    if (a.rows != b.rows || c.rows != a.cols || c.cols != b.cols) {
        throw InvalidInput("gemm_tn: shape mismatch");
    }
}

// One output row of c = a*b, accumulated in k-major order.
inline void nn_row(const Matrix & a, const Matrix & b, Matrix & c, int64_t i) {
    double * ci = c.row(i);
    const double * ai = a.row(i);
    for (int64_t j = 0; j < c.cols; ++j) ci[j] = 0.0;
    for (int64_t k = 0; k < a.cols; ++k) {
        const double aik = ai[k];
        const double * bk = b.row(k);
        for (int64_t j = 0; j < c.cols; ++j) {
            ci[j] += aik * bk[j];
        }
    }
}

// One output row of c = a*b^T: row-row dot products.
inline void nt_row(const Matrix & a, const Matrix & b, Matrix & c, int64_t i) {
    double * ci = c.row(i);
    const double * ai = a.row(i);
    for (int64_t j = 0; j < c.cols; ++j) {
        const double * bj = b.row(j);
        double sum = 0.0;
        for (int64_t k = 0; k < a.cols; ++k) {
            sum += ai[k] * bj[k];
        }
        ci[j] = sum;
    }
}

// One output row of c = a^T*b (row q of c gathers column q of a).
inline void tn_row(const Matrix & a, const Matrix & b, Matrix & c, int64_t q) {
    double * cq = c.row(q);
    for (int64_t j = 0; j < c.cols; ++j) cq[j] = 0.0;
    for (int64_t p = 0; p < a.rows; ++p) {
        const double apq = a(p, q);
        const double * bp = b.row(p);
        for (int64_t j = 0; j < c.cols; ++j) {
            cq[j] += apq * bp[j];
        }
    }
}

} // namespace

void gemm_nn_serial(const Matrix & a, const Matrix & b, Matrix & c) {
    check_nn(a, b, c);
    for (int64_t i = 0; i < c.rows; ++i) nn_row(a, b, c, i);
}

void gemm_nn_omp(const Matrix & a, const Matrix & b, Matrix & c, int threads) {
    check_nn(a, b, c);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(threads)
    for (int64_t i = 0; i < c.rows; ++i) nn_row(a, b, c, i);
#else
    (void) threads;
    for (int64_t i = 0; i < c.rows; ++i) nn_row(a, b, c, i);
#endif
}

void gemm_nt_serial(const Matrix & a, const Matrix & b, Matrix & c) {
    check_nt(a, b, c);
    for (int64_t i = 0; i < c.rows; ++i) nt_row(a, b, c, i);
}

void gemm_nt_omp(const Matrix & a, const Matrix & b, Matrix & c, int threads) {
    check_nt(a, b, c);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(threads)
    for (int64_t i = 0; i < c.rows; ++i) nt_row(a, b, c, i);
#else
    (void) threads;
    for (int64_t i = 0; i < c.rows; ++i) nt_row(a, b, c, i);
#endif
}

void gemm_tn_serial(const Matrix & a, const Matrix & b, Matrix & c) {
    check_tn(a, b, c);
    for (int64_t q = 0; q < c.rows; ++q) tn_row(a, b, c, q);
}

void gemm_tn_omp(const Matrix & a, const Matrix & b, Matrix & c, int threads) {
    check_tn(a, b, c);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(threads)
    for (int64_t q = 0; q < c.rows; ++q) tn_row(a, b, c, q);
#else
    (void) threads;
    for (int64_t q = 0; q < c.rows; ++q) tn_row(a, b, c, q);
#endif
}

void gemm_nn(const Matrix & a, const Matrix & b, Matrix & c) {
    int t = threads();
    if (t > 1) {
        gemm_nn_omp(a, b, c, t);
    } else {
        gemm_nn_serial(a, b, c);
    }
}

void gemm_nt(const Matrix & a, const Matrix & b, Matrix & c) {
    int t = threads();
    if (t > 1) {
        gemm_nt_omp(a, b, c, t);
    } else {
        gemm_nt_serial(a, b, c);
    }
}

void gemm_tn(const Matrix & a, const Matrix & b, Matrix & c) {
    int t = threads();
    if (t > 1) {
        gemm_tn_omp(a, b, c, t);
    } else {
        gemm_tn_serial(a, b, c);
    }
}

void set_threads(int n) {
    g_threads.store(n < 1 ? 1 : n);
}

int threads() {
    return g_threads.load();
}

} // namespace bsr::kernels
