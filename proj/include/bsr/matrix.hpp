#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace bsr {

// Dense row-major matrix. Computation is double precision throughout;
// the 32-bit cast happens only at the persistence boundary.
struct Matrix {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int64_t r, int64_t c) : rows(r), cols(c), data(static_cast<size_t>(r * c), 0.0) {}
    Matrix(int64_t r, int64_t c, std::vector<double> values)
        : rows(r), cols(c), data(std::move(values)) {}

    double & operator()(int64_t i, int64_t j) { return data[static_cast<size_t>(i * cols + j)]; }
    double operator()(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * cols + j)]; }

    double * row(int64_t i) { return data.data() + i * cols; }
    const double * row(int64_t i) const { return data.data() + i * cols; }

    int64_t size() const { return rows * cols; }
    bool empty() const { return data.empty(); }

    static Matrix identity(int64_t n) {
        Matrix m(n, n);
        for (int64_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    bool all_finite() const {
        for (double x : data) {
            if (!std::isfinite(x)) return false;
        }
        return true;
    }
};

Matrix transpose(const Matrix & m);

double frobenius_norm(const Matrix & m);
double max_abs(const Matrix & m);

// max |a - b| over entries; shapes must match.
double max_abs_diff(const Matrix & a, const Matrix & b);

// Throws InvalidInput unless rows/cols >= 1, data length matches, all finite.
void validate(const Matrix & m, const char * what);

} // namespace bsr
