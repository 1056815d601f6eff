#include "bsr/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "bsr/errors.hpp"

namespace bsr {

Matrix transpose(const Matrix & m) {
    Matrix t(m.cols, m.rows);
    for (int64_t i = 0; i < m.rows; ++i) {
        for (int64_t j = 0; j < m.cols; ++j) {
            t(j, i) = m(i, j);
        }
    }
    return t;
}

double frobenius_norm(const Matrix & m) {
    double sum = 0.0;
    for (double x : m.data) sum += x * x;
    return std::sqrt(sum);
}

double max_abs(const Matrix & m) {
    double best = 0.0;
    for (double x : m.data) best = std::max(best, std::fabs(x));
    return best;
}

double max_abs_diff(const Matrix & a, const Matrix & b) {
    if (a.rows != b.rows || a.cols != b.cols) {
        throw InvalidInput("max_abs_diff: shape mismatch");
    }
    double best = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        best = std::max(best, std::fabs(a.data[i] - b.data[i]));
    }
    return best;
}

void validate(const Matrix & m, const char * what) {
    if (m.rows < 1 || m.cols < 1) {
        throw InvalidInput(std::string(what) + ": matrix must have rows >= 1 and cols >= 1");
    }
    if (m.data.size() != static_cast<size_t>(m.rows * m.cols)) {
        throw InvalidInput(std::string(what) + ": data length does not match rows*cols");
    }
    if (!m.all_finite()) {
        throw InvalidInput(std::string(what) + ": matrix has non-finite entries");
    }
}

} // namespace bsr
