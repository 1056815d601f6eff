#pragma once

#include <cstdint>
#include <vector>

#include "bsr/matrix.hpp"

namespace bsr::linalg {

// Thin SVD of an m×n matrix: u is m×R, v is n×R, sigma holds R singular
// values in descending order, R = min(m, n). Sign convention: the first
// entry of each u column with magnitude above 1e-12 is nonnegative, v
// adjusted to match, so factorizations are reproducible.
struct SvdFactors {
    Matrix u;
    std::vector<double> sigma;
    Matrix v;

    int64_t rank() const { return static_cast<int64_t>(sigma.size()); }
};

SvdFactors svd_full(const Matrix & w);

// Range-finder + power-iteration randomized SVD returning the top-k factors.
// k: target rank, p: oversampling columns, q: power iterations. Deterministic
// for a fixed seed.
inline constexpr int64_t kDefaultOversampling = 10;
inline constexpr int64_t kDefaultPowerIters = 2;

SvdFactors svd_randomized(const Matrix & w, int64_t k, int64_t p, int64_t q, uint64_t seed);

// Leading r columns/values of f.
SvdFactors truncate(const SvdFactors & f, int64_t r);

// u · diag(sigma) · v^T
Matrix reconstruct(const SvdFactors & f);

} // namespace bsr::linalg
