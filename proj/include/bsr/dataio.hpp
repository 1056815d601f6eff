#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "bsr/matrix.hpp"

namespace bsr::dataio {

// Immutable once constructed; split index lists are disjoint subsets of
// [0, N) produced by split().
struct Dataset {
    Matrix features;            // N × d, values in [0, 1]
    std::vector<int> labels;    // N entries in [0, classes)
    int classes = 0;
    std::vector<int64_t> train;
    std::vector<int64_t> val;
    std::vector<int64_t> test;

    int64_t size() const { return features.rows; }
    int64_t dim() const { return features.cols; }
};

// IDX readers/writers (big-endian, magic 0x00000803 / 0x00000801).
Dataset load_mnist_idx(const std::string & images_path, const std::string & labels_path);
void write_mnist_idx(const Dataset & ds, const std::string & images_path,
                     const std::string & labels_path, int64_t rows, int64_t cols);

// Gaussian clusters with class-dependent means, deterministic per seed.
Dataset synth_blobs(int classes, int per_class, int d, uint64_t seed);

// Seeded 28×28 glyph dataset (ten digit shapes with shift, intensity and
// noise jitter), a self-contained stand-in with MNIST geometry.
Dataset synth_digits(int per_class, uint64_t seed);

// Stratified split by label; fractions must be positive and sum to 1.
Dataset split(const Dataset & ds, const std::array<double, 3> & fractions, uint64_t seed);

// Gathers the given rows into a dense (features, labels) view copy.
struct Subset {
    Matrix features;
    std::vector<int> labels;
};
Subset gather(const Dataset & ds, const std::vector<int64_t> & idx);

// Order-sensitive content hash for determinism checks.
uint64_t fingerprint(const Dataset & ds);

} // namespace bsr::dataio
