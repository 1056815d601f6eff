#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bsr/matrix.hpp"
#include "bsr/nn.hpp"

namespace bsr::quantize {

// Symmetric per-tensor integer codes; bits = 32 is a passthrough that keeps
// the raw values untouched.
struct QuantizedTensor {
    int bits = 32;
    int64_t rows = 0;
    int64_t cols = 0;
    double scale = 1.0;
    std::vector<int32_t> codes; // bits < 32
    std::vector<double> raw;    // bits = 32
};

// scale = max|w| / (2^{bits-1} - 1), codes rounded half away from zero and
// clamped to the symmetric range. All-zero input gets scale 1, codes 0.
QuantizedTensor quantize_tensor(const Matrix & w, int bits);

Matrix dequantize(const QuantizedTensor & q);

struct QuantizeResult {
    nn::Model model; // weights replaced by their dequantized values
    int bits = 32;
    int64_t weight_params = 0;
    int64_t bias_params = 0;
    double memory_bytes = 0.0; // weights at `bits`, biases at 32
};

// Quantize-dequantize every weight matrix and cascade factor; biases stay
// 32-bit.
QuantizeResult quantize_model(const nn::Model & model, int bits);

// One row of the accuracy/memory matrix; cells align with the bits list
// passed to quant_matrix_csv.
struct QuantRow {
    std::string setting;
    std::vector<double> accuracy;
    std::vector<double> memory_mb;
};

std::string quant_matrix_csv(const std::vector<int> & bits, const std::vector<QuantRow> & rows);

} // namespace bsr::quantize
