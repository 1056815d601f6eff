#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bsr/nn.hpp"
#include "bsr/types.hpp"

namespace bsr::compress {

enum class LayerKind { dense, conv };

// Weight-matrix geometry used by the ratio and FLOPs arithmetic. For conv
// descriptors n = C_in * k_h * k_w and spatial_count = H_out * W_out; dense
// layers use spatial_count 1.
struct LayerShape {
    LayerKind kind = LayerKind::dense;
    int64_t m = 0;
    int64_t n = 0;
    int64_t spatial_count = 1;
    bool has_bias = true;
};

std::vector<LayerShape> model_shapes(const nn::Model & model);

int64_t full_rank(const LayerShape & s);
RankVector full_ranks(const std::vector<LayerShape> & shapes);

// True when factorizing at rank r would not shrink the layer
// (m*n <= r*(m+n)); such layers stay dense everywhere.
bool keeps_dense(const LayerShape & s, int64_t r);

// Fraction of weight parameters removed by rank-r factorization; biases are
// excluded on both sides. Zero for r = full ranks.
double compression_ratio(const std::vector<LayerShape> & shapes, const RankVector & r);

int64_t params_dense(const std::vector<LayerShape> & shapes);
int64_t params_compressed(const std::vector<LayerShape> & shapes, const RankVector & r);

// exact counts multiplies and adds separately (bias-free layer costs
// m*(n-1)); fused counts one multiply-add as a single operation (m*n).
enum class FlopsMode { exact, fused };

int64_t flops_fc(const LayerShape & s, FlopsMode mode = FlopsMode::exact);
int64_t flops_conv(const LayerShape & s, FlopsMode mode = FlopsMode::exact);

// Total over layers; with a rank vector, shrinking layers are counted as the
// two-stage cascade (r x n without bias, then m x r with the original bias).
// Activations and other elementwise work cost zero.
int64_t model_flops(const std::vector<LayerShape> & shapes, FlopsMode mode = FlopsMode::exact);
int64_t model_flops(const std::vector<LayerShape> & shapes, const RankVector & r,
                    FlopsMode mode = FlopsMode::exact);

// Replaces every dense layer that shrinks at rank r_l with the cascade
// (a = S_hat V_hat^T, b_mat = U_hat); other layers are copied unchanged.
nn::Model factorize_model(const nn::Model & model, const RankVector & r);

// Trains the (possibly mixed dense/factorized) model in place; cascade
// factors are independent parameters.
std::vector<nn::EpochLog> finetune(nn::Model & model, const dataio::Dataset & ds,
                                   const nn::TrainConfig & cfg);

struct CompressionReport {
    double c_d = 0.0;
    double tau = 0.0;
    double ratio = 0.0;
    int64_t params_before = 0;
    int64_t params_after = 0;
    double mflops_before = 0.0;
    double mflops_after_exact = 0.0;
    double mflops_after_fused = 0.0;
    double accuracy_before = 0.0;
    double accuracy_after = 0.0;
    // Weight-only footprint in Mb (params_after * bits / 8 bytes / 1e6),
    // keyed by bit-width; biases are accounted separately by quantization.
    double memory_mb_32 = 0.0;
    double memory_mb_16 = 0.0;
    double memory_mb_8 = 0.0;
    double memory_mb_4 = 0.0;
};

// Fills ratio, params and memory fields from geometry; accuracy and FLOPs
// fields are set by the caller.
void fill_report_arithmetic(CompressionReport & rep, const std::vector<LayerShape> & shapes,
                            const RankVector & r);

std::string report_json(const CompressionReport & rep);
CompressionReport report_from_json_text(const std::string & text);

std::string report_csv_header();
std::string report_csv_row(const CompressionReport & rep);

} // namespace bsr::compress
