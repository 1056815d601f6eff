#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bsr/dataio.hpp"
#include "bsr/nn.hpp"
#include "bsr/ranksel.hpp"
#include "bsr/regularizer.hpp"

namespace bsr::cli {

struct DatasetSpec {
    // auto: MNIST IDX files from $BSR_MNIST_DIR when present, otherwise the
    // seeded synthetic digit set. Explicit kinds: mnist, synth_digits,
    // synth_blobs.
    std::string kind = "auto";
    std::string dir;
    int per_class = 800;     // synth_digits
    int blob_classes = 10;   // synth_blobs
    int blob_dim = 16;
    int blob_per_class = 120;
};

struct PipelineConfig {
    DatasetSpec data;
    std::vector<int64_t> arch{784, 256, 128, 10};
    nn::TrainConfig base_train;
    nn::TrainConfig reg_train;
    nn::TrainConfig ft_train;
    ranksel::SearchConfig search;
    regularizer::RegSchedule reg;
    std::string lambda_mode = "scheduled";  // or "fixed"
    std::string rank_update = "once";       // "before_decomposition", "multiple"
    int rank_update_period = 30;            // epochs between re-searches
    std::vector<int> quant_bits{32, 16, 8, 4};
    std::string out_dir = "out";
    uint64_t seed = 0;
    int threads = 1;
};

PipelineConfig default_config();
void validate(const PipelineConfig & cfg);

// Merge a JSON document over cfg; unknown top-level keys are rejected.
void apply_json(PipelineConfig & cfg, const std::string & text);
PipelineConfig load_config(const std::string & path);
std::string config_json(const PipelineConfig & cfg);

// Deterministic sub-seed per pipeline phase.
uint64_t phase_seed(uint64_t seed, const char * phase);

dataio::Dataset load_dataset(const PipelineConfig & cfg);

// Stage entry points. Artifact paths default to directories under
// cfg.out_dir when the argument is empty: trained, ranks, ranks_final,
// regularized, factorized, finetuned, quantized_{bits}.
void run_train(const PipelineConfig & cfg);
void run_select_rank(const PipelineConfig & cfg, const std::string & ckpt, bool single_config);
void run_regularize(const PipelineConfig & cfg, const std::string & ckpt,
                    const std::string & ranks);
void run_compress(const PipelineConfig & cfg, const std::string & ckpt,
                  const std::string & ranks);
void run_finetune(const PipelineConfig & cfg, const std::string & ckpt);
double run_evaluate(const PipelineConfig & cfg, const std::string & ckpt,
                    const std::string & split);
void run_quantize(const PipelineConfig & cfg, const std::string & ckpt);
void run_bsr(const PipelineConfig & cfg);
void run_ablate(const PipelineConfig & cfg, const std::string & which);

} // namespace bsr::cli
