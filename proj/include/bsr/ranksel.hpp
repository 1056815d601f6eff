#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bsr/compress.hpp"
#include "bsr/dataio.hpp"
#include "bsr/linalg.hpp"
#include "bsr/nn.hpp"
#include "bsr/types.hpp"

namespace bsr::ranksel {

struct SearchConfig {
    double c_d = 0.5;            // desired compression ratio, in (0, 1)
    double tau = 0.02;           // band relaxation; c_d - tau must stay > 0
    int k = 5;                   // beam size
    int64_t s = 3;               // level step size
    double gamma = 0.5;          // step shrink factor when a level is empty
    uint64_t seed = 0;
    int64_t val_subset = 0;      // 0 = full validation split
};

void validate(const SearchConfig & cfg);

struct BeamCandidate {
    RankVector r;
    double c = 0.0; // compression ratio of r
    double a = 0.0; // validation accuracy of the truncated model
};

// Per-layer SVDs of the frozen base model, computed once per search.
struct FactorCache {
    std::vector<linalg::SvdFactors> factors;
};

FactorCache build_factor_cache(const nn::Model & base);

// Base model with every layer truncated to rank r_l (layers at full rank are
// copied bitwise).
nn::Model truncated_model(const nn::Model & base, const FactorCache & cache,
                          const RankVector & r);

double truncated_accuracy(const nn::Model & base, const FactorCache & cache,
                          const RankVector & r, const dataio::Dataset & ds);
double truncated_accuracy(const nn::Model & base, const FactorCache & cache,
                          const RankVector & r, const Matrix & features,
                          const std::vector<int> & labels);

// All single-layer cuts of size s, clamped at 1; children equal to the
// parent are omitted and duplicates removed. Deterministic order.
std::vector<RankVector> descendants(const RankVector & r, int64_t s);

struct TraceRow {
    int64_t level = 1;
    int64_t step = 0;
    RankVector r;
    double c = 0.0;
    double a = 0.0;
    bool in_beam = false;
};

void write_trace_csv(const std::vector<TraceRow> & trace, const std::string & path);

struct MbsResult {
    BeamCandidate selected;
    std::vector<TraceRow> trace;
};

// Beam search over rank vectors: each level cuts one layer by s per
// descendant, keeps the K most accurate candidates whose ratio stays at or
// below c_d, and shrinks s by gamma whenever a level admits nothing. Returns
// the first beam leader whose ratio lands in [c_d - tau, c_d]. Throws
// SearchFailure carrying the best candidate seen when the beam bottoms out;
// failure_trace (if given) receives the trace in that case. A non-null
// shared_cache reuses precomputed factors.
MbsResult mbs_search(const nn::Model & base, const dataio::Dataset & ds,
                     const std::vector<compress::LayerShape> & shapes, const SearchConfig & cfg,
                     const FactorCache * shared_cache = nullptr,
                     std::vector<TraceRow> * failure_trace = nullptr);

struct ConfigRun {
    int64_t s = 0;
    int k = 0;
    bool success = false;
    BeamCandidate candidate; // best-so-far when the run failed
    std::vector<TraceRow> trace;
};

// Runs mbs_search with (s, k) in {(3,5), (5,5), (10,5)} and returns the
// most accurate successful result (ties: smaller rank sum, then config
// order). Throws SearchFailure when all three fail.
BeamCandidate multi_config_search(const nn::Model & base, const dataio::Dataset & ds,
                                  const std::vector<compress::LayerShape> & shapes,
                                  const SearchConfig & proto,
                                  std::vector<ConfigRun> * runs = nullptr);

// Exhaustive oracle over an explicit per-layer rank grid (product of grid
// sizes capped at 1e6): feasible-band argmax of validation accuracy, ties by
// smaller rank sum then lexicographic order.
BeamCandidate brute_force_best(const nn::Model & base, const dataio::Dataset & ds,
                               const std::vector<compress::LayerShape> & shapes, double c_d,
                               double tau, const std::vector<std::vector<int64_t>> & rank_grid);

struct EnergyResult {
    RankVector r;
    double ratio = 0.0;
    bool in_band = false;
};

// Equal-energy baseline: each layer keeps the smallest rank holding at least
// a fraction e of its squared singular value mass; e is bisected so the
// ratio lands in the band when the granularity allows it.
EnergyResult energy_baseline(const FactorCache & cache,
                             const std::vector<compress::LayerShape> & shapes, double c_d,
                             double tau);

} // namespace bsr::ranksel
