#pragma once

#include <cstdint>
#include <vector>

#include "bsr/linalg.hpp"
#include "bsr/matrix.hpp"
#include "bsr/nn.hpp"
#include "bsr/types.hpp"

namespace bsr::regularizer {

// ||w||_F^2 / sigma_1^2; always in [1, min(m, n)].
double stable_rank(const Matrix & w);

// Tail-to-head singular value ratio (sum_{i>r} sigma_i) / (sum_{i<=r} sigma_i);
// zero iff rank(w) <= r. Values are not squared.
double msr_value(const Matrix & w, int64_t r);
double msr_value_from(const std::vector<double> & sigma, int64_t r);

struct MsrGradient {
    Matrix grad;
    bool degenerate = false; // sigma_r - sigma_{r+1} < 1e-9 at the split
};

// Analytic gradient of msr_value:
//   (trS_t / trS_h) * [U_t V_t^T / trS_t - U_h V_h^T / trS_h]
// where h/t are the leading-r and tail blocks. Exactly rank-r input gives
// the zero matrix. A degenerate split is flagged, never fatal.
MsrGradient msr_gradient(const Matrix & w, int64_t r);
MsrGradient msr_gradient_from(const linalg::SvdFactors & f, int64_t r);

struct RegSchedule {
    double lambda0 = 0.02;
    double growth = 1.5; // per-period multiplier
    int period_epochs = 15;
    int svd_refresh_iters = 64;
    RankVector targets;
    bool scheduled = true; // false pins lambda at lambda0 for the whole run
};

// lambda0 * growth^floor(epoch / period); the fixed mode ignores the epoch.
double lambda_at(const RegSchedule & s, int epoch);

// Training hook adding lambda(epoch) * msr_gradient(W_l, r_l) to each dense
// layer's weight gradient. Per-layer factors are cached and refreshed every
// svd_refresh_iters optimizer steps; layers already at full target rank are
// skipped. A lambda of zero leaves the run bitwise identical to an
// unpenalized one.
class MsrPenalty final : public nn::PenaltyHook {
  public:
    explicit MsrPenalty(RegSchedule schedule, bool use_randomized_svd = false, uint64_t seed = 0);

    double apply(const nn::Model & model, nn::Gradients & g, int64_t iteration,
                 int epoch) override;
    double lambda_value(int epoch) const override;
    std::vector<double> layer_values(const nn::Model & model) const override;

    // Replaces the rank targets mid-run (search-repeat ablation); invalidates
    // the factor cache.
    void set_targets(const RankVector & targets);
    const RankVector & targets() const { return sched_.targets; }
    int64_t degenerate_events() const { return degenerate_; }

  private:
    void refresh(const nn::Model & model, int64_t iteration);

    RegSchedule sched_;
    bool randomized_;
    uint64_t seed_;
    std::vector<linalg::SvdFactors> cache_;
    int64_t stamp_ = -1;
    int64_t degenerate_ = 0;
};

} // namespace bsr::regularizer
