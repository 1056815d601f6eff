#include "bsr/regularizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bsr/errors.hpp"
#include "bsr/kernels.hpp"
#include "bsr/rng.hpp"

namespace bsr::regularizer {

namespace {

// Relative tail mass below this is numerical noise from the SVD of an
// exactly rank-r matrix; the penalty is at its minimum there.
constexpr double kRankTol = 1e-10;

Matrix cols_slice(const Matrix & m, int64_t c0, int64_t c1) {
    Matrix out(m.rows, c1 - c0);
    for (int64_t i = 0; i < m.rows; ++i) {
        for (int64_t j = c0; j < c1; ++j) {
            out(i, j - c0) = m(i, j);
        }
    }
    return out;
}

void check_rank(int64_t r, int64_t R, const char * who) {
    if (r < 1 || r > R) {
        throw InvalidInput(std::string(who) + ": rank out of [1, min(m, n)]");
    }
}

} // namespace

double stable_rank(const Matrix & w) {
    validate(w, "stable_rank input");
    const linalg::SvdFactors f = linalg::svd_full(w);
    const double s1 = f.sigma.front();
    if (s1 <= 0.0) {
        throw InvalidInput("stable_rank: zero matrix");
    }
    double sq = 0.0;
    for (const double s : f.sigma) sq += s * s;
    return sq / (s1 * s1);
}

double msr_value_from(const std::vector<double> & sigma, int64_t r) {
    check_rank(r, static_cast<int64_t>(sigma.size()), "msr_value");
    double head = 0.0;
    double tail = 0.0;
    for (int64_t i = 0; i < static_cast<int64_t>(sigma.size()); ++i) {
        (i < r ? head : tail) += sigma[static_cast<size_t>(i)];
    }
    if (head <= 0.0) {
        throw InvalidInput("msr_value: zero matrix");
    }
    if (tail <= kRankTol * head) return 0.0;
    return tail / head;
}

double msr_value(const Matrix & w, int64_t r) {
    validate(w, "msr_value input");
    return msr_value_from(linalg::svd_full(w).sigma, r);
}

MsrGradient msr_gradient_from(const linalg::SvdFactors & f, int64_t r) {
    const int64_t R = f.rank();
    check_rank(r, R, "msr_gradient");
    double head = 0.0;
    double tail = 0.0;
    for (int64_t i = 0; i < R; ++i) {
        (i < r ? head : tail) += f.sigma[static_cast<size_t>(i)];
    }
    if (head <= 0.0) {
        throw InvalidInput("msr_gradient: zero matrix");
    }

    MsrGradient out;
    out.degenerate =
        r < R && f.sigma[static_cast<size_t>(r - 1)] - f.sigma[static_cast<size_t>(r)] < 1e-9;
    const int64_t m = f.u.rows;
    const int64_t n = f.v.rows;
    if (tail <= kRankTol * head) {
        out.grad = Matrix(m, n);
        return out;
    }

    const Matrix uh = cols_slice(f.u, 0, r);
    const Matrix vh = cols_slice(f.v, 0, r);
    const Matrix ut = cols_slice(f.u, r, R);
    const Matrix vt = cols_slice(f.v, r, R);
    Matrix tail_outer(m, n);
    Matrix head_outer(m, n);
    kernels::gemm_nt(ut, vt, tail_outer);
    kernels::gemm_nt(uh, vh, head_outer);

    out.grad = Matrix(m, n);
    const double head_coef = tail / (head * head);
    for (size_t i = 0; i < out.grad.data.size(); ++i) {
        out.grad.data[i] = tail_outer.data[i] / head - head_coef * head_outer.data[i];
    }
    return out;
}

MsrGradient msr_gradient(const Matrix & w, int64_t r) {
    validate(w, "msr_gradient input");
    return msr_gradient_from(linalg::svd_full(w), r);
}

double lambda_at(const RegSchedule & s, int epoch) {
    if (epoch < 0) {
        throw InvalidInput("lambda_at: epoch must be >= 0");
    }
    if (!s.scheduled) return s.lambda0;
    return s.lambda0 * std::pow(s.growth, static_cast<double>(epoch / s.period_epochs));
}

MsrPenalty::MsrPenalty(RegSchedule schedule, bool use_randomized_svd, uint64_t seed)
    : sched_(std::move(schedule)), randomized_(use_randomized_svd), seed_(seed) {
    if (sched_.lambda0 < 0.0) {
        throw InvalidInput("regularizer: lambda0 must be >= 0");
    }
    if (sched_.growth < 1.0) {
        throw InvalidInput("regularizer: growth must be >= 1");
    }
    if (sched_.period_epochs < 1 || sched_.svd_refresh_iters < 1) {
        throw InvalidInput("regularizer: period and refresh interval must be >= 1");
    }
}

double MsrPenalty::lambda_value(int epoch) const { return lambda_at(sched_, epoch); }

void MsrPenalty::set_targets(const RankVector & targets) {
    sched_.targets = targets;
    cache_.clear();
    stamp_ = -1;
}

void MsrPenalty::refresh(const nn::Model & model, int64_t iteration) {
    if (sched_.targets.size() != model.layers.size()) {
        throw InvalidInput("regularizer: one target rank per layer required");
    }
    cache_.assign(model.layers.size(), linalg::SvdFactors{});
    for (size_t l = 0; l < model.layers.size(); ++l) {
        const auto * d = std::get_if<nn::DenseLayer>(&model.layers[l]);
        if (d == nullptr) continue;
        const int64_t R = std::min(d->w.rows, d->w.cols);
        const int64_t r = sched_.targets[l];
        check_rank(r, R, "regularizer target");
        if (r == R) continue;
        if (randomized_) {
            const uint64_t sub = splitmix64(seed_ ^ (static_cast<uint64_t>(iteration) << 8) ^ l);
            cache_[l] = linalg::svd_randomized(d->w, R, linalg::kDefaultOversampling,
                                               linalg::kDefaultPowerIters, sub);
        } else {
            cache_[l] = linalg::svd_full(d->w);
        }
    }
    stamp_ = iteration;
}

double MsrPenalty::apply(const nn::Model & model, nn::Gradients & g, int64_t iteration,
                         int epoch) {
    const double lam = lambda_value(epoch);
    if (lam == 0.0) return 0.0;
    if (stamp_ < 0 || iteration < stamp_ || iteration - stamp_ >= sched_.svd_refresh_iters) {
        refresh(model, iteration);
    }
    double total = 0.0;
    for (size_t l = 0; l < model.layers.size(); ++l) {
        const auto * d = std::get_if<nn::DenseLayer>(&model.layers[l]);
        if (d == nullptr) continue;
        const int64_t R = std::min(d->w.rows, d->w.cols);
        const int64_t r = sched_.targets[l];
        if (r == R) continue;
        const linalg::SvdFactors & f = cache_[l];
        total += msr_value_from(f.sigma, r);
        MsrGradient mg = msr_gradient_from(f, r);
        if (mg.degenerate) ++degenerate_;
        double * gw = g.layers[l].w.data.data();
        for (size_t i = 0; i < mg.grad.data.size(); ++i) {
            gw[i] += lam * mg.grad.data[i];
        }
    }
    return lam * total;
}

std::vector<double> MsrPenalty::layer_values(const nn::Model & model) const {
    std::vector<double> vals;
    vals.reserve(model.layers.size());
    for (size_t l = 0; l < model.layers.size(); ++l) {
        const auto * d = std::get_if<nn::DenseLayer>(&model.layers[l]);
        if (d == nullptr || sched_.targets.size() != model.layers.size()) {
            vals.push_back(0.0);
            continue;
        }
        vals.push_back(msr_value(d->w, sched_.targets[l]));
    }
    return vals;
}

} // namespace bsr::regularizer
