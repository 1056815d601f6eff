#include <doctest.h>

#include <cmath>
#include <vector>

#include "bsr/dataio.hpp"
#include "bsr/errors.hpp"
#include "bsr/kernels.hpp"
#include "bsr/linalg.hpp"
#include "bsr/matrix.hpp"
#include "bsr/nn.hpp"
#include "bsr/regularizer.hpp"
#include "bsr/rng.hpp"

using bsr::Matrix;
namespace reg = bsr::regularizer;
namespace nn = bsr::nn;
namespace linalg = bsr::linalg;

namespace {

Matrix diag_matrix(const std::vector<double> & d, int64_t rows, int64_t cols) {
    Matrix m(rows, cols);
    for (size_t i = 0; i < d.size(); ++i) m((int64_t)i, (int64_t)i) = d[i];
    return m;
}

// random matrix whose singular values are spaced out, so the r / r+1 split is
// never degenerate and finite differences stay well conditioned
Matrix gapped_matrix(int64_t rows, int64_t cols, uint64_t seed) {
    bsr::Rng rng(seed);
    Matrix m(rows, cols);
    for (double & v : m.data) v = rng.normal();
    linalg::SvdFactors f = linalg::svd_full(m);
    int64_t k = f.rank();
    Matrix shaped(rows, cols);
    Matrix scaled_u = f.u;
    for (int64_t j = 0; j < k; ++j) {
        double s = 4.0 * std::pow(0.55, (double)j) + 0.05 * (double)(k - j);
        for (int64_t i = 0; i < rows; ++i) scaled_u(i, j) *= s;
    }
    bsr::kernels::gemm_nt(scaled_u, f.v, shaped);
    return shaped;
}

} // namespace

TEST_CASE("stable rank of diag(2,1) is 1.25") {
    Matrix w = diag_matrix({2.0, 1.0}, 2, 2);
    CHECK(reg::stable_rank(w) == doctest::Approx(1.25).epsilon(1e-12));
    // frobenius/spectral form on a rank-1 matrix gives exactly 1
    Matrix r1(3, 2, {1.0, 2.0, 2.0, 4.0, 3.0, 6.0});
    CHECK(reg::stable_rank(r1) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("msr of diag(4,3,2,1) at r=2 is 3/7") {
    Matrix w = diag_matrix({4.0, 3.0, 2.0, 1.0}, 4, 4);
    CHECK(reg::msr_value(w, 2) == doctest::Approx(3.0 / 7.0).epsilon(1e-12));
    CHECK(reg::msr_value_from({4.0, 3.0, 2.0, 1.0}, 2) == doctest::Approx(3.0 / 7.0).epsilon(1e-15));
    CHECK(reg::msr_value_from({4.0, 3.0, 2.0, 1.0}, 4) == 0.0);
    CHECK(reg::msr_value_from({4.0, 3.0, 2.0, 1.0}, 1) ==
          doctest::Approx(6.0 / 4.0).epsilon(1e-15));
    CHECK_THROWS_AS(reg::msr_value(w, 0), bsr::InvalidInput);
    CHECK_THROWS_AS(reg::msr_value(w, 5), bsr::InvalidInput);
}

TEST_CASE("closed-form gradient on an axis-aligned diagonal") {
    // w = diag(4,3,2,1): U = V = I, trS_h = 7, trS_t = 3
    // grad = (e3 e3^T + e4 e4^T)/7 - (3/49)(e1 e1^T + e2 e2^T)
    Matrix w = diag_matrix({4.0, 3.0, 2.0, 1.0}, 4, 4);
    reg::MsrGradient g = reg::msr_gradient(w, 2);
    CHECK_FALSE(g.degenerate);
    for (int64_t i = 0; i < 4; ++i) {
        for (int64_t j = 0; j < 4; ++j) {
            double want = 0.0;
            if (i == j && i >= 2) want = 1.0 / 7.0;
            if (i == j && i < 2) want = -3.0 / 49.0;
            CHECK(g.grad(i, j) == doctest::Approx(want).scale(1.0).epsilon(1e-10));
        }
    }
}

TEST_CASE("gradient matches central finite differences") {
    const double h = 1e-6;
    for (uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
        for (auto shape : {std::pair<int64_t, int64_t>{5, 7}, {7, 5}, {6, 6}}) {
            Matrix w = gapped_matrix(shape.first, shape.second, seed * 100 + shape.second);
            int64_t r = 2 + (int64_t)(seed % 2);
            reg::MsrGradient g = reg::msr_gradient(w, r);
            REQUIRE_FALSE(g.degenerate);
            int64_t stride = std::max<int64_t>(1, w.size() / 11);
            for (int64_t i = 0; i < w.size(); i += stride) {
                double keep = w.data[(size_t)i];
                w.data[(size_t)i] = keep + h;
                double up = reg::msr_value(w, r);
                w.data[(size_t)i] = keep - h;
                double down = reg::msr_value(w, r);
                w.data[(size_t)i] = keep;
                double fd = (up - down) / (2.0 * h);
                CHECK(g.grad.data[(size_t)i] == doctest::Approx(fd).scale(1.0).epsilon(2e-5));
            }
        }
    }
}

TEST_CASE("exactly rank-r input yields the zero gradient") {
    // build an exactly rank-2 5x4 matrix from two outer products
    bsr::Rng rng(7);
    Matrix u(5, 2), v(4, 2);
    for (double & x : u.data) x = rng.normal();
    for (double & x : v.data) x = rng.normal();
    Matrix w(5, 4);
    bsr::kernels::gemm_nt(u, v, w);
    CHECK(reg::msr_value(w, 2) == 0.0);
    reg::MsrGradient g = reg::msr_gradient(w, 2);
    for (double x : g.grad.data) CHECK(x == 0.0);
    CHECK(g.grad.rows == 5);
    CHECK(g.grad.cols == 4);
}

TEST_CASE("degenerate split is flagged") {
    Matrix w = diag_matrix({3.0, 2.0, 2.0, 1.0}, 4, 4);
    reg::MsrGradient g = reg::msr_gradient(w, 2);
    CHECK(g.degenerate);
    reg::MsrGradient ok = reg::msr_gradient(w, 1);
    CHECK_FALSE(ok.degenerate);
}

TEST_CASE("value is scale invariant, gradient scales as 1/c") {
    Matrix w = gapped_matrix(6, 5, 21);
    Matrix w3 = w;
    for (double & x : w3.data) x *= 3.0;
    CHECK(reg::msr_value(w3, 2) == doctest::Approx(reg::msr_value(w, 2)).epsilon(1e-11));
    reg::MsrGradient g = reg::msr_gradient(w, 2);
    reg::MsrGradient g3 = reg::msr_gradient(w3, 2);
    for (int64_t i = 0; i < g.grad.size(); ++i) {
        CHECK(g3.grad.data[(size_t)i] ==
              doctest::Approx(g.grad.data[(size_t)i] / 3.0).scale(1.0).epsilon(1e-9));
    }
}

TEST_CASE("msr decreases as r grows") {
    Matrix w = gapped_matrix(8, 6, 33);
    double prev = reg::msr_value(w, 1);
    for (int64_t r = 2; r < 6; ++r) {
        double cur = reg::msr_value(w, r);
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("value is invariant under orthogonal transforms") {
    Matrix w = gapped_matrix(5, 5, 44);
    // orthogonal factor from the svd of an unrelated random matrix
    linalg::SvdFactors f = linalg::svd_full(gapped_matrix(5, 5, 45));
    Matrix rotated(5, 5);
    bsr::kernels::gemm_nn(f.u, w, rotated);
    CHECK(reg::msr_value(rotated, 2) == doctest::Approx(reg::msr_value(w, 2)).epsilon(1e-9));
}

TEST_CASE("a small gradient step lowers the penalty") {
    Matrix w = gapped_matrix(7, 6, 55);
    double before = reg::msr_value(w, 3);
    reg::MsrGradient g = reg::msr_gradient(w, 3);
    for (int64_t i = 0; i < w.size(); ++i) w.data[(size_t)i] -= 1e-3 * g.grad.data[(size_t)i];
    CHECK(reg::msr_value(w, 3) < before);
}

TEST_CASE("lambda schedule stair-steps by period") {
    reg::RegSchedule s;
    s.lambda0 = 0.02;
    s.growth = 1.5;
    s.period_epochs = 15;
    CHECK(reg::lambda_at(s, 0) == doctest::Approx(0.02).epsilon(1e-15));
    CHECK(reg::lambda_at(s, 14) == doctest::Approx(0.02).epsilon(1e-15));
    CHECK(reg::lambda_at(s, 15) == doctest::Approx(0.03).epsilon(1e-12));
    CHECK(reg::lambda_at(s, 29) == doctest::Approx(0.03).epsilon(1e-12));
    CHECK(reg::lambda_at(s, 30) == doctest::Approx(0.045).epsilon(1e-12));
    s.scheduled = false;
    CHECK(reg::lambda_at(s, 30) == doctest::Approx(0.02).epsilon(1e-15));
    CHECK_THROWS_AS(reg::lambda_at(s, -1), bsr::InvalidInput);
}

namespace {

bsr::dataio::Dataset tiny_blobs() {
    return bsr::dataio::split(bsr::dataio::synth_blobs(3, 24, 6, 17), {0.6, 0.2, 0.2}, 9);
}

nn::Model dense_net(uint64_t seed) { return nn::make_mlp({6, 8, 5, 3}, seed); }

} // namespace

TEST_CASE("lambda zero is bitwise identical to no penalty at all") {
    auto ds = tiny_blobs();
    nn::TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch = 8;
    cfg.seed = 12;
    nn::Model plain = dense_net(1);
    nn::train(plain, ds, cfg);
    nn::Model withhook = dense_net(1);
    reg::RegSchedule s;
    s.lambda0 = 0.0;
    s.targets = {4, 3, 3};
    reg::MsrPenalty hook(s);
    nn::train(withhook, ds, cfg, &hook);
    for (size_t l = 0; l < plain.layers.size(); ++l) {
        const auto & a = std::get<nn::DenseLayer>(plain.layers[l]);
        const auto & b = std::get<nn::DenseLayer>(withhook.layers[l]);
        CHECK(bsr::max_abs_diff(a.w, b.w) == 0.0);
        for (size_t i = 0; i < a.bias.size(); ++i) CHECK(a.bias[i] == b.bias[i]);
    }
}

TEST_CASE("stale factors persist between refresh ticks") {
    nn::Model m = dense_net(3);
    auto ds = tiny_blobs();
    reg::RegSchedule s;
    s.lambda0 = 1.0;
    s.svd_refresh_iters = 4;
    s.targets = {4, 3, 3};
    reg::MsrPenalty hook(s);

    auto zero_grads = [&]() {
        nn::Gradients g;
        Matrix x(1, 6);
        std::vector<int> y = {0};
        nn::loss_and_grad(m, x, y, g);
        for (auto & lg : g.layers) {
            for (double & v : lg.w.data) v = 0.0;
            for (double & v : lg.bias) v = 0.0;
        }
        return g;
    };

    nn::Gradients g0 = zero_grads();
    hook.apply(m, g0, 0, 0);
    // perturb the weights; iterations 1..3 are inside the same refresh window
    auto & w0 = std::get<nn::DenseLayer>(m.layers[0]).w;
    for (double & v : w0.data) v += 0.01;
    nn::Gradients g1 = zero_grads();
    hook.apply(m, g1, 1, 0);
    CHECK(bsr::max_abs_diff(g0.layers[0].w, g1.layers[0].w) == 0.0);
    // iteration 4 crosses the boundary and re-factorizes
    nn::Gradients g4 = zero_grads();
    hook.apply(m, g4, 4, 0);
    CHECK(bsr::max_abs_diff(g0.layers[0].w, g4.layers[0].w) != 0.0);
}

TEST_CASE("set_targets invalidates the cache") {
    nn::Model m = dense_net(3);
    reg::RegSchedule s;
    s.lambda0 = 1.0;
    s.svd_refresh_iters = 1000;
    s.targets = {4, 3, 3};
    reg::MsrPenalty hook(s);
    auto zero_grads = [&]() {
        nn::Gradients g;
        Matrix x(1, 6);
        std::vector<int> y = {0};
        nn::loss_and_grad(m, x, y, g);
        for (auto & lg : g.layers) {
            for (double & v : lg.w.data) v = 0.0;
            for (double & v : lg.bias) v = 0.0;
        }
        return g;
    };
    nn::Gradients g0 = zero_grads();
    hook.apply(m, g0, 0, 0);
    auto & w0 = std::get<nn::DenseLayer>(m.layers[0]).w;
    for (double & v : w0.data) v += 0.02;
    hook.set_targets({4, 3, 3});
    CHECK(hook.targets() == bsr::RankVector{4, 3, 3});
    nn::Gradients g1 = zero_grads();
    hook.apply(m, g1, 1, 0); // same window, but cache was dropped
    CHECK(bsr::max_abs_diff(g0.layers[0].w, g1.layers[0].w) != 0.0);
}

TEST_CASE("full-rank targets and factorized layers are skipped") {
    nn::Model m;
    nn::DenseLayer d;
    d.w = gapped_matrix(4, 6, 61);
    d.bias = std::vector<double>(4, 0.0);
    d.activation = nn::Activation::relu;
    m.layers.push_back(d);
    nn::FactorizedLayer f;
    f.a = gapped_matrix(2, 4, 62);
    f.b_mat = gapped_matrix(3, 2, 63);
    f.bias = std::vector<double>(3, 0.0);
    f.activation = nn::Activation::none;
    m.layers.push_back(f);
    m.classes = 3;
    reg::RegSchedule s;
    s.lambda0 = 1.0;
    s.targets = {4, 2}; // layer 0 at full rank min(4,6)=4; layer 1 factorized
    reg::MsrPenalty hook(s);
    nn::Gradients g;
    Matrix x(1, 6);
    std::vector<int> y = {0};
    nn::loss_and_grad(m, x, y, g);
    nn::Gradients before = g;
    double value = hook.apply(m, g, 0, 0);
    CHECK(value == 0.0);
    CHECK(bsr::max_abs_diff(before.layers[0].w, g.layers[0].w) == 0.0);
    CHECK(bsr::max_abs_diff(before.layers[1].a, g.layers[1].a) == 0.0);
    auto vals = hook.layer_values(m);
    REQUIRE(vals.size() == 2);
    CHECK(vals[0] == 0.0);
    CHECK(vals[1] == 0.0);
}

TEST_CASE("target vector must match the layer count and ranks must fit") {
    nn::Model m = dense_net(9); // three layers
    nn::Gradients g;
    Matrix x(1, 6);
    std::vector<int> y = {0};
    nn::loss_and_grad(m, x, y, g);
    reg::RegSchedule wrong_count;
    wrong_count.targets = {4, 3};
    reg::MsrPenalty short_hook(wrong_count);
    CHECK_THROWS_AS(short_hook.apply(m, g, 0, 0), bsr::InvalidInput);
    reg::RegSchedule too_big;
    too_big.targets = {99, 3, 3};
    reg::MsrPenalty big_hook(too_big);
    CHECK_THROWS_AS(big_hook.apply(m, g, 0, 0), bsr::InvalidInput);
    reg::RegSchedule bad_period;
    bad_period.period_epochs = 0;
    CHECK_THROWS_AS(reg::MsrPenalty{bad_period}, bsr::InvalidInput);
}
