#include <doctest.h>

#include <cmath>
#include <vector>

#include "bsr/compress.hpp"
#include "bsr/dataio.hpp"
#include "bsr/errors.hpp"
#include "bsr/linalg.hpp"
#include "bsr/matrix.hpp"
#include "bsr/nn.hpp"
#include "bsr/rng.hpp"

using bsr::Matrix;
namespace compress = bsr::compress;
namespace nn = bsr::nn;
using compress::FlopsMode;
using compress::LayerKind;
using compress::LayerShape;

namespace {

LayerShape fc(int64_t m, int64_t n, bool bias = true) {
    LayerShape s;
    s.kind = LayerKind::dense;
    s.m = m;
    s.n = n;
    s.has_bias = bias;
    return s;
}

LayerShape conv(int64_t m, int64_t n, int64_t spatial, bool bias = true) {
    LayerShape s;
    s.kind = LayerKind::conv;
    s.m = m;
    s.n = n;
    s.spatial_count = spatial;
    s.has_bias = bias;
    return s;
}

} // namespace

TEST_CASE("compression ratio on the square fixture is exactly 0.8") {
    std::vector<LayerShape> shapes = {fc(100, 100)};
    CHECK(compress::params_dense(shapes) == 10000);
    CHECK(compress::params_compressed(shapes, {10}) == 2000);
    CHECK(compress::compression_ratio(shapes, {10}) == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("layers that would not shrink count at dense size") {
    // the second layer sits exactly on the boundary m*n == r*(m+n) and must
    // stay dense, contributing its full parameter count
    std::vector<LayerShape> shapes = {fc(100, 100), fc(10, 10)};
    CHECK(compress::params_compressed(shapes, {10, 5}) == 2100);
    CHECK(compress::compression_ratio(shapes, {10, 5}) ==
          doctest::Approx(1.0 - 2100.0 / 10100.0).epsilon(1e-12));
}

TEST_CASE("full ranks compress nothing") {
    std::vector<LayerShape> shapes = {fc(12, 7), fc(5, 12)};
    bsr::RankVector full = compress::full_ranks(shapes);
    CHECK(full == bsr::RankVector{7, 5});
    CHECK(compress::compression_ratio(shapes, full) == 0.0);
    CHECK(compress::params_compressed(shapes, full) == compress::params_dense(shapes));
}

TEST_CASE("keeps_dense boundary cases") {
    CHECK(compress::keeps_dense(fc(6, 3), 2));        // 18 == 18
    CHECK_FALSE(compress::keeps_dense(fc(6, 3), 1));  // 18 > 9
    CHECK(compress::keeps_dense(fc(6, 3), 3));        // 18 < 27
    CHECK_FALSE(compress::keeps_dense(fc(100, 100), 49));
    CHECK(compress::keeps_dense(fc(100, 100), 50));
}

TEST_CASE("rank vector validation") {
    std::vector<LayerShape> shapes = {fc(4, 6)};
    CHECK_THROWS_AS(compress::compression_ratio(shapes, {0}), bsr::InvalidInput);
    CHECK_THROWS_AS(compress::compression_ratio(shapes, {5}), bsr::InvalidInput);
    CHECK_THROWS_AS(compress::compression_ratio(shapes, {2, 2}), bsr::InvalidInput);
    CHECK_THROWS_AS(compress::compression_ratio({}, {}), bsr::InvalidInput);
}

TEST_CASE("dense layer flops in both conventions") {
    CHECK(compress::flops_fc(fc(10, 20, true), FlopsMode::exact) == 200);
    CHECK(compress::flops_fc(fc(10, 20, true), FlopsMode::fused) == 200);
    CHECK(compress::flops_fc(fc(10, 20, false), FlopsMode::exact) == 190);
    CHECK(compress::flops_fc(fc(10, 20, false), FlopsMode::fused) == 200);
    CHECK_THROWS_AS(compress::flops_fc(conv(4, 9, 25)), bsr::InvalidInput);
}

TEST_CASE("conv layer flops count every output position") {
    // 16 maps of 3x3x3 kernels over a 10x10 output grid
    CHECK(compress::flops_conv(conv(16, 27, 100, true), FlopsMode::exact) == 41616);
    CHECK(compress::flops_conv(conv(16, 27, 100, false), FlopsMode::exact) == 41600);
    CHECK(compress::flops_conv(conv(16, 27, 100, true), FlopsMode::fused) == 43216);
    // a 1x1 output grid with bias matches the dense formula
    CHECK(compress::flops_conv(conv(16, 27, 1, true), FlopsMode::exact) ==
          compress::flops_fc(fc(16, 27, true), FlopsMode::exact));
    CHECK_THROWS_AS(compress::flops_conv(fc(4, 9)), bsr::InvalidInput);
}

TEST_CASE("factorized model flops use the two-stage cascade") {
    std::vector<LayerShape> shapes = {fc(100, 100)};
    CHECK(compress::model_flops(shapes, FlopsMode::exact) == 10000);
    // r-stage without bias: 10*99; m-stage with the original bias: 100*10
    CHECK(compress::model_flops(shapes, {10}, FlopsMode::exact) == 1990);
    CHECK(compress::model_flops(shapes, {10}, FlopsMode::fused) == 2000);
    // full rank leaves the count unchanged
    CHECK(compress::model_flops(shapes, {100}, FlopsMode::exact) == 10000);
    // a boundary layer stays dense and keeps its dense flops
    std::vector<LayerShape> two = {fc(100, 100), fc(10, 10)};
    CHECK(compress::model_flops(two, {10, 5}, FlopsMode::exact) == 1990 + 100);
}

TEST_CASE("model_shapes reads dense and cascade geometry") {
    nn::Model m = nn::make_mlp({7, 5, 3}, 2);
    auto shapes = compress::model_shapes(m);
    REQUIRE(shapes.size() == 2);
    CHECK(shapes[0].m == 5);
    CHECK(shapes[0].n == 7);
    CHECK(shapes[1].m == 3);
    CHECK(shapes[1].n == 5);
    CHECK(shapes[0].kind == LayerKind::dense);
    CHECK(shapes[0].has_bias);
}

TEST_CASE("factorize at full rank copies every layer bitwise") {
    nn::Model m = nn::make_mlp({9, 7, 4}, 11);
    nn::Model out = compress::factorize_model(m, {7, 4});
    REQUIRE(out.layers.size() == 2);
    for (size_t l = 0; l < 2; ++l) {
        const auto & a = std::get<nn::DenseLayer>(m.layers[l]);
        const auto & b = std::get<nn::DenseLayer>(out.layers[l]);
        CHECK(bsr::max_abs_diff(a.w, b.w) == 0.0);
    }
}

TEST_CASE("factorized cascade reproduces the truncated map") {
    bsr::Rng rng(31);
    nn::Model m;
    nn::DenseLayer d;
    d.w = Matrix(8, 12);
    for (double & v : d.w.data) v = rng.normal();
    d.bias.assign(8, 0.0);
    for (double & b : d.bias) b = rng.uniform(-0.1, 0.1);
    d.activation = nn::Activation::none;
    m.layers.push_back(d);
    m.classes = 8;

    nn::Model fz = compress::factorize_model(m, {3});
    const auto & fl = std::get<nn::FactorizedLayer>(fz.layers[0]);
    CHECK(fl.a.rows == 3);
    CHECK(fl.a.cols == 12);
    CHECK(fl.b_mat.rows == 8);
    CHECK(fl.b_mat.cols == 3);
    REQUIRE(fl.bias.size() == 8);
    CHECK(fl.bias[0] == d.bias[0]);

    // forward through the cascade equals forward through the rank-3
    // reconstruction of w
    bsr::linalg::SvdFactors tr = bsr::linalg::truncate(bsr::linalg::svd_full(d.w), 3);
    Matrix w3 = bsr::linalg::reconstruct(tr);
    nn::Model ref = m;
    std::get<nn::DenseLayer>(ref.layers[0]).w = w3;
    Matrix x(5, 12);
    for (double & v : x.data) v = rng.normal();
    Matrix ya = nn::forward(fz, x);
    Matrix yb = nn::forward(ref, x);
    CHECK(bsr::max_abs_diff(ya, yb) < 1e-9);

    // cascade factors carry the exact svd blocks: a = S V^T, b = U
    CHECK(bsr::max_abs_diff(fl.b_mat, tr.u) == 0.0);
    for (int64_t i = 0; i < 3; ++i) {
        for (int64_t j = 0; j < 12; ++j) {
            CHECK(fl.a(i, j) == doctest::Approx(tr.sigma[(size_t)i] * tr.v(j, i)).epsilon(1e-12));
        }
    }
}

TEST_CASE("non-shrinking layers stay dense through factorize_model") {
    nn::Model m = nn::make_mlp({6, 3, 3}, 5);
    // layer 0 is 3x6: r=2 -> 2*9=18 == 18 keeps dense; layer 1 is 3x3: r=1 ->
    // 6 < 9 shrinks
    nn::Model out = compress::factorize_model(m, {2, 1});
    CHECK(std::holds_alternative<nn::DenseLayer>(out.layers[0]));
    CHECK(std::holds_alternative<nn::FactorizedLayer>(out.layers[1]));
    CHECK_THROWS_AS(compress::factorize_model(out, {2, 1}), bsr::InvalidInput);
}

TEST_CASE("report json round trip and csv schema") {
    compress::CompressionReport rep;
    rep.c_d = 0.5;
    rep.tau = 0.02;
    rep.ratio = 0.4921875;
    rep.params_before = 10100;
    rep.params_after = 2100;
    rep.mflops_before = 0.0202;
    rep.mflops_after_exact = 0.00418;
    rep.mflops_after_fused = 0.0042;
    rep.accuracy_before = 0.97;
    rep.accuracy_after = 0.9625;
    rep.memory_mb_32 = 0.0084;
    rep.memory_mb_16 = 0.0042;
    rep.memory_mb_8 = 0.0021;
    rep.memory_mb_4 = 0.00105;
    compress::CompressionReport back = compress::report_from_json_text(compress::report_json(rep));
    CHECK(back.c_d == rep.c_d);
    CHECK(back.ratio == rep.ratio);
    CHECK(back.params_after == rep.params_after);
    CHECK(back.mflops_after_fused == rep.mflops_after_fused);
    CHECK(back.accuracy_after == rep.accuracy_after);
    CHECK(back.memory_mb_4 == rep.memory_mb_4);
    CHECK(compress::report_csv_header() ==
          "c_d,tau,ratio,params_before,params_after,mflops_before,mflops_after_exact,"
          "mflops_after_fused,acc_before,acc_after,mem32,mem16,mem8,mem4");
    CHECK(compress::report_csv_row(rep).substr(0, 16) == "0.5,0.02,0.49218");
    CHECK_THROWS_AS(compress::report_from_json_text("{ not json"), bsr::FormatError);
    CHECK_THROWS_AS(compress::report_from_json_text("{\"c_d\": 0.5}"), bsr::FormatError);
}

TEST_CASE("fill_report_arithmetic derives memory from the bit widths") {
    std::vector<LayerShape> shapes = {fc(100, 100), fc(10, 10)};
    compress::CompressionReport rep;
    compress::fill_report_arithmetic(rep, shapes, {10, 5});
    CHECK(rep.params_before == 10100);
    CHECK(rep.params_after == 2100);
    CHECK(rep.ratio == doctest::Approx(1.0 - 2100.0 / 10100.0).epsilon(1e-12));
    CHECK(rep.memory_mb_32 == doctest::Approx(2100.0 * 4.0 / 1e6).epsilon(1e-12));
    CHECK(rep.memory_mb_16 == doctest::Approx(2100.0 * 2.0 / 1e6).epsilon(1e-12));
    CHECK(rep.memory_mb_8 == doctest::Approx(2100.0 * 1.0 / 1e6).epsilon(1e-12));
    CHECK(rep.memory_mb_4 == doctest::Approx(2100.0 * 0.5 / 1e6).epsilon(1e-12));
}

TEST_CASE("finetuning a truncated model recovers accuracy") {
    auto full = bsr::dataio::synth_blobs(4, 60, 10, 3);
    auto ds = bsr::dataio::split(full, {0.6, 0.2, 0.2}, 7);
    nn::Model m = nn::make_mlp({10, 16, 4}, 21);
    nn::TrainConfig base;
    base.epochs = 12;
    base.batch = 16;
    base.seed = 5;
    nn::train(m, ds, base);
    double dense_acc = nn::evaluate_accuracy(m, ds, ds.val);
    nn::Model fz = compress::factorize_model(m, {2, 2});
    double truncated_acc = nn::evaluate_accuracy(fz, ds, ds.val);
    nn::TrainConfig ft;
    ft.epochs = 8;
    ft.batch = 16;
    ft.seed = 6;
    ft.eta0 = 0.02;
    compress::finetune(fz, ds, ft);
    double tuned_acc = nn::evaluate_accuracy(fz, ds, ds.val);
    CHECK(dense_acc > 0.8);
    CHECK(tuned_acc >= truncated_acc);

    // zero-epoch finetune is a no-op
    nn::Model fz2 = compress::factorize_model(m, {2, 2});
    nn::Model keep = fz2;
    nn::TrainConfig none;
    none.epochs = 0;
    auto log = compress::finetune(fz2, ds, none);
    CHECK(log.empty());
    CHECK(bsr::max_abs_diff(std::get<nn::FactorizedLayer>(fz2.layers[0]).a,
                            std::get<nn::FactorizedLayer>(keep.layers[0]).a) == 0.0);
}
