#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "bsr/dataio.hpp"
#include "bsr/errors.hpp"
#include "bsr/matrix.hpp"
#include "bsr/nn.hpp"
#include "bsr/rng.hpp"

using bsr::Matrix;
namespace nn = bsr::nn;
namespace dataio = bsr::dataio;

namespace {

Matrix random_matrix(int64_t rows, int64_t cols, uint64_t seed, double scale = 1.0) {
    bsr::Rng rng(seed);
    Matrix m(rows, cols);
    for (double & v : m.data) v = scale * rng.normal();
    return m;
}

// one dense relu layer into a factorized output layer, exercising both
// backward paths
nn::Model mixed_model(uint64_t seed) {
    nn::Model m;
    nn::DenseLayer l1;
    l1.w = random_matrix(5, 4, seed, 0.7);
    l1.bias = {0.1, -0.2, 0.05, 0.0, 0.3};
    l1.activation = nn::Activation::relu;
    nn::FactorizedLayer l2;
    l2.a = random_matrix(2, 5, seed + 1, 0.6);
    l2.b_mat = random_matrix(3, 2, seed + 2, 0.6);
    l2.bias = {0.01, -0.01, 0.02};
    l2.activation = nn::Activation::none;
    m.layers.push_back(l1);
    m.layers.push_back(l2);
    m.classes = 3;
    return m;
}

dataio::Dataset two_sample_dataset() {
    bsr::dataio::Dataset ds;
    ds.features = Matrix(2, 4, {0.2, -0.4, 0.9, 0.1, -0.7, 0.3, 0.2, -0.5});
    ds.labels = {1, 0};
    ds.classes = 3;
    ds.train = {0};
    ds.val = {1};
    ds.test = {1};
    return ds;
}

} // namespace

TEST_CASE("make_mlp shapes, init bounds and determinism") {
    nn::Model m = nn::make_mlp({8, 6, 4}, 3);
    REQUIRE(m.layers.size() == 2);
    CHECK(m.classes == 4);
    const auto & l1 = std::get<nn::DenseLayer>(m.layers[0]);
    const auto & l2 = std::get<nn::DenseLayer>(m.layers[1]);
    CHECK(l1.w.rows == 6);
    CHECK(l1.w.cols == 8);
    CHECK(l2.w.rows == 4);
    CHECK(l2.w.cols == 6);
    CHECK(l1.activation == nn::Activation::relu);
    CHECK(l2.activation == nn::Activation::none);
    double lim1 = std::sqrt(6.0 / 8.0), lim2 = std::sqrt(6.0 / 6.0);
    for (double v : l1.w.data) CHECK(std::abs(v) <= lim1);
    for (double v : l2.w.data) CHECK(std::abs(v) <= lim2);
    for (double b : l1.bias) CHECK(b == 0.0);
    nn::Model m2 = nn::make_mlp({8, 6, 4}, 3);
    CHECK(bsr::max_abs_diff(l1.w, std::get<nn::DenseLayer>(m2.layers[0]).w) == 0.0);
    nn::Model m3 = nn::make_mlp({8, 6, 4}, 4);
    CHECK(bsr::max_abs_diff(l1.w, std::get<nn::DenseLayer>(m3.layers[0]).w) != 0.0);
    CHECK_THROWS_AS(nn::make_mlp({8}, 1), bsr::InvalidInput);
}

TEST_CASE("forward through an identity layer is exact") {
    nn::Model m;
    nn::DenseLayer l;
    l.w = Matrix::identity(3);
    l.bias = {0.0, 0.0, 0.0};
    l.activation = nn::Activation::none;
    m.layers.push_back(l);
    m.classes = 3;
    Matrix x(2, 3, {0.5, -1.5, 2.0, 0.0, 3.25, -0.125});
    Matrix y = nn::forward(m, x);
    CHECK(bsr::max_abs_diff(x, y) == 0.0);
}

TEST_CASE("relu zeroes negative preactivations") {
    nn::Model m;
    nn::DenseLayer l;
    l.w = Matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
    l.bias = {0.0, 0.0};
    l.activation = nn::Activation::relu;
    m.layers.push_back(l);
    nn::DenseLayer out;
    out.w = Matrix::identity(2);
    out.bias = {0.0, 0.0};
    out.activation = nn::Activation::none;
    m.layers.push_back(out);
    m.classes = 2;
    Matrix x(1, 2, {1.5, -2.0});
    Matrix y = nn::forward(m, x);
    CHECK(y(0, 0) == 1.5);
    CHECK(y(0, 1) == 0.0);
}

TEST_CASE("zero model loss is ln(classes)") {
    nn::Model m;
    nn::DenseLayer l;
    l.w = Matrix(10, 4);
    l.bias = std::vector<double>(10, 0.0);
    l.activation = nn::Activation::none;
    m.layers.push_back(l);
    m.classes = 10;
    Matrix x(3, 4, std::vector<double>(12, 0.25));
    nn::Gradients g;
    double loss = nn::loss_and_grad(m, x, {0, 5, 9}, g);
    CHECK(loss == doctest::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("analytic gradients match finite differences") {
    nn::Model m = mixed_model(17);
    Matrix x = random_matrix(6, 4, 99, 0.8);
    std::vector<int> y = {0, 1, 2, 1, 0, 2};
    nn::Gradients g;
    nn::loss_and_grad(m, x, y, g);
    const double h = 1e-6;
    auto loss_at = [&](nn::Model & model) {
        nn::Gradients scratch;
        return nn::loss_and_grad(model, x, y, scratch);
    };
    auto check_tensor = [&](Matrix & theta, const Matrix & grad) {
        REQUIRE(grad.rows == theta.rows);
        REQUIRE(grad.cols == theta.cols);
        for (int64_t i = 0; i < theta.size(); i += std::max<int64_t>(1, theta.size() / 7)) {
            double keep = theta.data[(size_t)i];
            theta.data[(size_t)i] = keep + h;
            double up = loss_at(m);
            theta.data[(size_t)i] = keep - h;
            double down = loss_at(m);
            theta.data[(size_t)i] = keep;
            double fd = (up - down) / (2.0 * h);
            CHECK(grad.data[(size_t)i] ==
                  doctest::Approx(fd).epsilon(1e-4).scale(std::max(1.0, std::abs(fd))));
        }
    };
    check_tensor(std::get<nn::DenseLayer>(m.layers[0]).w, g.layers[0].w);
    check_tensor(std::get<nn::FactorizedLayer>(m.layers[1]).a, g.layers[1].a);
    check_tensor(std::get<nn::FactorizedLayer>(m.layers[1]).b_mat, g.layers[1].b_mat);
    auto & bias = std::get<nn::DenseLayer>(m.layers[0]).bias;
    for (size_t i = 0; i < bias.size(); ++i) {
        double keep = bias[i];
        bias[i] = keep + h;
        double up = loss_at(m);
        bias[i] = keep - h;
        double down = loss_at(m);
        bias[i] = keep;
        double fd = (up - down) / (2.0 * h);
        CHECK(g.layers[0].bias[i] == doctest::Approx(fd).epsilon(1e-4).scale(1.0));
    }
}

TEST_CASE("cosine_lr endpoints and midpoint") {
    CHECK(nn::cosine_lr(0.1, 0, 10) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(nn::cosine_lr(0.1, 10, 10) == doctest::Approx(0.0).scale(1.0).epsilon(1e-15));
    CHECK(nn::cosine_lr(0.1, 5, 10) == doctest::Approx(0.05).epsilon(1e-12));
    CHECK_THROWS_AS(nn::cosine_lr(0.1, -1, 10), bsr::InvalidInput);
    CHECK_THROWS_AS(nn::cosine_lr(0.1, 11, 10), bsr::InvalidInput);
}

TEST_CASE("zero momentum reduces to plain sgd") {
    dataio::Dataset ds = two_sample_dataset();
    nn::Model trained = mixed_model(23);
    nn::TrainConfig cfg;
    cfg.eta0 = 0.1;
    cfg.momentum = 0.0;
    cfg.batch = 1;
    cfg.epochs = 2;
    cfg.seed = 9;
    nn::train(trained, ds, cfg);

    nn::Model hand = mixed_model(23);
    Matrix x0(1, 4);
    for (int64_t j = 0; j < 4; ++j) x0(0, j) = ds.features(0, j);
    for (int epoch = 0; epoch < 2; ++epoch) {
        double lr = nn::cosine_lr(0.1, epoch, 2);
        nn::Gradients g;
        nn::loss_and_grad(hand, x0, {ds.labels[0]}, g);
        auto & l1 = std::get<nn::DenseLayer>(hand.layers[0]);
        for (size_t i = 0; i < l1.w.data.size(); ++i) l1.w.data[i] += -lr * g.layers[0].w.data[i];
        for (size_t i = 0; i < l1.bias.size(); ++i) l1.bias[i] += -lr * g.layers[0].bias[i];
        auto & l2 = std::get<nn::FactorizedLayer>(hand.layers[1]);
        for (size_t i = 0; i < l2.a.data.size(); ++i) l2.a.data[i] += -lr * g.layers[1].a.data[i];
        for (size_t i = 0; i < l2.b_mat.data.size(); ++i)
            l2.b_mat.data[i] += -lr * g.layers[1].b_mat.data[i];
        for (size_t i = 0; i < l2.bias.size(); ++i) l2.bias[i] += -lr * g.layers[1].bias[i];
    }
    CHECK(bsr::max_abs_diff(std::get<nn::DenseLayer>(trained.layers[0]).w,
                            std::get<nn::DenseLayer>(hand.layers[0]).w) == 0.0);
    CHECK(bsr::max_abs_diff(std::get<nn::FactorizedLayer>(trained.layers[1]).a,
                            std::get<nn::FactorizedLayer>(hand.layers[1]).a) == 0.0);
    CHECK(bsr::max_abs_diff(std::get<nn::FactorizedLayer>(trained.layers[1]).b_mat,
                            std::get<nn::FactorizedLayer>(hand.layers[1]).b_mat) == 0.0);
}

TEST_CASE("nesterov lookahead update matches the hand formula") {
    dataio::Dataset ds = two_sample_dataset();
    nn::Model trained = mixed_model(31);
    nn::TrainConfig cfg;
    cfg.eta0 = 0.05;
    cfg.momentum = 0.9;
    cfg.batch = 1;
    cfg.epochs = 2;
    cfg.seed = 4;
    cfg.cosine = false;
    nn::train(trained, ds, cfg);

    nn::Model hand = mixed_model(31);
    Matrix x0(1, 4);
    for (int64_t j = 0; j < 4; ++j) x0(0, j) = ds.features(0, j);
    Matrix vel(5, 4); // velocity for layer-0 weights only (checked below)
    for (int step = 0; step < 2; ++step) {
        nn::Gradients g;
        nn::loss_and_grad(hand, x0, {ds.labels[0]}, g);
        auto & w = std::get<nn::DenseLayer>(hand.layers[0]).w;
        for (size_t i = 0; i < w.data.size(); ++i) {
            double gi = g.layers[0].w.data[i];
            double v_new = 0.9 * vel.data[i] - 0.05 * gi;
            vel.data[i] = v_new;
            w.data[i] += 0.9 * v_new - 0.05 * gi;
        }
        // remaining tensors must also advance for the next gradient; reuse
        // the same rule
        auto advance = [&](std::vector<double> & theta, const std::vector<double> & grad,
                           std::vector<double> & v) {
            for (size_t i = 0; i < theta.size(); ++i) {
                double v_new = 0.9 * v[i] - 0.05 * grad[i];
                v[i] = v_new;
                theta[i] += 0.9 * v_new - 0.05 * grad[i];
            }
        };
        static std::vector<double> vb1(5, 0.0), va(10, 0.0), vb(6, 0.0), vb2(3, 0.0);
        if (step == 0) {
            vb1.assign(5, 0.0);
            va.assign(10, 0.0);
            vb.assign(6, 0.0);
            vb2.assign(3, 0.0);
        }
        advance(std::get<nn::DenseLayer>(hand.layers[0]).bias, g.layers[0].bias, vb1);
        advance(std::get<nn::FactorizedLayer>(hand.layers[1]).a.data, g.layers[1].a.data, va);
        advance(std::get<nn::FactorizedLayer>(hand.layers[1]).b_mat.data, g.layers[1].b_mat.data,
                vb);
        advance(std::get<nn::FactorizedLayer>(hand.layers[1]).bias, g.layers[1].bias, vb2);
    }
    CHECK(bsr::max_abs_diff(std::get<nn::DenseLayer>(trained.layers[0]).w,
                            std::get<nn::DenseLayer>(hand.layers[0]).w) == 0.0);
    CHECK(bsr::max_abs_diff(std::get<nn::FactorizedLayer>(trained.layers[1]).b_mat,
                            std::get<nn::FactorizedLayer>(hand.layers[1]).b_mat) == 0.0);
}

TEST_CASE("zero epochs leaves the model bitwise untouched") {
    dataio::Dataset ds = two_sample_dataset();
    nn::Model m = mixed_model(5);
    nn::Model copy = m;
    nn::TrainConfig cfg;
    cfg.epochs = 0;
    cfg.seed = 1;
    auto log = nn::train(m, ds, cfg);
    CHECK(log.empty());
    CHECK(bsr::max_abs_diff(std::get<nn::DenseLayer>(m.layers[0]).w,
                            std::get<nn::DenseLayer>(copy.layers[0]).w) == 0.0);
}

TEST_CASE("training is deterministic per seed") {
    dataio::Dataset ds = dataio::split(dataio::synth_blobs(4, 30, 6, 2), {0.6, 0.2, 0.2}, 5);
    nn::TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch = 16;
    cfg.seed = 77;
    nn::Model a = nn::make_mlp({6, 10, 4}, 1);
    nn::Model b = nn::make_mlp({6, 10, 4}, 1);
    auto la = nn::train(a, ds, cfg);
    auto lb = nn::train(b, ds, cfg);
    CHECK(bsr::max_abs_diff(std::get<nn::DenseLayer>(a.layers[0]).w,
                            std::get<nn::DenseLayer>(b.layers[0]).w) == 0.0);
    REQUIRE(la.size() == 3);
    CHECK(la[2].train_loss == lb[2].train_loss);
    CHECK(la[2].val_acc == lb[2].val_acc);
    CHECK(la[0].train_loss > la[2].train_loss); // it actually learns
    nn::TrainConfig other = cfg;
    other.seed = 78;
    nn::Model c = nn::make_mlp({6, 10, 4}, 1);
    nn::train(c, ds, other);
    CHECK(bsr::max_abs_diff(std::get<nn::DenseLayer>(a.layers[0]).w,
                            std::get<nn::DenseLayer>(c.layers[0]).w) != 0.0);
}

TEST_CASE("diverging loss raises TrainingError with location") {
    dataio::Dataset ds = dataio::split(dataio::synth_blobs(3, 20, 5, 3), {0.6, 0.2, 0.2}, 9);
    nn::Model m = nn::make_mlp({5, 8, 3}, 2);
    nn::TrainConfig cfg;
    cfg.eta0 = 1e308; // guarantees overflow within the first epoch
    cfg.epochs = 5;
    cfg.batch = 8;
    cfg.seed = 3;
    try {
        nn::train(m, ds, cfg);
        FAIL("expected TrainingError");
    } catch (const bsr::TrainingError & e) {
        CHECK(e.epoch >= 0);
        CHECK(e.batch >= 0);
    }
}

TEST_CASE("penalty hook gradient lands in the update") {
    struct ConstHook final : nn::PenaltyHook {
        double apply(const nn::Model & model, nn::Gradients & g, int64_t, int) override {
            (void)model;
            for (double & v : g.layers[0].w.data) v += 0.5;
            return 1.25;
        }
        double lambda_value(int) const override { return 0.5; }
        std::vector<double> layer_values(const nn::Model &) const override { return {1.0, 2.0}; }
    };
    dataio::Dataset ds = two_sample_dataset();
    nn::TrainConfig cfg;
    cfg.eta0 = 0.1;
    cfg.momentum = 0.0;
    cfg.batch = 1;
    cfg.epochs = 1;
    cfg.seed = 2;
    cfg.cosine = false;
    nn::Model plain = mixed_model(41);
    nn::train(plain, ds, cfg);
    nn::Model hooked = mixed_model(41);
    ConstHook hook;
    auto log = nn::train(hooked, ds, cfg, &hook);
    const auto & wp = std::get<nn::DenseLayer>(plain.layers[0]).w;
    const auto & wh = std::get<nn::DenseLayer>(hooked.layers[0]).w;
    for (size_t i = 0; i < wp.data.size(); ++i)
        CHECK(wh.data[i] == doctest::Approx(wp.data[i] - 0.1 * 0.5).epsilon(1e-12));
    REQUIRE(log.size() == 1);
    CHECK(log[0].lambda == 0.5);
    REQUIRE(log[0].layer_penalties.size() == 2);
}

TEST_CASE("epoch callback fires before every epoch") {
    dataio::Dataset ds = two_sample_dataset();
    nn::Model m = mixed_model(43);
    nn::TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch = 1;
    cfg.seed = 6;
    std::vector<int> seen;
    nn::train(m, ds, cfg, nullptr, [&](int epoch, const nn::Model & model) {
        REQUIRE(model.layers.size() == 2);
        seen.push_back(epoch);
    });
    CHECK(seen == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("evaluate_accuracy breaks ties toward the lower class index") {
    nn::Model m;
    nn::DenseLayer l;
    l.w = Matrix::identity(3);
    l.bias = {0.0, 0.0, 0.0};
    l.activation = nn::Activation::none;
    m.layers.push_back(l);
    m.classes = 3;
    Matrix x(1, 3, {0.7, 0.7, 0.1});
    CHECK(nn::evaluate_accuracy(m, x, {0}) == 1.0);
    CHECK(nn::evaluate_accuracy(m, x, {1}) == 0.0);
}

TEST_CASE("train log csv schema with and without penalties") {
    std::vector<nn::EpochLog> log(2);
    log[0] = {0, 0.5, 0.0, 2.0, 0.25, {}};
    log[1] = {1, 0.25, 0.0, 1.0, 0.5, {}};
    std::string path = "/tmp/bsr_test_log.csv";
    nn::write_train_log_csv(log, path);
    std::ifstream in(path);
    std::stringstream buf;
    buf << in.rdbuf();
    CHECK(buf.str() == "epoch,lr,lambda,train_loss,val_acc\n0,0.5,0,2,0.25\n1,0.25,0,1,0.5\n");
    log[1].layer_penalties = {0.5, 0.125};
    log[0].lambda = 0.5;
    nn::write_train_log_csv(log, path);
    std::ifstream in2(path);
    std::stringstream buf2;
    buf2 << in2.rdbuf();
    CHECK(buf2.str() ==
          "epoch,lr,lambda,train_loss,val_acc,msr\n0,0.5,0.5,2,0.25,\n1,0.25,0,1,0.5,0.5;0.125\n");
    std::remove(path.c_str());
}
