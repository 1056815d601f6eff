#include "bsr/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "bsr/errors.hpp"
#include "bsr/kernels.hpp"
#include "bsr/rng.hpp"

namespace bsr::nn {

namespace {

void add_bias_rows(Matrix & z, const std::vector<double> & bias) {
    for (int64_t i = 0; i < z.rows; ++i) {
        double * zi = z.row(i);
        for (int64_t j = 0; j < z.cols; ++j) {
            zi[j] += bias[static_cast<size_t>(j)];
        }
    }
}

void apply_activation(Matrix & z, Activation act) {
    if (act != Activation::relu) return;
    for (double & v : z.data) {
        if (v < 0.0) v = 0.0;
    }
}

struct LayerCache {
    Matrix input;  // batch × n
    Matrix hidden; // batch × r, factorized only
    Matrix pre;    // batch × m, pre-activation
};

Matrix layer_forward(const Layer & layer, const Matrix & x, LayerCache * cache) {
    Matrix z;
    if (const auto * d = std::get_if<DenseLayer>(&layer)) {
        z = Matrix(x.rows, d->w.rows);
        kernels::gemm_nt(x, d->w, z);
        add_bias_rows(z, d->bias);
    } else {
        const auto & f = std::get<FactorizedLayer>(layer);
        Matrix h(x.rows, f.a.rows);
        kernels::gemm_nt(x, f.a, h);
        z = Matrix(x.rows, f.b_mat.rows);
        kernels::gemm_nt(h, f.b_mat, z);
        add_bias_rows(z, f.bias);
        if (cache != nullptr) cache->hidden = std::move(h);
    }
    if (cache != nullptr) {
        cache->input = x;
        cache->pre = z;
    }
    apply_activation(z, layer_activation(layer));
    return z;
}

// dZ = dA masked by relu'(pre); dA is consumed in place.
void activation_backward(Matrix & da, const Matrix & pre, Activation act) {
    if (act != Activation::relu) return;
    for (size_t i = 0; i < da.data.size(); ++i) {
        if (pre.data[i] <= 0.0) da.data[i] = 0.0;
    }
}

std::vector<double> column_sums(const Matrix & m) {
    std::vector<double> s(static_cast<size_t>(m.cols), 0.0);
    for (int64_t i = 0; i < m.rows; ++i) {
        const double * mi = m.row(i);
        for (int64_t j = 0; j < m.cols; ++j) {
            s[static_cast<size_t>(j)] += mi[j];
        }
    }
    return s;
}

} // namespace

int64_t layer_in_dim(const Layer & l) {
    if (const auto * d = std::get_if<DenseLayer>(&l)) return d->w.cols;
    return std::get<FactorizedLayer>(l).a.cols;
}

int64_t layer_out_dim(const Layer & l) {
    if (const auto * d = std::get_if<DenseLayer>(&l)) return d->w.rows;
    return std::get<FactorizedLayer>(l).b_mat.rows;
}

Activation layer_activation(const Layer & l) {
    if (const auto * d = std::get_if<DenseLayer>(&l)) return d->activation;
    return std::get<FactorizedLayer>(l).activation;
}

void validate(const Model & m) {
    if (m.layers.empty()) {
        throw InvalidInput("model: no layers");
    }
    if (m.classes < 2) {
        throw InvalidInput("model: class count must be >= 2");
    }
    for (size_t i = 0; i < m.layers.size(); ++i) {
        const Layer & l = m.layers[i];
        const std::string tag = "layer " + std::to_string(i);
        if (const auto * d = std::get_if<DenseLayer>(&l)) {
            bsr::validate(d->w, tag.c_str());
            if (static_cast<int64_t>(d->bias.size()) != d->w.rows) {
                throw InvalidInput(tag + ": bias length != output dim");
            }
            for (double b : d->bias) {
                if (!std::isfinite(b)) throw InvalidInput(tag + ": non-finite bias");
            }
        } else {
            const auto & f = std::get<FactorizedLayer>(l);
            bsr::validate(f.a, tag.c_str());
            bsr::validate(f.b_mat, tag.c_str());
            if (f.a.rows != f.b_mat.cols) {
                throw InvalidInput(tag + ": cascade inner dimensions differ");
            }
            if (f.a.rows > std::min(f.b_mat.rows, f.a.cols)) {
                throw InvalidInput(tag + ": rank exceeds min(m, n)");
            }
            if (static_cast<int64_t>(f.bias.size()) != f.b_mat.rows) {
                throw InvalidInput(tag + ": bias length != output dim");
            }
            for (double b : f.bias) {
                if (!std::isfinite(b)) throw InvalidInput(tag + ": non-finite bias");
            }
        }
        if (i + 1 < m.layers.size() &&
            layer_out_dim(l) != layer_in_dim(m.layers[i + 1])) {
            throw InvalidInput(tag + ": width does not chain into next layer");
        }
    }
    if (layer_out_dim(m.layers.back()) != m.classes) {
        throw InvalidInput("model: final layer width != class count");
    }
}

Model make_mlp(const std::vector<int64_t> & dims, uint64_t seed) {
    if (dims.size() < 2) {
        throw InvalidInput("make_mlp: need at least input and output dims");
    }
    Model m;
    m.classes = static_cast<int>(dims.back());
    Rng rng(seed);
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
        DenseLayer layer;
        layer.w = Matrix(dims[l + 1], dims[l]);
        const double limit = std::sqrt(6.0 / static_cast<double>(dims[l]));
        for (double & v : layer.w.data) v = rng.uniform(-limit, limit);
        layer.bias.assign(static_cast<size_t>(dims[l + 1]), 0.0);
        layer.activation = (l + 2 < dims.size()) ? Activation::relu : Activation::none;
        m.layers.emplace_back(std::move(layer));
    }
    validate(m);
    return m;
}

Matrix forward(const Model & model, const Matrix & x) {
    if (x.cols != layer_in_dim(model.layers.front())) {
        throw InvalidInput("forward: input width does not match first layer");
    }
    Matrix act = x;
    for (const Layer & l : model.layers) {
        act = layer_forward(l, act, nullptr);
    }
    return act;
}

double loss_and_grad(const Model & model, const Matrix & x, const std::vector<int> & y,
                     Gradients & g) {
    if (x.rows != static_cast<int64_t>(y.size())) {
        throw InvalidInput("loss_and_grad: batch size mismatch");
    }
    for (const int label : y) {
        if (label < 0 || label >= model.classes) {
            throw InvalidInput("loss_and_grad: label out of range");
        }
    }

    const size_t L = model.layers.size();
    std::vector<LayerCache> caches(L);
    Matrix act = x;
    for (size_t l = 0; l < L; ++l) {
        act = layer_forward(model.layers[l], act, &caches[l]);
    }

    // Mean cross-entropy with log-sum-exp stabilization; delta becomes
    // (softmax - onehot) / batch.
    const int64_t batch = x.rows;
    Matrix delta(batch, act.cols);
    double loss = 0.0;
    for (int64_t i = 0; i < batch; ++i) {
        const double * zi = act.row(i);
        double zmax = zi[0];
        for (int64_t j = 1; j < act.cols; ++j) zmax = std::max(zmax, zi[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < act.cols; ++j) sum += std::exp(zi[j] - zmax);
        const double lse = zmax + std::log(sum);
        loss += lse - zi[y[static_cast<size_t>(i)]];
        double * di = delta.row(i);
        for (int64_t j = 0; j < act.cols; ++j) {
            di[j] = std::exp(zi[j] - lse) / static_cast<double>(batch);
        }
        di[y[static_cast<size_t>(i)]] -= 1.0 / static_cast<double>(batch);
    }
    loss /= static_cast<double>(batch);

    g.layers.assign(L, LayerGrads{});
    Matrix da = std::move(delta);
    for (size_t l = L; l-- > 0;) {
        const Layer & layer = model.layers[l];
        const LayerCache & cache = caches[l];
        LayerGrads & lg = g.layers[l];
        activation_backward(da, cache.pre, layer_activation(layer));
        lg.bias = column_sums(da);
        if (const auto * d = std::get_if<DenseLayer>(&layer)) {
            lg.w = Matrix(d->w.rows, d->w.cols);
            kernels::gemm_tn(da, cache.input, lg.w);
            if (l > 0) {
                Matrix dx(da.rows, d->w.cols);
                kernels::gemm_nn(da, d->w, dx);
                da = std::move(dx);
            }
        } else {
            const auto & f = std::get<FactorizedLayer>(layer);
            lg.b_mat = Matrix(f.b_mat.rows, f.b_mat.cols);
            kernels::gemm_tn(da, cache.hidden, lg.b_mat);
            Matrix dh(da.rows, f.b_mat.cols);
            kernels::gemm_nn(da, f.b_mat, dh);
            lg.a = Matrix(f.a.rows, f.a.cols);
            kernels::gemm_tn(dh, cache.input, lg.a);
            if (l > 0) {
                Matrix dx(dh.rows, f.a.cols);
                kernels::gemm_nn(dh, f.a, dx);
                da = std::move(dx);
            }
        }
    }
    return loss;
}

double cosine_lr(double eta0, int64_t t, int64_t T) {
    if (T < 1 || t < 0 || t > T) {
        throw InvalidInput("cosine_lr: need 0 <= t <= T, T >= 1");
    }
    return eta0 * (1.0 + std::cos(M_PI * static_cast<double>(t) / static_cast<double>(T))) / 2.0;
}

namespace {

// One velocity buffer per parameter tensor, shaped like the gradients.
struct Velocity {
    std::vector<LayerGrads> layers;
};

Velocity make_velocity(const Model & m) {
    Velocity v;
    v.layers.resize(m.layers.size());
    for (size_t l = 0; l < m.layers.size(); ++l) {
        if (const auto * d = std::get_if<DenseLayer>(&m.layers[l])) {
            v.layers[l].w = Matrix(d->w.rows, d->w.cols);
            v.layers[l].bias.assign(d->bias.size(), 0.0);
        } else {
            const auto & f = std::get<FactorizedLayer>(m.layers[l]);
            v.layers[l].a = Matrix(f.a.rows, f.a.cols);
            v.layers[l].b_mat = Matrix(f.b_mat.rows, f.b_mat.cols);
            v.layers[l].bias.assign(f.bias.size(), 0.0);
        }
    }
    return v;
}

// v <- mu v - eta g; theta <- theta + mu v - eta g (lookahead form).
void nesterov_tensor(std::vector<double> & theta, std::vector<double> & vel,
                     const std::vector<double> & grad, double mu, double eta) {
    for (size_t i = 0; i < theta.size(); ++i) {
        const double step = mu * vel[i] - eta * grad[i];
        vel[i] = step;
        theta[i] += mu * step - eta * grad[i];
    }
}

void nesterov_update(Model & m, Velocity & vel, const Gradients & g, double mu, double eta) {
    for (size_t l = 0; l < m.layers.size(); ++l) {
        LayerGrads & v = vel.layers[l];
        const LayerGrads & lg = g.layers[l];
        if (auto * d = std::get_if<DenseLayer>(&m.layers[l])) {
            nesterov_tensor(d->w.data, v.w.data, lg.w.data, mu, eta);
            nesterov_tensor(d->bias, v.bias, lg.bias, mu, eta);
        } else {
            auto & f = std::get<FactorizedLayer>(m.layers[l]);
            nesterov_tensor(f.a.data, v.a.data, lg.a.data, mu, eta);
            nesterov_tensor(f.b_mat.data, v.b_mat.data, lg.b_mat.data, mu, eta);
            nesterov_tensor(f.bias, v.bias, lg.bias, mu, eta);
        }
    }
}

} // namespace

std::vector<EpochLog> train(Model & model, const dataio::Dataset & ds, const TrainConfig & cfg,
                            PenaltyHook * penalty,
                            const std::function<void(int, const Model &)> & on_epoch_start) {
    validate(model);
    if (cfg.eta0 <= 0.0) {
        throw InvalidInput("train: eta0 must be positive");
    }
    if (cfg.batch < 1) {
        throw InvalidInput("train: batch must be >= 1");
    }
    if (cfg.epochs < 0) {
        throw InvalidInput("train: epochs must be >= 0");
    }
    if (ds.train.empty() || ds.val.empty()) {
        throw InvalidInput("train: dataset has no train/val split");
    }

    std::vector<EpochLog> log;
    if (cfg.epochs == 0) return log;

    Velocity vel = make_velocity(model);
    Gradients grads;
    Rng shuffle_rng(splitmix64(cfg.seed));
    std::vector<int64_t> order = ds.train;
    Matrix bx;
    std::vector<int> by;
    int64_t iteration = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (on_epoch_start) {
            on_epoch_start(epoch, model);
        }
        const double lr = cfg.cosine ? cosine_lr(cfg.eta0, epoch, cfg.epochs) : cfg.eta0;
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        int64_t seen = 0;
        const int64_t n = static_cast<int64_t>(order.size());
        for (int64_t start = 0; start < n; start += cfg.batch) {
            const int64_t bsize = std::min(cfg.batch, n - start);
            bx = Matrix(bsize, ds.dim());
            by.resize(static_cast<size_t>(bsize));
            for (int64_t i = 0; i < bsize; ++i) {
                const int64_t src = order[static_cast<size_t>(start + i)];
                std::memcpy(bx.row(i), ds.features.row(src),
                            static_cast<size_t>(ds.dim()) * sizeof(double));
                by[static_cast<size_t>(i)] = ds.labels[static_cast<size_t>(src)];
            }
            double loss = loss_and_grad(model, bx, by, grads);
            if (penalty != nullptr) {
                loss += penalty->apply(model, grads, iteration, epoch);
            }
            if (!std::isfinite(loss)) {
                throw TrainingError("non-finite loss", epoch,
                                    static_cast<int>(start / cfg.batch));
            }
            nesterov_update(model, vel, grads, cfg.momentum, lr);
            loss_sum += loss * static_cast<double>(bsize);
            seen += bsize;
            ++iteration;
        }
        EpochLog entry;
        entry.epoch = epoch;
        entry.lr = lr;
        entry.lambda = (penalty != nullptr) ? penalty->lambda_value(epoch) : 0.0;
        entry.train_loss = loss_sum / static_cast<double>(seen);
        entry.val_acc = evaluate_accuracy(model, ds, ds.val);
        if (penalty != nullptr) {
            entry.layer_penalties = penalty->layer_values(model);
        }
        log.push_back(std::move(entry));
    }
    return log;
}

double evaluate_accuracy(const Model & model, const Matrix & x, const std::vector<int> & y) {
    if (x.rows == 0) {
        throw InvalidInput("evaluate_accuracy: empty input");
    }
    if (x.rows != static_cast<int64_t>(y.size())) {
        throw InvalidInput("evaluate_accuracy: feature/label count mismatch");
    }
    constexpr int64_t kChunk = 512;
    int64_t correct = 0;
    for (int64_t start = 0; start < x.rows; start += kChunk) {
        const int64_t bsize = std::min(kChunk, x.rows - start);
        Matrix chunk(bsize, x.cols);
        std::memcpy(chunk.data.data(), x.row(start),
                    static_cast<size_t>(bsize * x.cols) * sizeof(double));
        const Matrix logits = forward(model, chunk);
        for (int64_t i = 0; i < bsize; ++i) {
            const double * zi = logits.row(i);
            int64_t best = 0;
            for (int64_t j = 1; j < logits.cols; ++j) {
                if (zi[j] > zi[best]) best = j; // ties keep the lowest index
            }
            if (best == y[static_cast<size_t>(start + i)]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(x.rows);
}

double evaluate_accuracy(const Model & model, const dataio::Dataset & ds,
                         const std::vector<int64_t> & split) {
    if (split.empty()) {
        throw InvalidInput("evaluate_accuracy: empty split");
    }
    const dataio::Subset s = dataio::gather(ds, split);
    return evaluate_accuracy(model, s.features, s.labels);
}

void write_train_log_csv(const std::vector<EpochLog> & log, const std::string & path) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot open " + path + " for writing");
    }
    const bool with_msr =
        std::any_of(log.begin(), log.end(),
                    [](const EpochLog & e) { return !e.layer_penalties.empty(); });
    out << "epoch,lr,lambda,train_loss,val_acc";
    if (with_msr) out << ",msr";
    out << "\n";
    out.precision(12);
    for (const EpochLog & e : log) {
        out << e.epoch << ',' << e.lr << ',' << e.lambda << ',' << e.train_loss << ','
            << e.val_acc;
        if (with_msr) {
            out << ',';
            for (size_t i = 0; i < e.layer_penalties.size(); ++i) {
                if (i > 0) out << ';';
                out << e.layer_penalties[i];
            }
        }
        out << "\n";
    }
}

} // namespace bsr::nn
