#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <variant>
#include <vector>

#include "bsr/dataio.hpp"
#include "bsr/matrix.hpp"

namespace bsr::nn {

enum class Activation { relu, none };

// y = act(W x + bias), W is m × n.
struct DenseLayer {
    Matrix w;
    std::vector<double> bias;
    Activation activation = Activation::relu;
};

// Cascade y = act(B (A x) + bias): a holds the r × n product of the
// truncated singular values with V^T, b_mat the m × r left factor.
struct FactorizedLayer {
    Matrix a;
    Matrix b_mat;
    std::vector<double> bias;
    Activation activation = Activation::relu;
};

using Layer = std::variant<DenseLayer, FactorizedLayer>;

int64_t layer_in_dim(const Layer & l);
int64_t layer_out_dim(const Layer & l);
Activation layer_activation(const Layer & l);

struct Model {
    std::vector<Layer> layers;
    int classes = 0;
};

// Throws InvalidInput unless adjacent dimensions chain, the final width
// equals the class count, and every parameter is finite.
void validate(const Model & m);

// He-uniform initialized ReLU MLP; dims = {in, hidden..., classes}. The
// final layer has no activation.
Model make_mlp(const std::vector<int64_t> & dims, uint64_t seed);

// Logits for a batch (rows = samples).
Matrix forward(const Model & model, const Matrix & x);

// Mirrors the model layer by layer; unused tensors stay empty.
struct LayerGrads {
    Matrix w;
    Matrix a;
    Matrix b_mat;
    std::vector<double> bias;
};

struct Gradients {
    std::vector<LayerGrads> layers;
};

// Mean softmax cross-entropy over the batch; fills g (resized/zeroed here).
double loss_and_grad(const Model & model, const Matrix & x, const std::vector<int> & y,
                     Gradients & g);

// eta0 * (1 + cos(pi t / T)) / 2
double cosine_lr(double eta0, int64_t t, int64_t T);

struct TrainConfig {
    double eta0 = 0.1;
    double momentum = 0.9;
    int64_t batch = 128;
    int epochs = 0;
    uint64_t seed = 0;
    bool cosine = true;
};

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double lambda = 0.0;
    double train_loss = 0.0;
    double val_acc = 0.0;
    std::vector<double> layer_penalties; // empty unless a penalty hook ran
};

// Adds a differentiable penalty to the objective each optimizer step.
class PenaltyHook {
  public:
    virtual ~PenaltyHook() = default;
    // Returns the penalty value and accumulates its gradient into g.
    virtual double apply(const Model & model, Gradients & g, int64_t iteration, int epoch) = 0;
    virtual double lambda_value(int epoch) const = 0;
    // Freshly computed per-layer penalty terms, for the epoch log.
    virtual std::vector<double> layer_values(const Model & model) const = 0;
};

// Nesterov SGD over the dataset's train split, validation accuracy from its
// val split. Deterministic per config.seed at a fixed thread count.
// on_epoch_start (if set) runs before each epoch's batches; it may adjust
// the penalty hook but must not consume shared RNG state.
std::vector<EpochLog> train(Model & model, const dataio::Dataset & ds, const TrainConfig & cfg,
                            PenaltyHook * penalty = nullptr,
                            const std::function<void(int, const Model &)> & on_epoch_start = {});

double evaluate_accuracy(const Model & model, const Matrix & x, const std::vector<int> & y);
double evaluate_accuracy(const Model & model, const dataio::Dataset & ds,
                         const std::vector<int64_t> & split);

// CSV: epoch,lr,lambda,train_loss,val_acc[,msr] (msr column present when any
// row carries per-layer penalties, semicolon-joined).
void write_train_log_csv(const std::vector<EpochLog> & log, const std::string & path);

} // namespace bsr::nn
