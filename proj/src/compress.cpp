#include "bsr/compress.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "bsr/errors.hpp"
#include "bsr/linalg.hpp"

namespace bsr::compress {

namespace {

void check_shapes(const std::vector<LayerShape> & shapes) {
    if (shapes.empty()) {
        throw InvalidInput("layer shapes: empty list");
    }
    for (const LayerShape & s : shapes) {
        if (s.m < 1 || s.n < 1 || s.spatial_count < 1) {
            throw InvalidInput("layer shape: m, n, spatial_count must be >= 1");
        }
        if (s.kind == LayerKind::dense && s.spatial_count != 1) {
            throw InvalidInput("layer shape: dense layers have spatial_count 1");
        }
    }
}

void check_ranks(const std::vector<LayerShape> & shapes, const RankVector & r) {
    check_shapes(shapes);
    if (r.size() != shapes.size()) {
        throw InvalidInput("rank vector: one rank per layer required");
    }
    for (size_t l = 0; l < shapes.size(); ++l) {
        if (r[l] < 1 || r[l] > full_rank(shapes[l])) {
            throw InvalidInput("rank vector: entry " + std::to_string(l) + " out of range");
        }
    }
}

} // namespace

std::vector<LayerShape> model_shapes(const nn::Model & model) {
    std::vector<LayerShape> shapes;
    shapes.reserve(model.layers.size());
    for (const nn::Layer & l : model.layers) {
        LayerShape s;
        s.kind = LayerKind::dense;
        s.m = nn::layer_out_dim(l);
        s.n = nn::layer_in_dim(l);
        s.spatial_count = 1;
        s.has_bias = true;
        shapes.push_back(s);
    }
    return shapes;
}

int64_t full_rank(const LayerShape & s) { return std::min(s.m, s.n); }

RankVector full_ranks(const std::vector<LayerShape> & shapes) {
    check_shapes(shapes);
    RankVector r;
    r.reserve(shapes.size());
    for (const LayerShape & s : shapes) r.push_back(full_rank(s));
    return r;
}

bool keeps_dense(const LayerShape & s, int64_t r) { return s.m * s.n <= r * (s.m + s.n); }

int64_t params_dense(const std::vector<LayerShape> & shapes) {
    check_shapes(shapes);
    int64_t total = 0;
    for (const LayerShape & s : shapes) total += s.m * s.n;
    return total;
}

int64_t params_compressed(const std::vector<LayerShape> & shapes, const RankVector & r) {
    check_ranks(shapes, r);
    int64_t total = 0;
    for (size_t l = 0; l < shapes.size(); ++l) {
        const LayerShape & s = shapes[l];
        total += keeps_dense(s, r[l]) ? s.m * s.n : r[l] * (s.m + s.n);
    }
    return total;
}

double compression_ratio(const std::vector<LayerShape> & shapes, const RankVector & r) {
    return 1.0 - static_cast<double>(params_compressed(shapes, r)) /
                     static_cast<double>(params_dense(shapes));
}

int64_t flops_fc(const LayerShape & s, FlopsMode mode) {
    if (s.kind != LayerKind::dense) {
        throw InvalidInput("flops_fc: dense shape required");
    }
    if (mode == FlopsMode::fused) return s.m * s.n;
    return s.has_bias ? s.m * s.n : s.m * (s.n - 1);
}

int64_t flops_conv(const LayerShape & s, FlopsMode mode) {
    if (s.kind != LayerKind::conv) {
        throw InvalidInput("flops_conv: conv shape required");
    }
    const int64_t map = (mode == FlopsMode::fused) ? s.m * s.n : s.m * (s.n - 1);
    return map * s.spatial_count + (s.has_bias ? s.m : 0);
}

namespace {

int64_t layer_flops(const LayerShape & s, FlopsMode mode) {
    return s.kind == LayerKind::dense ? flops_fc(s, mode) : flops_conv(s, mode);
}

} // namespace

int64_t model_flops(const std::vector<LayerShape> & shapes, FlopsMode mode) {
    check_shapes(shapes);
    int64_t total = 0;
    for (const LayerShape & s : shapes) total += layer_flops(s, mode);
    return total;
}

int64_t model_flops(const std::vector<LayerShape> & shapes, const RankVector & r,
                    FlopsMode mode) {
    check_ranks(shapes, r);
    int64_t total = 0;
    for (size_t l = 0; l < shapes.size(); ++l) {
        const LayerShape & s = shapes[l];
        if (keeps_dense(s, r[l])) {
            total += layer_flops(s, mode);
            continue;
        }
        LayerShape first = s;
        first.m = r[l];
        first.has_bias = false;
        LayerShape second = s;
        second.n = r[l];
        total += layer_flops(first, mode) + layer_flops(second, mode);
    }
    return total;
}

nn::Model factorize_model(const nn::Model & model, const RankVector & r) {
    nn::validate(model);
    if (r.size() != model.layers.size()) {
        throw InvalidInput("factorize_model: one rank per layer required");
    }
    nn::Model out;
    out.classes = model.classes;
    for (size_t l = 0; l < model.layers.size(); ++l) {
        const auto * d = std::get_if<nn::DenseLayer>(&model.layers[l]);
        if (d == nullptr) {
            throw InvalidInput("factorize_model: layer " + std::to_string(l) +
                               " is already factorized");
        }
        const int64_t R = std::min(d->w.rows, d->w.cols);
        if (r[l] < 1 || r[l] > R) {
            throw InvalidInput("factorize_model: rank for layer " + std::to_string(l) +
                               " out of range");
        }
        LayerShape s;
        s.m = d->w.rows;
        s.n = d->w.cols;
        if (keeps_dense(s, r[l])) {
            out.layers.push_back(*d);
            continue;
        }
        const linalg::SvdFactors f = linalg::truncate(linalg::svd_full(d->w), r[l]);
        nn::FactorizedLayer fl;
        fl.a = Matrix(r[l], d->w.cols);
        for (int64_t i = 0; i < r[l]; ++i) {
            for (int64_t j = 0; j < d->w.cols; ++j) {
                fl.a(i, j) = f.sigma[static_cast<size_t>(i)] * f.v(j, i);
            }
        }
        fl.b_mat = f.u;
        fl.bias = d->bias;
        fl.activation = d->activation;
        out.layers.emplace_back(std::move(fl));
    }
    nn::validate(out);
    return out;
}

std::vector<nn::EpochLog> finetune(nn::Model & model, const dataio::Dataset & ds,
                                   const nn::TrainConfig & cfg) {
    return nn::train(model, ds, cfg);
}

void fill_report_arithmetic(CompressionReport & rep, const std::vector<LayerShape> & shapes,
                            const RankVector & r) {
    rep.params_before = params_dense(shapes);
    rep.params_after = params_compressed(shapes, r);
    rep.ratio = compression_ratio(shapes, r);
    const double after = static_cast<double>(rep.params_after);
    rep.memory_mb_32 = after * 32.0 / 8.0 / 1e6;
    rep.memory_mb_16 = after * 16.0 / 8.0 / 1e6;
    rep.memory_mb_8 = after * 8.0 / 8.0 / 1e6;
    rep.memory_mb_4 = after * 4.0 / 8.0 / 1e6;
}

std::string report_json(const CompressionReport & rep) {
    nlohmann::ordered_json j;
    j["c_d"] = rep.c_d;
    j["tau"] = rep.tau;
    j["ratio"] = rep.ratio;
    j["params_before"] = rep.params_before;
    j["params_after"] = rep.params_after;
    j["mflops_before"] = rep.mflops_before;
    j["mflops_after_exact"] = rep.mflops_after_exact;
    j["mflops_after_fused"] = rep.mflops_after_fused;
    j["accuracy_before"] = rep.accuracy_before;
    j["accuracy_after"] = rep.accuracy_after;
    j["memory_mb"] = {{"32", rep.memory_mb_32},
                      {"16", rep.memory_mb_16},
                      {"8", rep.memory_mb_8},
                      {"4", rep.memory_mb_4}};
    return j.dump(2);
}

CompressionReport report_from_json_text(const std::string & text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception & e) {
        throw FormatError(std::string("report: ") + e.what());
    }
    try {
        CompressionReport rep;
        rep.c_d = j.at("c_d").get<double>();
        rep.tau = j.at("tau").get<double>();
        rep.ratio = j.at("ratio").get<double>();
        rep.params_before = j.at("params_before").get<int64_t>();
        rep.params_after = j.at("params_after").get<int64_t>();
        rep.mflops_before = j.at("mflops_before").get<double>();
        rep.mflops_after_exact = j.at("mflops_after_exact").get<double>();
        rep.mflops_after_fused = j.at("mflops_after_fused").get<double>();
        rep.accuracy_before = j.at("accuracy_before").get<double>();
        rep.accuracy_after = j.at("accuracy_after").get<double>();
        const auto & mem = j.at("memory_mb");
        rep.memory_mb_32 = mem.at("32").get<double>();
        rep.memory_mb_16 = mem.at("16").get<double>();
        rep.memory_mb_8 = mem.at("8").get<double>();
        rep.memory_mb_4 = mem.at("4").get<double>();
        return rep;
    } catch (const nlohmann::json::exception & e) {
        throw FormatError(std::string("report: ") + e.what());
    }
}

std::string report_csv_header() {
    return "c_d,tau,ratio,params_before,params_after,mflops_before,mflops_after_exact,"
           "mflops_after_fused,acc_before,acc_after,mem32,mem16,mem8,mem4";
}

std::string report_csv_row(const CompressionReport & rep) {
    std::ostringstream out;
    out.precision(12);
    out << rep.c_d << ',' << rep.tau << ',' << rep.ratio << ',' << rep.params_before << ','
        << rep.params_after << ',' << rep.mflops_before << ',' << rep.mflops_after_exact << ','
        << rep.mflops_after_fused << ',' << rep.accuracy_before << ',' << rep.accuracy_after
        << ',' << rep.memory_mb_32 << ',' << rep.memory_mb_16 << ',' << rep.memory_mb_8 << ','
        << rep.memory_mb_4;
    return out.str();
}

} // namespace bsr::compress
