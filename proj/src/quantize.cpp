#include "bsr/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "bsr/errors.hpp"

namespace bsr::quantize {

namespace {

void check_bits(int bits) {
    if (bits != 4 && bits != 8 && bits != 16 && bits != 32) {
        throw InvalidInput("quantize: bits must be one of 4, 8, 16, 32");
    }
}

Matrix roundtrip(const Matrix & w, int bits) { return dequantize(quantize_tensor(w, bits)); }

} // namespace

QuantizedTensor quantize_tensor(const Matrix & w, int bits) {
    check_bits(bits);
    validate(w, "quantize_tensor input");
    QuantizedTensor q;
    q.bits = bits;
    q.rows = w.rows;
    q.cols = w.cols;
    if (bits == 32) {
        q.raw = w.data;
        return q;
    }
    const double qmax = static_cast<double>((1 << (bits - 1)) - 1);
    const double peak = max_abs(w);
    q.scale = (peak > 0.0) ? peak / qmax : 1.0;
    q.codes.resize(w.data.size());
    for (size_t i = 0; i < w.data.size(); ++i) {
        const double c = std::round(w.data[i] / q.scale);
        q.codes[i] = static_cast<int32_t>(std::clamp(c, -qmax, qmax));
    }
    return q;
}

Matrix dequantize(const QuantizedTensor & q) {
    Matrix w(q.rows, q.cols);
    if (q.bits == 32) {
        if (q.raw.size() != w.data.size()) {
            throw InvalidInput("dequantize: raw length mismatch");
        }
        w.data = q.raw;
        return w;
    }
    if (q.codes.size() != w.data.size()) {
        throw InvalidInput("dequantize: code length mismatch");
    }
    for (size_t i = 0; i < q.codes.size(); ++i) {
        w.data[i] = static_cast<double>(q.codes[i]) * q.scale;
    }
    return w;
}

QuantizeResult quantize_model(const nn::Model & model, int bits) {
    check_bits(bits);
    nn::validate(model);
    QuantizeResult res;
    res.bits = bits;
    res.model = model;
    for (nn::Layer & layer : res.model.layers) {
        if (auto * d = std::get_if<nn::DenseLayer>(&layer)) {
            d->w = roundtrip(d->w, bits);
            res.weight_params += d->w.size();
            res.bias_params += static_cast<int64_t>(d->bias.size());
        } else {
            auto & f = std::get<nn::FactorizedLayer>(layer);
            f.a = roundtrip(f.a, bits);
            f.b_mat = roundtrip(f.b_mat, bits);
            res.weight_params += f.a.size() + f.b_mat.size();
            res.bias_params += static_cast<int64_t>(f.bias.size());
        }
    }
    res.memory_bytes =
        (static_cast<double>(res.weight_params) * bits + static_cast<double>(res.bias_params) * 32) /
        8.0;
    return res;
}

std::string quant_matrix_csv(const std::vector<int> & bits, const std::vector<QuantRow> & rows) {
    std::ostringstream out;
    out.precision(12);
    out << "setting";
    for (const int b : bits) {
        out << ",acc_" << b << "bit,mem_mb_" << b << "bit";
    }
    out << "\n";
    for (const QuantRow & r : rows) {
        if (r.accuracy.size() != bits.size() || r.memory_mb.size() != bits.size()) {
            throw InvalidInput("quant_matrix_csv: row width does not match bits list");
        }
        out << r.setting;
        for (size_t i = 0; i < bits.size(); ++i) {
            out << ',' << r.accuracy[i] << ',' << r.memory_mb[i];
        }
        out << "\n";
    }
    return out.str();
}

} // namespace bsr::quantize
