#include "bsr/persist.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include <json.hpp>

#include "bsr/errors.hpp"
#include "bsr/rng.hpp"

namespace fs = std::filesystem;

namespace bsr::persist {

namespace {

constexpr int kFormatVersion = 1;

const char * const kStages[] = {"trained",    "rank_selected", "regularized",
                                "factorized", "finetuned",     "quantized"};

std::string blob_name(size_t layer, const char * role) {
    return "layer" + std::to_string(layer) + "." + role + ".f32";
}

void write_blob(const fs::path & dir, const std::string & name, const double * values,
                int64_t count) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + (dir / name).string());
    }
    std::vector<float> f32(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        f32[static_cast<size_t>(i)] = static_cast<float>(values[i]);
    }
    out.write(reinterpret_cast<const char *>(f32.data()),
              static_cast<std::streamsize>(f32.size() * sizeof(float)));
    if (!out) {
        throw IoError("short write on " + (dir / name).string());
    }
}

std::vector<double> read_blob(const fs::path & dir, const std::string & name, int64_t count) {
    const fs::path p = dir / name;
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw FormatError("missing blob " + p.string());
    }
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<int64_t>(in.tellg());
    if (bytes != count * static_cast<int64_t>(sizeof(float))) {
        throw FormatError("blob " + p.string() + " holds " + std::to_string(bytes) +
                          " bytes, manifest declares " +
                          std::to_string(count * static_cast<int64_t>(sizeof(float))));
    }
    in.seekg(0, std::ios::beg);
    std::vector<float> f32(static_cast<size_t>(count));
    in.read(reinterpret_cast<char *>(f32.data()),
            static_cast<std::streamsize>(f32.size() * sizeof(float)));
    if (!in) {
        throw FormatError("truncated blob " + p.string());
    }
    return {f32.begin(), f32.end()};
}

// Stage everything under a sibling temp dir, then rename into place.
class StagedDir {
  public:
    explicit StagedDir(const std::string & path) : final_(path) {
        const fs::path parent = final_.has_parent_path() ? final_.parent_path() : fs::path(".");
        std::error_code ec;
        fs::create_directories(parent, ec);
        tmp_ = final_;
        tmp_ += ".tmp-" + std::to_string(::getpid());
        fs::remove_all(tmp_, ec);
        if (!fs::create_directories(tmp_)) {
            throw IoError("cannot create staging directory " + tmp_.string());
        }
    }

    ~StagedDir() {
        if (!committed_) {
            std::error_code ec;
            fs::remove_all(tmp_, ec);
        }
    }

    const fs::path & dir() const { return tmp_; }

    void commit() {
        std::error_code ec;
        if (fs::exists(final_)) {
            fs::remove_all(final_, ec);
            if (ec) {
                throw IoError("cannot replace " + final_.string() + ": " + ec.message());
            }
        }
        fs::rename(tmp_, final_, ec);
        if (ec) {
            throw IoError("cannot rename " + tmp_.string() + " to " + final_.string() + ": " +
                          ec.message());
        }
        committed_ = true;
    }

  private:
    fs::path final_;
    fs::path tmp_;
    bool committed_ = false;
};

void write_manifest(const fs::path & dir, const nlohmann::ordered_json & j) {
    std::ofstream out(dir / "manifest.json");
    if (!out) {
        throw IoError("cannot write " + (dir / "manifest.json").string());
    }
    out << j.dump(2) << "\n";
}

nlohmann::json read_manifest(const fs::path & path) {
    std::ifstream in(path / "manifest.json");
    if (!in) {
        throw FormatError("missing manifest in " + path.string());
    }
    try {
        nlohmann::json j;
        in >> j;
        return j;
    } catch (const nlohmann::json::exception & e) {
        throw FormatError("manifest in " + path.string() + ": " + e.what());
    }
}

std::string activation_name(nn::Activation a) {
    return a == nn::Activation::relu ? "relu" : "none";
}

nn::Activation activation_from(const std::string & s, const std::string & path) {
    if (s == "relu") return nn::Activation::relu;
    if (s == "none") return nn::Activation::none;
    throw FormatError("unknown activation '" + s + "' in " + path);
}

} // namespace

bool valid_stage(const std::string & stage) {
    return std::find(std::begin(kStages), std::end(kStages), stage) != std::end(kStages);
}

void save_model(const nn::Model & model, const ModelMeta & meta, const std::string & path) {
    nn::validate(model);
    if (!valid_stage(meta.stage)) {
        throw InvalidInput("save_model: unknown stage tag '" + meta.stage + "'");
    }
    StagedDir staged(path);

    nlohmann::ordered_json j;
    j["format_version"] = kFormatVersion;
    j["kind"] = "model";
    j["stage"] = meta.stage;
    j["seed"] = meta.seed;
    j["dataset_fingerprint"] = meta.dataset_fingerprint;
    j["classes"] = model.classes;
    nlohmann::ordered_json layers = nlohmann::ordered_json::array();
    for (size_t l = 0; l < model.layers.size(); ++l) {
        nlohmann::ordered_json e;
        if (const auto * d = std::get_if<nn::DenseLayer>(&model.layers[l])) {
            e["kind"] = "dense";
            e["m"] = d->w.rows;
            e["n"] = d->w.cols;
            e["activation"] = activation_name(d->activation);
            write_blob(staged.dir(), blob_name(l, "w"), d->w.data.data(), d->w.size());
            write_blob(staged.dir(), blob_name(l, "bias"), d->bias.data(),
                       static_cast<int64_t>(d->bias.size()));
        } else {
            const auto & f = std::get<nn::FactorizedLayer>(model.layers[l]);
            e["kind"] = "factorized";
            e["m"] = f.b_mat.rows;
            e["n"] = f.a.cols;
            e["rank"] = f.a.rows;
            e["activation"] = activation_name(f.activation);
            write_blob(staged.dir(), blob_name(l, "a"), f.a.data.data(), f.a.size());
            write_blob(staged.dir(), blob_name(l, "b"), f.b_mat.data.data(), f.b_mat.size());
            write_blob(staged.dir(), blob_name(l, "bias"), f.bias.data(),
                       static_cast<int64_t>(f.bias.size()));
        }
        layers.push_back(std::move(e));
    }
    j["layers"] = std::move(layers);
    write_manifest(staged.dir(), j);
    staged.commit();
}

nn::Model load_model(const std::string & path, ModelMeta * meta) {
    const nlohmann::json j = read_manifest(path);
    try {
        if (j.at("kind").get<std::string>() != "model") {
            throw FormatError(path + ": not a model checkpoint");
        }
        const std::string stage = j.at("stage").get<std::string>();
        if (!valid_stage(stage)) {
            throw FormatError(path + ": unknown stage tag '" + stage + "'");
        }
        if (meta != nullptr) {
            meta->stage = stage;
            meta->seed = j.at("seed").get<uint64_t>();
            meta->dataset_fingerprint = j.at("dataset_fingerprint").get<uint64_t>();
        }
        nn::Model model;
        model.classes = j.at("classes").get<int>();
        const auto & layers = j.at("layers");
        for (size_t l = 0; l < layers.size(); ++l) {
            const auto & e = layers.at(l);
            const std::string kind = e.at("kind").get<std::string>();
            const int64_t m = e.at("m").get<int64_t>();
            const int64_t n = e.at("n").get<int64_t>();
            const nn::Activation act =
                activation_from(e.at("activation").get<std::string>(), path);
            if (m < 1 || n < 1) {
                throw FormatError(path + ": non-positive layer dimensions in manifest");
            }
            if (kind == "dense") {
                nn::DenseLayer d;
                d.w = Matrix(m, n, read_blob(path, blob_name(l, "w"), m * n));
                d.bias = read_blob(path, blob_name(l, "bias"), m);
                d.activation = act;
                model.layers.emplace_back(std::move(d));
            } else if (kind == "factorized") {
                const int64_t r = e.at("rank").get<int64_t>();
                if (r < 1 || r > std::min(m, n)) {
                    throw FormatError(path + ": factorized rank out of range in manifest");
                }
                nn::FactorizedLayer f;
                f.a = Matrix(r, n, read_blob(path, blob_name(l, "a"), r * n));
                f.b_mat = Matrix(m, r, read_blob(path, blob_name(l, "b"), m * r));
                f.bias = read_blob(path, blob_name(l, "bias"), m);
                f.activation = act;
                model.layers.emplace_back(std::move(f));
            } else {
                throw FormatError(path + ": unknown layer kind '" + kind + "'");
            }
        }
        try {
            nn::validate(model);
        } catch (const InvalidInput & e) {
            throw FormatError(path + ": " + e.what());
        }
        return model;
    } catch (const nlohmann::json::exception & e) {
        throw FormatError(path + ": manifest: " + e.what());
    }
}

void save_ranks(const RankVector & ranks, const std::string & path) {
    if (ranks.empty()) {
        throw InvalidInput("save_ranks: empty rank vector");
    }
    StagedDir staged(path);
    nlohmann::ordered_json j;
    j["format_version"] = kFormatVersion;
    j["kind"] = "ranks";
    j["stage"] = "rank_selected";
    j["ranks"] = ranks;
    write_manifest(staged.dir(), j);
    staged.commit();
}

RankVector load_ranks(const std::string & path) {
    const nlohmann::json j = read_manifest(path);
    try {
        if (j.at("kind").get<std::string>() != "ranks") {
            throw FormatError(path + ": not a rank-vector checkpoint");
        }
        RankVector ranks = j.at("ranks").get<RankVector>();
        if (ranks.empty()) {
            throw FormatError(path + ": empty rank vector");
        }
        for (const int64_t r : ranks) {
            if (r < 1) {
                throw FormatError(path + ": rank entries must be >= 1");
            }
        }
        return ranks;
    } catch (const nlohmann::json::exception & e) {
        throw FormatError(path + ": manifest: " + e.what());
    }
}

void save_report(const compress::CompressionReport & rep, const std::string & path) {
    StagedDir staged(path);
    nlohmann::ordered_json j;
    j["format_version"] = kFormatVersion;
    j["kind"] = "report";
    j["report"] = nlohmann::ordered_json::parse(compress::report_json(rep));
    write_manifest(staged.dir(), j);
    staged.commit();
}

compress::CompressionReport load_report(const std::string & path) {
    const nlohmann::json j = read_manifest(path);
    try {
        if (j.at("kind").get<std::string>() != "report") {
            throw FormatError(path + ": not a report checkpoint");
        }
        return compress::report_from_json_text(j.at("report").dump());
    } catch (const nlohmann::json::exception & e) {
        throw FormatError(path + ": manifest: " + e.what());
    }
}

std::string checkpoint_kind(const std::string & path) {
    const nlohmann::json j = read_manifest(path);
    try {
        return j.at("kind").get<std::string>();
    } catch (const nlohmann::json::exception & e) {
        throw FormatError(path + ": manifest: " + e.what());
    }
}

} // namespace bsr::persist
