#include "bsr/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "bsr/compress.hpp"
#include "bsr/errors.hpp"
#include "bsr/kernels.hpp"
#include "bsr/persist.hpp"
#include "bsr/quantize.hpp"
#include "bsr/rng.hpp"

namespace bsr::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

uint64_t fnv1a(const char * s) {
    uint64_t h = 1469598103934665603ull;
    for (; *s; ++s) {
        h ^= (unsigned char)*s;
        h *= 1099511628211ull;
    }
    return h;
}

std::string join_ranks(const RankVector & r, char sep) {
    std::ostringstream o;
    for (size_t i = 0; i < r.size(); ++i) {
        if (i) o << sep;
        o << r[i];
    }
    return o.str();
}

void note(const std::string & msg) { std::cerr << "[bsr] " << msg << std::endl; }

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double secs() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

std::string art(const PipelineConfig & cfg, const std::string & name) {
    return (fs::path(cfg.out_dir) / name).string();
}

std::ofstream open_out(const std::string & path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.precision(12);
    return out;
}

void emit(const ordered_json & j) { std::cout << j.dump() << std::endl; }

void check_keys(const ordered_json & j, std::initializer_list<const char *> allowed,
                const std::string & where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char * k : allowed)
            if (it.key() == k) {
                known = true;
                break;
            }
        if (!known) throw FormatError("unknown config key '" + it.key() + "' in " + where);
    }
}

ordered_json train_json(const nn::TrainConfig & tc) {
    return {{"eta0", tc.eta0},
            {"momentum", tc.momentum},
            {"batch", tc.batch},
            {"epochs", tc.epochs},
            {"cosine", tc.cosine}};
}

void merge_train(nn::TrainConfig & tc, const ordered_json & j, const std::string & where) {
    if (!j.is_object()) throw FormatError(where + " must be an object");
    check_keys(j, {"eta0", "momentum", "batch", "epochs", "cosine"}, where);
    tc.eta0 = j.value("eta0", tc.eta0);
    tc.momentum = j.value("momentum", tc.momentum);
    tc.batch = j.value("batch", tc.batch);
    tc.epochs = j.value("epochs", tc.epochs);
    tc.cosine = j.value("cosine", tc.cosine);
}

void check_train(const nn::TrainConfig & tc, const std::string & where) {
    if (!(tc.eta0 > 0.0)) throw InvalidInput(where + ".eta0 must be positive");
    if (tc.momentum < 0.0 || tc.momentum >= 1.0)
        throw InvalidInput(where + ".momentum must lie in [0, 1)");
    if (tc.batch < 1) throw InvalidInput(where + ".batch must be at least 1");
    if (tc.epochs < 0) throw InvalidInput(where + ".epochs must be non-negative");
}

} // namespace

uint64_t phase_seed(uint64_t seed, const char * phase) { return splitmix64(seed ^ fnv1a(phase)); }

PipelineConfig default_config() {
    PipelineConfig cfg;
    cfg.base_train.epochs = 30;
    cfg.reg_train.epochs = 60;
    cfg.ft_train.epochs = 30;
    cfg.ft_train.eta0 = 0.01;
    cfg.search.val_subset = 512;
    // short runs need a steeper lambda ramp than long ones to reach the
    // same terminal strength; calibrated so 60 epochs drive the tail
    // mass of every truncated layer well below observable levels
    cfg.reg.lambda0 = 0.3;
    cfg.reg.growth = 2.0;
    cfg.reg.period_epochs = 10;
    return cfg;
}

void validate(const PipelineConfig & cfg) {
    if (cfg.arch.size() < 2) throw InvalidInput("arch needs an input and an output width");
    for (int64_t d : cfg.arch)
        if (d < 1) throw InvalidInput("arch widths must be positive");
    if (cfg.data.kind != "auto" && cfg.data.kind != "mnist" && cfg.data.kind != "synth_digits" &&
        cfg.data.kind != "synth_blobs")
        throw InvalidInput("unknown dataset kind '" + cfg.data.kind + "'");
    if (cfg.data.per_class < 3 || cfg.data.blob_per_class < 3)
        throw InvalidInput("per-class sample counts must be at least 3");
    if (cfg.data.blob_classes < 2 || cfg.data.blob_dim < 1)
        throw InvalidInput("blob dataset needs at least 2 classes and 1 dimension");
    check_train(cfg.base_train, "base_train");
    check_train(cfg.reg_train, "reg_train");
    check_train(cfg.ft_train, "ft_train");
    ranksel::validate(cfg.search);
    if (cfg.reg.lambda0 < 0.0) throw InvalidInput("regularizer.lambda0 must be non-negative");
    if (cfg.reg.growth < 1.0) throw InvalidInput("regularizer.growth must be at least 1");
    if (cfg.reg.period_epochs < 1 || cfg.reg.svd_refresh_iters < 1)
        throw InvalidInput("regularizer periods must be at least 1");
    if (cfg.lambda_mode != "scheduled" && cfg.lambda_mode != "fixed")
        throw InvalidInput("lambda_mode must be 'scheduled' or 'fixed'");
    if (cfg.rank_update != "once" && cfg.rank_update != "before_decomposition" &&
        cfg.rank_update != "multiple")
        throw InvalidInput("rank_update must be 'once', 'before_decomposition' or 'multiple'");
    if (cfg.rank_update_period < 1) throw InvalidInput("rank_update_period must be at least 1");
    if (cfg.quant_bits.empty()) throw InvalidInput("quant_bits must not be empty");
    for (int b : cfg.quant_bits)
        if (b != 4 && b != 8 && b != 16 && b != 32)
            throw InvalidInput("quant_bits entries must be one of 4, 8, 16, 32");
    if (cfg.out_dir.empty()) throw InvalidInput("out_dir must not be empty");
    if (cfg.threads < 1) throw InvalidInput("threads must be at least 1");
}

void apply_json(PipelineConfig & cfg, const std::string & text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception & e) {
        throw FormatError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw FormatError("config root must be a JSON object");
    try {
        check_keys(j,
                   {"seed", "threads", "out_dir", "arch", "dataset", "base_train", "reg_train",
                    "ft_train", "search", "regularizer", "lambda_mode", "rank_update",
                    "rank_update_period", "quant_bits"},
                   "config");
        cfg.seed = j.value("seed", cfg.seed);
        cfg.threads = j.value("threads", cfg.threads);
        cfg.out_dir = j.value("out_dir", cfg.out_dir);
        if (j.contains("arch")) cfg.arch = j["arch"].get<std::vector<int64_t>>();
        if (j.contains("dataset")) {
            const auto & d = j["dataset"];
            if (!d.is_object()) throw FormatError("dataset must be an object");
            check_keys(d, {"kind", "dir", "per_class", "blob_classes", "blob_dim", "blob_per_class"},
                       "dataset");
            cfg.data.kind = d.value("kind", cfg.data.kind);
            cfg.data.dir = d.value("dir", cfg.data.dir);
            cfg.data.per_class = d.value("per_class", cfg.data.per_class);
            cfg.data.blob_classes = d.value("blob_classes", cfg.data.blob_classes);
            cfg.data.blob_dim = d.value("blob_dim", cfg.data.blob_dim);
            cfg.data.blob_per_class = d.value("blob_per_class", cfg.data.blob_per_class);
        }
        if (j.contains("base_train")) merge_train(cfg.base_train, j["base_train"], "base_train");
        if (j.contains("reg_train")) merge_train(cfg.reg_train, j["reg_train"], "reg_train");
        if (j.contains("ft_train")) merge_train(cfg.ft_train, j["ft_train"], "ft_train");
        if (j.contains("search")) {
            const auto & s = j["search"];
            if (!s.is_object()) throw FormatError("search must be an object");
            check_keys(s, {"c_d", "tau", "k", "s", "gamma", "val_subset"}, "search");
            cfg.search.c_d = s.value("c_d", cfg.search.c_d);
            cfg.search.tau = s.value("tau", cfg.search.tau);
            cfg.search.k = s.value("k", cfg.search.k);
            cfg.search.s = s.value("s", cfg.search.s);
            cfg.search.gamma = s.value("gamma", cfg.search.gamma);
            cfg.search.val_subset = s.value("val_subset", cfg.search.val_subset);
        }
        if (j.contains("regularizer")) {
            const auto & r = j["regularizer"];
            if (!r.is_object()) throw FormatError("regularizer must be an object");
            check_keys(r, {"lambda0", "growth", "period_epochs", "svd_refresh_iters"},
                       "regularizer");
            cfg.reg.lambda0 = r.value("lambda0", cfg.reg.lambda0);
            cfg.reg.growth = r.value("growth", cfg.reg.growth);
            cfg.reg.period_epochs = r.value("period_epochs", cfg.reg.period_epochs);
            cfg.reg.svd_refresh_iters = r.value("svd_refresh_iters", cfg.reg.svd_refresh_iters);
        }
        cfg.lambda_mode = j.value("lambda_mode", cfg.lambda_mode);
        cfg.rank_update = j.value("rank_update", cfg.rank_update);
        cfg.rank_update_period = j.value("rank_update_period", cfg.rank_update_period);
        if (j.contains("quant_bits")) cfg.quant_bits = j["quant_bits"].get<std::vector<int>>();
    } catch (const ordered_json::exception & e) {
        throw FormatError(std::string("config field has the wrong type: ") + e.what());
    }
}

PipelineConfig load_config(const std::string & path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    PipelineConfig cfg = default_config();
    apply_json(cfg, buf.str());
    return cfg;
}

std::string config_json(const PipelineConfig & cfg) {
    ordered_json j;
    j["seed"] = cfg.seed;
    j["threads"] = cfg.threads;
    j["out_dir"] = cfg.out_dir;
    j["arch"] = cfg.arch;
    j["dataset"] = {{"kind", cfg.data.kind},
                    {"dir", cfg.data.dir},
                    {"per_class", cfg.data.per_class},
                    {"blob_classes", cfg.data.blob_classes},
                    {"blob_dim", cfg.data.blob_dim},
                    {"blob_per_class", cfg.data.blob_per_class}};
    j["base_train"] = train_json(cfg.base_train);
    j["reg_train"] = train_json(cfg.reg_train);
    j["ft_train"] = train_json(cfg.ft_train);
    j["search"] = {{"c_d", cfg.search.c_d}, {"tau", cfg.search.tau},   {"k", cfg.search.k},
                   {"s", cfg.search.s},     {"gamma", cfg.search.gamma},
                   {"val_subset", cfg.search.val_subset}};
    j["regularizer"] = {{"lambda0", cfg.reg.lambda0},
                        {"growth", cfg.reg.growth},
                        {"period_epochs", cfg.reg.period_epochs},
                        {"svd_refresh_iters", cfg.reg.svd_refresh_iters}};
    j["lambda_mode"] = cfg.lambda_mode;
    j["rank_update"] = cfg.rank_update;
    j["rank_update_period"] = cfg.rank_update_period;
    j["quant_bits"] = cfg.quant_bits;
    return j.dump(2);
}

namespace {

dataio::Dataset load_mnist_dir(const std::string & dir, uint64_t seed) {
    if (dir.empty()) throw InvalidInput("mnist dataset needs a directory path");
    fs::path d(dir);
    dataio::Dataset tr = dataio::load_mnist_idx((d / "train-images-idx3-ubyte").string(),
                                                (d / "train-labels-idx1-ubyte").string());
    dataio::Dataset te = dataio::load_mnist_idx((d / "t10k-images-idx3-ubyte").string(),
                                                (d / "t10k-labels-idx1-ubyte").string());
    if (tr.dim() != te.dim())
        throw FormatError("mnist train and test images disagree on dimensionality");
    dataio::Dataset all;
    all.classes = 10;
    all.features = Matrix(tr.size() + te.size(), tr.dim());
    std::memcpy(all.features.data.data(), tr.features.data.data(),
                sizeof(double) * tr.features.data.size());
    std::memcpy(all.features.data.data() + tr.features.data.size(), te.features.data.data(),
                sizeof(double) * te.features.data.size());
    all.labels = tr.labels;
    all.labels.insert(all.labels.end(), te.labels.begin(), te.labels.end());
    // Stratified 11/12 train, 1/12 val within the original training block;
    // the official test block stays the test split.
    std::vector<std::vector<int64_t>> by_class(10);
    for (int64_t i = 0; i < tr.size(); ++i) by_class[tr.labels[(size_t)i]].push_back(i);
    Rng rng(splitmix64(seed ^ 0x6d6e697374ull));
    for (auto & idx : by_class) {
        rng.shuffle(idx);
        int64_t n_tr = (int64_t)(idx.size() * 11 / 12);
        for (size_t p = 0; p < idx.size(); ++p)
            ((int64_t)p < n_tr ? all.train : all.val).push_back(idx[p]);
    }
    for (int64_t i = 0; i < te.size(); ++i) all.test.push_back(tr.size() + i);
    std::sort(all.train.begin(), all.train.end());
    std::sort(all.val.begin(), all.val.end());
    return all;
}

} // namespace

dataio::Dataset load_dataset(const PipelineConfig & cfg) {
    std::string kind = cfg.data.kind;
    std::string dir = cfg.data.dir;
    if (kind == "auto") {
        const char * env = std::getenv("BSR_MNIST_DIR");
        if (env && *env && fs::exists(fs::path(env) / "train-images-idx3-ubyte")) {
            kind = "mnist";
            dir = env;
        } else {
            kind = "synth_digits";
        }
    }
    uint64_t dseed = phase_seed(cfg.seed, "dataset");
    if (kind == "mnist") return load_mnist_dir(dir, dseed);
    if (kind == "synth_digits")
        return dataio::split(dataio::synth_digits(cfg.data.per_class, dseed), {0.7, 0.15, 0.15},
                             splitmix64(dseed));
    if (kind == "synth_blobs")
        return dataio::split(dataio::synth_blobs(cfg.data.blob_classes, cfg.data.blob_per_class,
                                                 cfg.data.blob_dim, dseed),
                             {0.7, 0.15, 0.15}, splitmix64(dseed));
    throw InvalidInput("unknown dataset kind '" + kind + "'");
}

namespace {

void prepare(const PipelineConfig & cfg) {
    validate(cfg);
    kernels::set_threads(cfg.threads);
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + cfg.out_dir);
    auto out = open_out(art(cfg, "config.json"));
    out << config_json(cfg) << "\n";
}

nn::Model load_stage_model(const PipelineConfig & cfg, const dataio::Dataset & ds,
                           const std::string & path) {
    persist::ModelMeta meta;
    nn::Model model = persist::load_model(path, &meta);
    if (nn::layer_in_dim(model.layers.front()) != ds.dim() || model.classes != ds.classes)
        throw InvalidInput("checkpoint " + path + " does not match the dataset geometry");
    if (meta.dataset_fingerprint != 0 && meta.dataset_fingerprint != dataio::fingerprint(ds))
        note("warning: " + path + " was produced from a different dataset");
    return model;
}

std::string orelse(const std::string & v, const std::string & fallback) {
    return v.empty() ? fallback : v;
}

std::string default_ranks_path(const PipelineConfig & cfg) {
    std::string fin = art(cfg, "ranks_final");
    return fs::exists(fin) ? fin : art(cfg, "ranks");
}

nn::Model train_impl(const PipelineConfig & cfg, const dataio::Dataset & ds) {
    if (cfg.arch.front() != ds.dim() || cfg.arch.back() != ds.classes)
        throw InvalidInput("arch endpoints must match the dataset (in=" +
                           std::to_string(ds.dim()) + ", classes=" + std::to_string(ds.classes) +
                           ")");
    Timer t;
    nn::Model model = nn::make_mlp(cfg.arch, phase_seed(cfg.seed, "init"));
    nn::TrainConfig tc = cfg.base_train;
    tc.seed = phase_seed(cfg.seed, "base_train");
    auto log = nn::train(model, ds, tc);
    nn::write_train_log_csv(log, art(cfg, "train_log.csv"));
    persist::save_model(model, {"trained", cfg.seed, dataio::fingerprint(ds)},
                        art(cfg, "trained"));
    note("train: " + std::to_string(tc.epochs) + " epochs in " + std::to_string(t.secs()) + "s");
    return model;
}

void write_search_artifacts(const PipelineConfig & cfg, const std::vector<ranksel::ConfigRun> & runs,
                            const ranksel::BeamCandidate * sel, const ranksel::EnergyResult & en,
                            double en_acc) {
    auto out = open_out(art(cfg, "search_summary.csv"));
    out << "source,s,k,success,ranks,ratio,val_accuracy\n";
    for (const auto & run : runs)
        out << "mbs," << run.s << ',' << run.k << ',' << (run.success ? 1 : 0) << ','
            << join_ranks(run.candidate.r, ';') << ',' << run.candidate.c << ','
            << run.candidate.a << "\n";
    if (sel)
        out << "selected,0,0,1," << join_ranks(sel->r, ';') << ',' << sel->c << ',' << sel->a
            << "\n";
    out << "energy,0,0," << (en.in_band ? 1 : 0) << ',' << join_ranks(en.r, ';') << ','
        << en.ratio << ',' << en_acc << "\n";
    // trace of the selected run (or the first run when every config failed)
    const std::vector<ranksel::TraceRow> * trace = nullptr;
    for (const auto & run : runs) {
        if (sel && run.success && run.candidate.r == sel->r) {
            trace = &run.trace;
            break;
        }
    }
    if (!trace && !runs.empty()) trace = &runs.front().trace;
    if (trace) ranksel::write_trace_csv(*trace, art(cfg, "search_trace.csv"));
}

ranksel::BeamCandidate select_impl(const PipelineConfig & cfg, const dataio::Dataset & ds,
                                   const nn::Model & model, bool single_config,
                                   const std::string & ranks_out) {
    Timer t;
    auto shapes = compress::model_shapes(model);
    ranksel::SearchConfig scfg = cfg.search;
    scfg.seed = phase_seed(cfg.seed, "search");
    ranksel::FactorCache cache = ranksel::build_factor_cache(model);
    ranksel::EnergyResult en = ranksel::energy_baseline(cache, shapes, scfg.c_d, scfg.tau);
    double en_acc = ranksel::truncated_accuracy(model, cache, en.r, ds);
    std::vector<ranksel::ConfigRun> runs;
    ranksel::BeamCandidate sel;
    try {
        if (single_config) {
            ranksel::ConfigRun run;
            run.s = scfg.s;
            run.k = scfg.k;
            std::vector<ranksel::TraceRow> fail_trace;
            try {
                auto res = ranksel::mbs_search(model, ds, shapes, scfg, &cache, &fail_trace);
                run.success = true;
                run.candidate = res.selected;
                run.trace = std::move(res.trace);
            } catch (const SearchFailure & e) {
                run.candidate = {e.best_ranks, e.best_ratio, e.best_accuracy};
                run.trace = std::move(fail_trace);
                runs.push_back(std::move(run));
                throw;
            }
            sel = run.candidate;
            runs.push_back(std::move(run));
        } else {
            sel = ranksel::multi_config_search(model, ds, shapes, scfg, &runs);
        }
    } catch (const SearchFailure &) {
        write_search_artifacts(cfg, runs, nullptr, en, en_acc);
        throw;
    }
    write_search_artifacts(cfg, runs, &sel, en, en_acc);
    persist::save_ranks(sel.r, ranks_out);
    note("select-rank: ratio " + std::to_string(sel.c) + " in " + std::to_string(t.secs()) + "s");
    return sel;
}

struct RegOutcome {
    nn::Model model;
    RankVector final_ranks;
    std::vector<nn::EpochLog> log;
};

RegOutcome regularize_impl(const PipelineConfig & cfg, const dataio::Dataset & ds, nn::Model model,
                           const RankVector & ranks) {
    Timer t;
    if (ranks.size() != model.layers.size())
        throw InvalidInput("rank vector length does not match the model depth");
    auto shapes = compress::model_shapes(model);
    regularizer::RegSchedule sched = cfg.reg;
    sched.targets = ranks;
    sched.scheduled = cfg.lambda_mode == "scheduled";
    regularizer::MsrPenalty hook(sched);
    nn::TrainConfig tc = cfg.reg_train;
    tc.seed = phase_seed(cfg.seed, "reg_train");
    std::function<void(int, const nn::Model &)> on_epoch;
    if (cfg.rank_update == "multiple") {
        on_epoch = [&cfg, &ds, &shapes, &hook](int epoch, const nn::Model & m) {
            if (epoch == 0 || epoch % cfg.rank_update_period != 0) return;
            ranksel::SearchConfig scfg = cfg.search;
            scfg.seed = phase_seed(cfg.seed ^ (uint64_t)epoch, "research");
            auto res = ranksel::mbs_search(m, ds, shapes, scfg);
            hook.set_targets(res.selected.r);
            note("rank re-search at epoch " + std::to_string(epoch) + ": [" +
                 join_ranks(res.selected.r, ' ') + "]");
        };
    }
    auto log = nn::train(model, ds, tc, &hook, on_epoch);
    RankVector fin = hook.targets();
    if (cfg.rank_update == "before_decomposition") {
        ranksel::SearchConfig scfg = cfg.search;
        scfg.seed = phase_seed(cfg.seed, "research_final");
        fin = ranksel::mbs_search(model, ds, shapes, scfg).selected.r;
        note("rank re-search before decomposition: [" + join_ranks(fin, ' ') + "]");
    }
    note("regularize: " + std::to_string(tc.epochs) + " epochs in " + std::to_string(t.secs()) +
         "s");
    return {std::move(model), std::move(fin), std::move(log)};
}

struct CompressOutcome {
    nn::Model fact;
    compress::CompressionReport rep;
};

CompressOutcome compress_impl(const PipelineConfig & cfg, const dataio::Dataset & ds,
                              const nn::Model & dense, const RankVector & ranks) {
    auto shapes = compress::model_shapes(dense);
    nn::Model fact = compress::factorize_model(dense, ranks);
    compress::CompressionReport rep;
    rep.c_d = cfg.search.c_d;
    rep.tau = cfg.search.tau;
    compress::fill_report_arithmetic(rep, shapes, ranks);
    rep.mflops_before = (double)compress::model_flops(shapes, compress::FlopsMode::exact) / 1e6;
    rep.mflops_after_exact =
        (double)compress::model_flops(shapes, ranks, compress::FlopsMode::exact) / 1e6;
    rep.mflops_after_fused =
        (double)compress::model_flops(shapes, ranks, compress::FlopsMode::fused) / 1e6;
    rep.accuracy_before = nn::evaluate_accuracy(dense, ds, ds.test);
    rep.accuracy_after = nn::evaluate_accuracy(fact, ds, ds.test);
    return {std::move(fact), rep};
}

void write_report_with_config(const compress::CompressionReport & rep, const PipelineConfig & cfg,
                              const std::string & path) {
    ordered_json j;
    j["report"] = ordered_json::parse(compress::report_json(rep));
    j["config"] = ordered_json::parse(config_json(cfg));
    auto out = open_out(path);
    out << j.dump(2) << "\n";
}

std::vector<nn::EpochLog> finetune_impl(const PipelineConfig & cfg, const dataio::Dataset & ds,
                                        nn::Model & model) {
    Timer t;
    nn::TrainConfig tc = cfg.ft_train;
    tc.seed = phase_seed(cfg.seed, "finetune");
    auto log = compress::finetune(model, ds, tc);
    note("finetune: " + std::to_string(tc.epochs) + " epochs in " + std::to_string(t.secs()) +
         "s");
    return log;
}

quantize::QuantRow quantize_impl(const PipelineConfig & cfg, const dataio::Dataset & ds,
                                 const nn::Model & model, const std::string & setting) {
    quantize::QuantRow row;
    row.setting = setting;
    for (int b : cfg.quant_bits) {
        auto qr = quantize::quantize_model(model, b);
        row.accuracy.push_back(nn::evaluate_accuracy(qr.model, ds, ds.test));
        row.memory_mb.push_back(qr.memory_bytes / 1e6);
        persist::save_model(qr.model, {"quantized", cfg.seed, dataio::fingerprint(ds)},
                            art(cfg, "quantized_" + std::to_string(b)));
    }
    auto out = open_out(art(cfg, "quant_matrix.csv"));
    out << quantize::quant_matrix_csv(cfg.quant_bits, {row});
    return row;
}

std::string msr_cells(const nn::Model & model, const RankVector & ranks) {
    std::ostringstream o;
    o.precision(8);
    bool first = true;
    for (size_t l = 0; l < model.layers.size(); ++l) {
        const auto * dl = std::get_if<nn::DenseLayer>(&model.layers[l]);
        if (!first) o << ';';
        first = false;
        if (!dl) {
            o << "nan";
            continue;
        }
        int64_t full = std::min(dl->w.rows, dl->w.cols);
        if (ranks[l] >= full)
            o << 0.0;
        else
            o << regularizer::msr_value(dl->w, ranks[l]);
    }
    return o.str();
}

} // namespace

void run_train(const PipelineConfig & cfg) {
    prepare(cfg);
    dataio::Dataset ds = load_dataset(cfg);
    nn::Model model = train_impl(cfg, ds);
    emit({{"stage", "train"},
          {"checkpoint", art(cfg, "trained")},
          {"val_acc", nn::evaluate_accuracy(model, ds, ds.val)},
          {"test_acc", nn::evaluate_accuracy(model, ds, ds.test)}});
}

void run_select_rank(const PipelineConfig & cfg, const std::string & ckpt, bool single_config) {
    prepare(cfg);
    dataio::Dataset ds = load_dataset(cfg);
    nn::Model model = load_stage_model(cfg, ds, orelse(ckpt, art(cfg, "trained")));
    ranksel::BeamCandidate sel = select_impl(cfg, ds, model, single_config, art(cfg, "ranks"));
    emit({{"stage", "select_rank"},
          {"ranks", sel.r},
          {"ratio", sel.c},
          {"val_acc", sel.a},
          {"checkpoint", art(cfg, "ranks")}});
}

void run_regularize(const PipelineConfig & cfg, const std::string & ckpt,
                    const std::string & ranks) {
    prepare(cfg);
    dataio::Dataset ds = load_dataset(cfg);
    nn::Model model = load_stage_model(cfg, ds, orelse(ckpt, art(cfg, "trained")));
    RankVector r = persist::load_ranks(orelse(ranks, art(cfg, "ranks")));
    RegOutcome out = regularize_impl(cfg, ds, std::move(model), r);
    nn::write_train_log_csv(out.log, art(cfg, "reg_log.csv"));
    persist::save_model(out.model, {"regularized", cfg.seed, dataio::fingerprint(ds)},
                        art(cfg, "regularized"));
    persist::save_ranks(out.final_ranks, art(cfg, "ranks_final"));
    emit({{"stage", "regularize"},
          {"checkpoint", art(cfg, "regularized")},
          {"ranks", out.final_ranks},
          {"val_acc", nn::evaluate_accuracy(out.model, ds, ds.val)},
          {"msr", msr_cells(out.model, out.final_ranks)}});
}

void run_compress(const PipelineConfig & cfg, const std::string & ckpt,
                  const std::string & ranks) {
    prepare(cfg);
    dataio::Dataset ds = load_dataset(cfg);
    nn::Model model = load_stage_model(cfg, ds, orelse(ckpt, art(cfg, "regularized")));
    RankVector r = persist::load_ranks(orelse(ranks, default_ranks_path(cfg)));
    CompressOutcome out = compress_impl(cfg, ds, model, r);
    persist::save_model(out.fact, {"factorized", cfg.seed, dataio::fingerprint(ds)},
                        art(cfg, "factorized"));
    write_report_with_config(out.rep, cfg, art(cfg, "compress_report.json"));
    emit({{"stage", "compress"},
          {"checkpoint", art(cfg, "factorized")},
          {"ratio", out.rep.ratio},
          {"acc_before", out.rep.accuracy_before},
          {"acc_after", out.rep.accuracy_after},
          {"report", art(cfg, "compress_report.json")}});
}

void run_finetune(const PipelineConfig & cfg, const std::string & ckpt) {
    prepare(cfg);
    dataio::Dataset ds = load_dataset(cfg);
    nn::Model model = load_stage_model(cfg, ds, orelse(ckpt, art(cfg, "factorized")));
    auto log = finetune_impl(cfg, ds, model);
    nn::write_train_log_csv(log, art(cfg, "ft_log.csv"));
    persist::save_model(model, {"finetuned", cfg.seed, dataio::fingerprint(ds)},
                        art(cfg, "finetuned"));
    emit({{"stage", "finetune"},
          {"checkpoint", art(cfg, "finetuned")},
          {"val_acc", nn::evaluate_accuracy(model, ds, ds.val)},
          {"test_acc", nn::evaluate_accuracy(model, ds, ds.test)}});
}

double run_evaluate(const PipelineConfig & cfg, const std::string & ckpt,
                    const std::string & split) {
    prepare(cfg);
    dataio::Dataset ds = load_dataset(cfg);
    nn::Model model = load_stage_model(cfg, ds, orelse(ckpt, art(cfg, "finetuned")));
    const std::vector<int64_t> * idx = nullptr;
    if (split == "train")
        idx = &ds.train;
    else if (split == "val")
        idx = &ds.val;
    else if (split == "test" || split.empty())
        idx = &ds.test;
    else
        throw InvalidInput("split must be train, val or test");
    double acc = nn::evaluate_accuracy(model, ds, *idx);
    emit({{"stage", "evaluate"}, {"split", split.empty() ? "test" : split}, {"accuracy", acc}});
    return acc;
}

void run_quantize(const PipelineConfig & cfg, const std::string & ckpt) {
    prepare(cfg);
    dataio::Dataset ds = load_dataset(cfg);
    nn::Model model = load_stage_model(cfg, ds, orelse(ckpt, art(cfg, "finetuned")));
    std::ostringstream name;
    name << "c_d=" << cfg.search.c_d;
    quantize::QuantRow row = quantize_impl(cfg, ds, model, name.str());
    ordered_json j{{"stage", "quantize"}, {"csv", art(cfg, "quant_matrix.csv")}};
    for (size_t i = 0; i < cfg.quant_bits.size(); ++i) {
        std::string b = std::to_string(cfg.quant_bits[i]);
        j["acc_" + b] = row.accuracy[i];
        j["mem_mb_" + b] = row.memory_mb[i];
    }
    emit(j);
}

void run_bsr(const PipelineConfig & cfg) {
    prepare(cfg);
    Timer t;
    dataio::Dataset ds = load_dataset(cfg);
    nn::Model base = train_impl(cfg, ds);
    double acc_base = nn::evaluate_accuracy(base, ds, ds.test);
    ranksel::BeamCandidate sel = select_impl(cfg, ds, base, false, art(cfg, "ranks"));
    RegOutcome reg = regularize_impl(cfg, ds, base, sel.r);
    nn::write_train_log_csv(reg.log, art(cfg, "reg_log.csv"));
    persist::save_model(reg.model, {"regularized", cfg.seed, dataio::fingerprint(ds)},
                        art(cfg, "regularized"));
    persist::save_ranks(reg.final_ranks, art(cfg, "ranks_final"));
    CompressOutcome comp = compress_impl(cfg, ds, reg.model, reg.final_ranks);
    persist::save_model(comp.fact, {"factorized", cfg.seed, dataio::fingerprint(ds)},
                        art(cfg, "factorized"));
    write_report_with_config(comp.rep, cfg, art(cfg, "compress_report.json"));
    nn::Model ft = comp.fact;
    auto ft_log = finetune_impl(cfg, ds, ft);
    nn::write_train_log_csv(ft_log, art(cfg, "ft_log.csv"));
    persist::save_model(ft, {"finetuned", cfg.seed, dataio::fingerprint(ds)},
                        art(cfg, "finetuned"));
    double acc_final = nn::evaluate_accuracy(ft, ds, ds.test);
    compress::CompressionReport rep = comp.rep;
    rep.accuracy_before = acc_base;
    rep.accuracy_after = acc_final;
    write_report_with_config(rep, cfg, art(cfg, "report.json"));
    persist::save_report(rep, art(cfg, "report"));
    std::ostringstream setting;
    setting << "c_d=" << cfg.search.c_d;
    quantize_impl(cfg, ds, ft, setting.str());
    // one tradeoff-curve row per run, appended
    std::string curve = art(cfg, "curve.csv");
    bool fresh = !fs::exists(curve);
    std::ofstream cv(curve, std::ios::app);
    if (!cv) throw IoError("cannot write " + curve);
    cv.precision(12);
    if (fresh)
        cv << "c_d,tau,accuracy,mflops_exact,mflops_fused,mem_mb_32,mem_mb_16,mem_mb_8,mem_mb_4\n";
    cv << rep.c_d << ',' << rep.tau << ',' << rep.accuracy_after << ',' << rep.mflops_after_exact
       << ',' << rep.mflops_after_fused << ',' << rep.memory_mb_32 << ',' << rep.memory_mb_16
       << ',' << rep.memory_mb_8 << ',' << rep.memory_mb_4 << "\n";
    note("bsr pipeline done in " + std::to_string(t.secs()) + "s");
    emit({{"stage", "bsr"},
          {"ranks", reg.final_ranks},
          {"ratio", rep.ratio},
          {"accuracy_before", acc_base},
          {"accuracy_after", acc_final},
          {"report", art(cfg, "report.json")}});
}

void run_ablate(const PipelineConfig & cfg, const std::string & which_raw) {
    prepare(cfg);
    std::string which = which_raw;
    std::replace(which.begin(), which.end(), '-', '_');
    if (which != "rank_update" && which != "lambda")
        throw InvalidInput("ablate target must be 'rank_update' or 'lambda'");
    std::ostringstream csv;
    csv.precision(10);
    csv << "arm,seed,test_acc,ratio,ranks,msr\n";
    for (int rep = 0; rep < 3; ++rep) {
        PipelineConfig c = cfg;
        c.seed = cfg.seed + (uint64_t)rep;
        dataio::Dataset ds = load_dataset(c);
        Timer t;
        nn::Model base = nn::make_mlp(c.arch, phase_seed(c.seed, "init"));
        {
            nn::TrainConfig tc = c.base_train;
            tc.seed = phase_seed(c.seed, "base_train");
            nn::train(base, ds, tc);
        }
        auto shapes = compress::model_shapes(base);
        ranksel::SearchConfig scfg = c.search;
        scfg.seed = phase_seed(c.seed, "search");
        ranksel::FactorCache cache = ranksel::build_factor_cache(base);
        RankVector r0 = ranksel::mbs_search(base, ds, shapes, scfg, &cache).selected.r;
        note("ablate seed " + std::to_string(c.seed) + ": base ready in " +
             std::to_string(t.secs()) + "s, ranks [" + join_ranks(r0, ' ') + "]");
        uint64_t ft_seed = phase_seed(c.seed, "finetune");
        auto finish = [&](const nn::Model & regd, const RankVector & rr) {
            nn::Model fact = compress::factorize_model(regd, rr);
            nn::TrainConfig tc = c.ft_train;
            tc.seed = ft_seed;
            compress::finetune(fact, ds, tc);
            return nn::evaluate_accuracy(fact, ds, ds.test);
        };
        auto emit_row = [&](const std::string & arm, const nn::Model & regd, const RankVector & rr,
                            double acc) {
            csv << arm << ',' << c.seed << ',' << acc << ','
                << compress::compression_ratio(shapes, rr) << ',' << join_ranks(rr, ';') << ','
                << msr_cells(regd, rr) << "\n";
            note("ablate " + arm + " seed " + std::to_string(c.seed) +
                 ": acc " + std::to_string(acc));
        };
        if (which == "rank_update") {
            PipelineConfig c1 = c;
            c1.rank_update = "once";
            c1.lambda_mode = "scheduled";
            RegOutcome once = regularize_impl(c1, ds, base, r0);
            emit_row("once", once.model, once.final_ranks,
                     finish(once.model, once.final_ranks));
            // identical training run, so searching again on its weights gives
            // the before-decomposition arm for free
            ranksel::SearchConfig s2 = c.search;
            s2.seed = phase_seed(c.seed, "research_final");
            RankVector r1 = ranksel::mbs_search(once.model, ds, shapes, s2).selected.r;
            emit_row("before_decomposition", once.model, r1, finish(once.model, r1));
            PipelineConfig c2 = c;
            c2.rank_update = "multiple";
            c2.lambda_mode = "scheduled";
            RegOutcome mult = regularize_impl(c2, ds, base, r0);
            emit_row("multiple", mult.model, mult.final_ranks,
                     finish(mult.model, mult.final_ranks));
        } else {
            PipelineConfig c1 = c;
            c1.rank_update = "once";
            c1.lambda_mode = "scheduled";
            RegOutcome sch = regularize_impl(c1, ds, base, r0);
            emit_row("scheduled", sch.model, sch.final_ranks,
                     finish(sch.model, sch.final_ranks));
            PipelineConfig c2 = c;
            c2.rank_update = "once";
            c2.lambda_mode = "fixed";
            RegOutcome fix = regularize_impl(c2, ds, base, r0);
            emit_row("fixed", fix.model, fix.final_ranks, finish(fix.model, fix.final_ranks));
        }
    }
    std::string path = art(cfg, "ablate_" + which + ".csv");
    auto out = open_out(path);
    out << csv.str();
    emit({{"stage", "ablate"}, {"which", which}, {"csv", path}});
}

} // namespace bsr::cli
