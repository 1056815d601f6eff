#include <deque>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bsr/cli.hpp"
#include "bsr/errors.hpp"

namespace {

using bsr::cli::PipelineConfig;

struct Common {
    std::string config;
    uint64_t seed = 0;
    int threads = 1;
    std::string out;
    double cd = 0.5, tau = 0.02, gamma = 0.5, lambda0 = 0.02, growth = 1.5;
    int beam = 5;
    int64_t step = 3, val_subset = 512;
    std::string lambda_mode, rank_update;
    std::vector<int> bits;
    int base_epochs = 0, reg_epochs = 0, ft_epochs = 0;
    std::map<std::string, CLI::Option *> opt;
};

void add_common(CLI::App * sub, Common & c) {
    c.opt["config"] = sub->add_option("--config", c.config, "JSON config file");
    c.opt["seed"] = sub->add_option("--seed", c.seed, "global seed");
    c.opt["threads"] = sub->add_option("--threads", c.threads, "worker threads for the kernels");
    c.opt["out"] = sub->add_option("--out", c.out, "output directory");
    c.opt["cd"] = sub->add_option("--cd", c.cd, "desired compression ratio");
    c.opt["tau"] = sub->add_option("--tau", c.tau, "acceptance band width below --cd");
    c.opt["beam"] = sub->add_option("--beam", c.beam, "beam width K");
    c.opt["step"] = sub->add_option("--step", c.step, "initial rank step s");
    c.opt["gamma"] = sub->add_option("--gamma", c.gamma, "step shrink factor on empty levels");
    c.opt["val_subset"] =
        sub->add_option("--val-subset", c.val_subset, "search validation subset (0 = full)");
    c.opt["lambda0"] = sub->add_option("--lambda0", c.lambda0, "initial penalty weight");
    c.opt["growth"] = sub->add_option("--growth", c.growth, "penalty growth per period");
    c.opt["lambda_mode"] = sub->add_option("--lambda-mode", c.lambda_mode, "scheduled or fixed")
                               ->check(CLI::IsMember({"scheduled", "fixed"}));
    c.opt["rank_update"] =
        sub->add_option("--rank-update", c.rank_update, "once, before_decomposition or multiple")
            ->check(CLI::IsMember({"once", "before_decomposition", "multiple"}));
    c.opt["bits"] = sub->add_option("--bits", c.bits, "quantization bit widths")->delimiter(',');
    c.opt["base_epochs"] = sub->add_option("--base-epochs", c.base_epochs, "baseline epochs");
    c.opt["reg_epochs"] = sub->add_option("--reg-epochs", c.reg_epochs, "regularized epochs");
    c.opt["ft_epochs"] = sub->add_option("--ft-epochs", c.ft_epochs, "fine-tune epochs");
}

PipelineConfig build(const Common & c) {
    PipelineConfig cfg =
        c.config.empty() ? bsr::cli::default_config() : bsr::cli::load_config(c.config);
    auto set = [&](const char * name) { return c.opt.at(name)->count() > 0; };
    if (set("seed")) cfg.seed = c.seed;
    if (set("threads")) cfg.threads = c.threads;
    if (set("out")) cfg.out_dir = c.out;
    if (set("cd")) cfg.search.c_d = c.cd;
    if (set("tau")) cfg.search.tau = c.tau;
    if (set("beam")) cfg.search.k = c.beam;
    if (set("step")) cfg.search.s = c.step;
    if (set("gamma")) cfg.search.gamma = c.gamma;
    if (set("val_subset")) cfg.search.val_subset = c.val_subset;
    if (set("lambda0")) cfg.reg.lambda0 = c.lambda0;
    if (set("growth")) cfg.reg.growth = c.growth;
    if (set("lambda_mode")) cfg.lambda_mode = c.lambda_mode;
    if (set("rank_update")) cfg.rank_update = c.rank_update;
    if (set("bits")) cfg.quant_bits = c.bits;
    if (set("base_epochs")) cfg.base_train.epochs = c.base_epochs;
    if (set("reg_epochs")) cfg.reg_train.epochs = c.reg_epochs;
    if (set("ft_epochs")) cfg.ft_train.epochs = c.ft_epochs;
    bsr::cli::validate(cfg);
    return cfg;
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"bsr: low-rank compression of dense classifiers under a ratio constraint"};
    app.require_subcommand(1);
    std::deque<Common> commons;
    auto common = [&](CLI::App * sub) -> Common & {
        Common & c = commons.emplace_back();
        add_common(sub, c);
        return c;
    };
    std::string ckpt, ranks, split = "test", which = "rank_update";
    bool single = false;

    CLI::App * train = app.add_subcommand("train", "train the dense baseline");
    Common & ct = common(train);
    train->callback([&] { bsr::cli::run_train(build(ct)); });

    CLI::App * sel = app.add_subcommand("select-rank", "search a rank vector in the ratio band");
    Common & cs = common(sel);
    sel->add_option("--ckpt", ckpt, "model checkpoint (default <out>/trained)");
    sel->add_flag("--single", single, "run one (s, K) configuration instead of the sweep");
    sel->callback([&] { bsr::cli::run_select_rank(build(cs), ckpt, single); });

    CLI::App * reg = app.add_subcommand("regularize", "retrain with the tail-ratio penalty");
    Common & cr = common(reg);
    reg->add_option("--ckpt", ckpt, "model checkpoint (default <out>/trained)");
    reg->add_option("--ranks", ranks, "rank checkpoint (default <out>/ranks)");
    reg->callback([&] { bsr::cli::run_regularize(build(cr), ckpt, ranks); });

    CLI::App * comp = app.add_subcommand("compress", "factorize at the selected ranks");
    Common & cc = common(comp);
    comp->add_option("--ckpt", ckpt, "model checkpoint (default <out>/regularized)");
    comp->add_option("--ranks", ranks, "rank checkpoint (default <out>/ranks_final)");
    comp->callback([&] { bsr::cli::run_compress(build(cc), ckpt, ranks); });

    CLI::App * ft = app.add_subcommand("finetune", "fine-tune the factorized model");
    Common & cf = common(ft);
    ft->add_option("--ckpt", ckpt, "model checkpoint (default <out>/factorized)");
    ft->callback([&] { bsr::cli::run_finetune(build(cf), ckpt); });

    CLI::App * ev = app.add_subcommand("evaluate", "accuracy of a checkpoint on a split");
    Common & ce = common(ev);
    ev->add_option("--ckpt", ckpt, "model checkpoint (default <out>/finetuned)");
    ev->add_option("--split", split, "train, val or test")
        ->check(CLI::IsMember({"train", "val", "test"}));
    ev->callback([&] { bsr::cli::run_evaluate(build(ce), ckpt, split); });

    CLI::App * qt = app.add_subcommand("quantize", "integer-code the weights at several widths");
    Common & cq = common(qt);
    qt->add_option("--ckpt", ckpt, "model checkpoint (default <out>/finetuned)");
    qt->callback([&] { bsr::cli::run_quantize(build(cq), ckpt); });

    CLI::App * bsr_cmd = app.add_subcommand("bsr", "full pipeline: train through quantize");
    Common & cb = common(bsr_cmd);
    bsr_cmd->callback([&] { bsr::cli::run_bsr(build(cb)); });

    CLI::App * ab = app.add_subcommand("ablate", "rank-update or lambda-schedule comparison");
    Common & ca = common(ab);
    ab->add_option("--which", which, "rank_update or lambda")
        ->check(CLI::IsMember({"rank_update", "rank-update", "lambda"}));
    ab->callback([&] { bsr::cli::run_ablate(build(ca), which); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const bsr::SearchFailure & e) {
        std::cerr << "search failure: " << e.what() << " (closest ratio " << e.best_ratio
                  << " at accuracy " << e.best_accuracy << ")\n";
        return 3;
    } catch (const bsr::InvalidInput & e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return 2;
    } catch (const bsr::FormatError & e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const bsr::IoError & e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
