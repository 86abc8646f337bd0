// skd: base training, delegator training, incremental tasks, evaluation and plots.

#include "CLI11.hpp"
#include "skd/experiment.hpp"
#include "skd/plot.hpp"

#include <iostream>

namespace fs = std::filesystem;
using namespace skd;

namespace {

struct ConfigArgs {
    std::string preset = "cifar100";
    std::string config_file;
    std::vector<std::string> overrides;
    std::string out;
    std::optional<std::uint64_t> seed;
    AblationFlags flags;
    bool quiet = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("--preset", preset, "Starting values: cifar100 or desk")->check(CLI::IsMember({"cifar100", "desk"}));
        cmd->add_option("--config", config_file, "Config file (key = value lines)")->check(CLI::ExistingFile);
        cmd->add_option("--set", overrides, "Override key=value (repeatable)");
        cmd->add_option("--out", out, "Output directory (run.out_dir)");
        cmd->add_option("--seed", seed, "Run seed (run.seed)");
        cmd->add_flag("--no-skd", flags.no_skd, "Real data only during incremental tasks");
        cmd->add_flag("--no-alw", flags.no_alw, "Fixed classification weight");
        cmd->add_flag("--no-cat", flags.no_cat, "Drop the category term");
        cmd->add_flag("--no-div", flags.no_div, "Drop the diversity term");
        cmd->add_flag("--no-rfeature", flags.no_rfeature, "Drop the feature-statistic term");
        cmd->add_flag("--no-helper-bn", flags.no_helper_bn, "Bypass the delegator's output normalization");
        cmd->add_flag("--explore-delegator-only", flags.explore_updates_delegator_only,
                      "Explore steps update the delegator only");
        cmd->add_flag("-q,--quiet", quiet, "No progress lines");
    }

    ExperimentConfig resolve() const {
        auto cfg = ExperimentConfig::preset(preset);
        if (!config_file.empty()) cfg.load_file(config_file);
        for (const auto& o : overrides) cfg.apply_override(o);
        if (!out.empty()) cfg.out_dir = out;
        if (seed) cfg.seed = *seed;
        auto& f = cfg.flags;
        f.no_skd |= flags.no_skd;
        f.no_alw |= flags.no_alw;
        f.no_cat |= flags.no_cat;
        f.no_div |= flags.no_div;
        f.no_rfeature |= flags.no_rfeature;
        f.no_helper_bn |= flags.no_helper_bn;
        f.explore_updates_delegator_only |= flags.explore_updates_delegator_only;
        return cfg;
    }

    CommandOptions options() const {
        CommandOptions o;
        if (!quiet) o.log = [](const std::string& m) { std::cerr << m << '\n'; };
        return o;
    }
};

void print_summary(const RunReport& r) {
    std::cout << r.name << ": top-1";
    for (std::size_t i = 0; i < r.per_task_top1.size(); ++i)
        std::cout << ' ' << r.per_task_top1[i] << "% (" << r.seen_classes[i] << ")";
    std::cout << "  average " << r.average_top1 << "%";
    if (r.teacher_student_gap) std::cout << "  gap " << *r.teacher_student_gap;
    if (!r.complete) std::cout << "  ABORTED: " << r.abort_reason;
    std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Self-distilled delegators for exemplar-free class-incremental learning"};
    app.require_subcommand(1);

    ConfigArgs pretrain_args, distill_args, cil_args, run_args, eval_args, emb_args, defaults_args;

    auto* pretrain = app.add_subcommand("pretrain", "Train the base model");
    pretrain_args.attach(pretrain);

    auto* distill = app.add_subcommand("distill", "Train a delegator against the base model");
    distill_args.attach(distill);

    auto* cil = app.add_subcommand("cil", "First incremental task from the base model and a delegator");
    cil_args.attach(cil);
    std::string cil_delegator;
    cil->add_option("--delegator", cil_delegator, "Delegator checkpoint (default <out>/delegator.ckpt)");

    auto* run = app.add_subcommand("run", "Full sequence: delegator and incremental training per task");
    run_args.attach(run);

    auto* eval = app.add_subcommand("eval", "Validation top-1 of a checkpoint");
    eval_args.attach(eval);
    std::string eval_ckpt;
    eval->add_option("checkpoint", eval_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);

    auto* emb = app.add_subcommand("export-embeddings", "Feature table of real and pseudo samples");
    emb_args.attach(emb);
    std::string emb_ckpt, emb_delegator, emb_file;
    int emb_count = 500;
    emb->add_option("--checkpoint", emb_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
    emb->add_option("--delegator", emb_delegator, "Delegator checkpoint for pseudo rows")->check(CLI::ExistingFile);
    emb->add_option("--count", emb_count, "Rows per source");
    emb->add_option("--file", emb_file, "Output CSV (default <out>/embeddings.csv)");

    auto* plot = app.add_subcommand("plot", "SVG charts from run reports");
    std::vector<std::string> plot_reports;
    std::string plot_out = "plots";
    plot->add_option("reports", plot_reports, "Report files")->required()->check(CLI::ExistingFile);
    plot->add_option("--out", plot_out, "Output directory");

    auto* defaults = app.add_subcommand("defaults", "Print every config key with its value");
    defaults_args.attach(defaults);

    auto* desk = app.add_subcommand("make-desk-data", "Write the procedural 10-class digit dataset");
    DeskDatasetOptions desk_opt;
    std::string desk_out = "data/desk";
    desk->add_option("--out", desk_out, "Dataset root");
    desk->add_option("--train-per-class", desk_opt.train_per_class);
    desk->add_option("--val-per-class", desk_opt.val_per_class);
    desk->add_option("--side", desk_opt.side);
    desk->add_option("--seed", desk_opt.seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*pretrain) {
            print_summary(cmd_pretrain(pretrain_args.resolve(), pretrain_args.options()).report);
        } else if (*distill) {
            print_summary(cmd_distill(distill_args.resolve(), distill_args.options()).report);
        } else if (*cil) {
            const auto cfg = cil_args.resolve();
            const fs::path d = cil_delegator.empty() ? cfg.out_dir / "delegator.ckpt" : fs::path(cil_delegator);
            print_summary(cmd_cil(cfg, d, cil_args.options()));
        } else if (*run) {
            const auto res = cmd_run(run_args.resolve(), run_args.options());
            print_summary(res.report);
            if (!res.report.complete) return 3;
        } else if (*eval) {
            const auto r = cmd_eval(eval_args.resolve(), eval_ckpt);
            std::cout << "top-1 " << r.top1 << "% over " << r.classes.size() << " classes\n";
        } else if (*emb) {
            const auto cfg = emb_args.resolve();
            const fs::path file = emb_file.empty() ? cfg.out_dir / "embeddings.csv" : fs::path(emb_file);
            if (file.has_parent_path()) fs::create_directories(file.parent_path());
            std::optional<fs::path> d;
            if (!emb_delegator.empty()) d = emb_delegator;
            const auto t = cmd_export_embeddings(cfg, emb_ckpt, d, emb_count, file);
            std::cout << "wrote " << t.rows() << " rows to " << file.string() << '\n';
        } else if (*plot) {
            std::vector<fs::path> paths(plot_reports.begin(), plot_reports.end());
            for (const auto& p : cmd_plot(paths, plot_out)) std::cout << p.string() << '\n';
        } else if (*defaults) {
            const auto cfg = defaults_args.resolve();
            cfg.validate();
            std::cout << cfg.to_text();
        } else if (*desk) {
            const auto spec = make_desk_dataset(desk_out, desk_opt);
            std::cout << "wrote " << spec.class_count << " classes to " << desk_out << '\n';
        }
    } catch (const std::exception& e) {
        std::cerr << "skd: error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
