#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "skd/experiment.hpp"
#include "skd/plot.hpp"

#include <fstream>
#include <set>
#include <sstream>

using namespace skd;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("skd_test_config_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

const fs::path& tiny_root() {
    static const fs::path root = [] {
        auto r = temp_dir("data");
        DeskDatasetOptions o;
        o.train_per_class = 20;
        o.val_per_class = 6;
        o.seed = 7;
        make_desk_dataset(r, o);
        return r;
    }();
    return root;
}

ExperimentConfig tiny_config(const fs::path& out) {
    auto c = ExperimentConfig::desk();
    c.data_root = tiny_root();
    c.out_dir = out;
    c.seed = 11;
    c.width = 4;
    c.pretrain.epochs = 2;
    c.pretrain.lr_drops = {1};
    c.skd.epochs = 1;
    c.skd.steps_per_epoch = 2;
    c.skd.imitate_steps_per_explore = 2;
    c.skd.pseudo_batch_size = 8;
    c.skd.latent_dim = 8;
    c.skd.delegator_widths = {8, 8, 4};
    c.cil.epochs = 2;
    c.cil.lr_drops = {1};
    c.cil.batch_size_real = 16;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("cifar100 preset carries the full-scale hyperparameters") {
    const auto c = ExperimentConfig::cifar100();
    CHECK(c.skd.imitate_lr == 0.1);
    CHECK(c.skd.explore_lr == 1e-3);
    CHECK(c.skd.lr_drop_every == 100);
    CHECK(c.skd.lr_drop_factor == 10.0);
    CHECK(c.skd.pseudo_batch_size == 256);
    CHECK(c.skd.imitate_steps_per_explore == 5);
    CHECK(c.cil.epochs == 160);
    CHECK(c.cil.lr == 0.1);
    CHECK(c.cil.lr_drops == std::vector<int>{80, 120});
    CHECK(c.cil.gamma_schedule.beta == 5.0);
    CHECK(c.skd.explore_weights.lambda_exp == 1.0);
    CHECK(c.class_order_seed == 1993);
    CHECK(c.arch == arch::kResNet32);
    CHECK_NOTHROW(c.validate());
    CHECK_NOTHROW(ExperimentConfig::desk().validate());
}

TEST_CASE("text round trip covers every key") {
    auto c = ExperimentConfig::desk();
    c.skd.explore_weights.lambda_exp = 20.0;
    c.cil.fixed_gamma = 0.1;
    c.skd.delegator_widths = {5, 6, 7};
    c.flags.no_cat = true;
    c.cil.pseudo_generation_mode = Mode::BatchStats;
    c.skd.rfeature_source = StatisticsSource::Student;
    const auto back = parse_config_text(c.to_text());
    CHECK(back.snapshot() == c.snapshot());
    CHECK(back.skd.explore_weights.lambda_exp == 20.0);
    CHECK(back.cil.fixed_gamma == 0.1);
    CHECK(back.skd.delegator_widths == std::vector<int>{5, 6, 7});
    CHECK(back.cil.pseudo_generation_mode == Mode::BatchStats);

    const auto snap = c.snapshot();
    CHECK(snap.size() == ExperimentConfig::keys().size());
    std::set<std::string> unique(ExperimentConfig::keys().begin(), ExperimentConfig::keys().end());
    CHECK(unique.size() == ExperimentConfig::keys().size());
    for (const auto& k : ExperimentConfig::keys()) CHECK(snap.at(k) == c.get(k));
}

TEST_CASE("overrides, presets and errors") {
    auto c = ExperimentConfig::cifar100();
    c.apply_override("skd.imitate_lr = 0.25");
    CHECK(c.skd.imitate_lr == 0.25);
    c.set("cil.lr_drops", "3, 9");
    CHECK(c.cil.lr_drops == std::vector<int>{3, 9});
    c.set("flags.no_alw", "yes");
    CHECK(c.flags.no_alw);

    CHECK_THROWS_AS(c.set("skd.nope", "1"), std::invalid_argument);
    CHECK_THROWS_AS(c.set("skd.epochs", "ten"), std::invalid_argument);
    CHECK_THROWS_AS(c.set("skd.epochs", "3.5"), std::invalid_argument);
    CHECK_THROWS_AS(c.set("cil.lr", "0.1x"), std::invalid_argument);
    CHECK_THROWS_AS(c.set("flags.no_skd", "maybe"), std::invalid_argument);
    CHECK_THROWS_AS(c.apply_override("skd.epochs"), std::invalid_argument);

    const auto d = parse_config_text("# desk run\npreset = desk\nskd.epochs = 3  # short\n\nrun.name = x\n");
    CHECK(d.arch == arch::kDeskCnn);
    CHECK(d.skd.epochs == 3);
    CHECK(d.name == "x");
    CHECK_THROWS_AS(parse_config_text("skd.epochs = 3\npreset = desk\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("preset = huge\n"), std::invalid_argument);

    const auto dir = temp_dir("file");
    d.save_file(dir / "c.txt");
    ExperimentConfig e;
    e.load_file(dir / "c.txt");
    CHECK(e.snapshot() == d.snapshot());
    CHECK_THROWS_AS(e.load_file(dir / "missing.txt"), std::runtime_error);

    auto bad = ExperimentConfig::desk();
    bad.cil.lr_drops = {7, 5};
    CHECK_THROWS(bad.validate());
    bad = ExperimentConfig::desk();
    bad.arch = "vgg";
    CHECK_THROWS(bad.validate());
}

TEST_CASE("ablation flags reach the stage configs independently") {
    const auto base = ExperimentConfig::desk();
    const auto s0 = base.effective_skd();
    const auto c0 = base.effective_cil();
    CHECK(s0.explore_weights.use_cat);
    CHECK(s0.explore_weights.use_div);
    CHECK(s0.explore_weights.use_rfeature);
    CHECK(s0.helper_bn);
    CHECK_FALSE(s0.explore_updates_delegator_only);
    CHECK(c0.adaptive_gamma);
    CHECK(c0.use_pseudo);

    const std::vector<std::string> flags{"no_skd", "no_alw", "no_cat", "no_div",
                                         "no_rfeature", "no_helper_bn", "explore_updates_delegator_only"};
    for (unsigned mask = 0; mask < (1u << flags.size()); ++mask) {
        auto c = base;
        for (std::size_t i = 0; i < flags.size(); ++i) c.set("flags." + flags[i], (mask >> i) & 1 ? "true" : "false");
        CAPTURE(mask);
        REQUIRE_NOTHROW(c.validate());
        const auto s = c.effective_skd();
        const auto l = c.effective_cil();
        CHECK(l.use_pseudo == !(mask & 1));
        CHECK(l.adaptive_gamma == !(mask & 2));
        CHECK(s.explore_weights.use_cat == !(mask & 4));
        CHECK(s.explore_weights.use_div == !(mask & 8));
        CHECK(s.explore_weights.use_rfeature == !(mask & 16));
        CHECK(s.helper_bn == !(mask & 32));
        CHECK(s.explore_updates_delegator_only == bool(mask & 64));
        CHECK(s.seed == s0.seed);
    }
}

TEST_CASE("seeds derive from the run seed") {
    auto a = ExperimentConfig::desk();
    auto b = a;
    b.seed = 1;
    CHECK(a.effective_skd().seed != b.effective_skd().seed);
    CHECK(a.effective_cil().seed != b.effective_cil().seed);
    CHECK(a.model_seed() != b.model_seed());
    CHECK(a.effective_skd().seed != a.effective_cil().seed);
}

TEST_CASE("head classes") {
    const auto t = build_task_sequence(10, 2, 3);
    CHECK(head_classes(t, 10, 5) == t.base_classes);
    CHECK(head_classes(t, 10, 8) == t.seen_classes(1));
    CHECK(head_classes(t, 10, 10) == t.class_order);
    CHECK_THROWS_AS(head_classes(t, 10, 6), std::invalid_argument);
}

TEST_CASE("svg charts") {
    const auto svg = line_chart_svg({{"a<b", {0, 1, 2}, {3, 1, 2}}, {"c", {0, 1}, {5, 5}}}, "t", "x", "y");
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("a&lt;b") != std::string::npos);
    std::size_t lines = 0;
    for (auto p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++lines;
    CHECK(lines == 2);
    CHECK_THROWS_AS(line_chart_svg({{"r", {0, 1}, {1}}}, "t", "x", "y"), std::invalid_argument);
    CHECK_THROWS_AS(cmd_plot({}, temp_dir("plot_empty")), std::invalid_argument);

    const auto dir = temp_dir("plot_bad");
    std::ofstream(dir / "r.json") << "{\"name\": ";
    CHECK_THROWS(cmd_plot({dir / "r.json"}, dir / "out"));
}

TEST_CASE("pipeline commands on a tiny dataset") {
    const auto out = temp_dir("run");
    auto cfg = tiny_config(out);
    AccessAudit audit;
    CommandOptions opt;
    opt.audit = &audit;

    const auto pre = cmd_pretrain(cfg, opt);
    CHECK(pre.model.num_classes() == 5);
    CHECK(fs::exists(out / "base.ckpt"));
    CHECK(fs::exists(out / "pretrain_report.json"));
    CHECK(pre.report.per_task_top1.size() == 1);
    CHECK_NOTHROW(pre.report.validate());
    {
        auto again_cfg = cfg;
        again_cfg.out_dir = temp_dir("run_again");
        const auto again = cmd_pretrain(again_cfg, {});
        CHECK(again.report.per_task_top1 == pre.report.per_task_top1);
        CHECK(again.report.metrics == pre.report.metrics);
    }

    const auto dis = cmd_distill(cfg, opt);
    CHECK(dis.report.teacher_student_gap.has_value());
    CHECK(dis.report.metrics.count("label_coverage") == 1);
    CHECK(dis.report.metrics.count("centroid_alignment") == 1);
    CHECK(fs::exists(out / "delegator.ckpt"));
    CHECK(fs::exists(out / "skd_trace.csv"));

    const auto c1 = cmd_cil(cfg, out / "delegator.ckpt", opt);
    CHECK(c1.per_task_top1.size() == 2);
    CHECK(c1.seen_classes == std::vector<int>{5, 8});
    CHECK(fs::exists(out / "model_task1.ckpt"));
    CHECK(cmd_eval(cfg, out / "model_task1.ckpt").classes.size() == 8);
    CHECK(cmd_eval(cfg, out / "model_task1.ckpt").top1 == doctest::Approx(c1.per_task_top1[1]));

    audit.clear();
    const auto res = cmd_run(cfg, opt);
    const auto& r = res.report;
    CHECK(r.per_task_top1.size() == 3);
    CHECK(r.name == "desk");
    CHECK(r.config == cfg.snapshot());
    CHECK_NOTHROW(r.validate());
    const auto data = load_experiment_data(cfg);
    for (int n = 1; n <= 2; ++n) {
        const auto old = data.tasks.seen_classes(n - 1);
        const auto phase = "train-task-" + std::to_string(n);
        CHECK(audit.reads_of(old, Split::Train, phase).empty());
        CHECK(audit.reads_of(old, Split::Val, phase).empty());
    }

    // the run directory alone regenerates the report and plots
    CHECK(parse_config_text(slurp(out / "config.txt")).snapshot() == r.config);
    const auto loaded = load_report(out / "report.json");
    CHECK(same_results(loaded, r));
    for (const auto& f : r.checkpoints) CHECK(fs::exists(out / f));
    for (const auto& f : r.trace_files) CHECK(fs::exists(out / f));
    const auto plots = cmd_plot({out / "report.json", out / "pretrain_report.json"}, out / "plots");
    CHECK(plots.size() == 1 + r.trace_files.size() + 1);
    CHECK(slurp(out / "plots" / "accuracy.svg").find(">desk-pretrain<") != std::string::npos);

    const auto table = cmd_export_embeddings(cfg, out / "model_task2.ckpt", out / "delegator_task2.ckpt", 12,
                                             out / "emb.csv");
    CHECK(table.rows() == 24);
    std::set<int> labels(table.labels.begin(), table.labels.begin() + 12);
    CHECK(labels.size() > 1);
    CHECK(read_embeddings(out / "emb.csv").labels == table.labels);

    auto no_base = cfg;
    no_base.base_checkpoint = out / "absent.ckpt";
    CHECK_THROWS_AS(cmd_run(no_base, {}), std::runtime_error);
    auto no_data = cfg;
    no_data.data_root = out / "absent";
    CHECK_THROWS(cmd_pretrain(no_data, {}));
}

TEST_CASE("real-data-only pipeline skips the delegator") {
    const auto out = temp_dir("noskd");
    auto cfg = tiny_config(out);
    cfg.flags.no_skd = true;
    cfg.flags.no_alw = true;
    cmd_pretrain(cfg, {});
    const auto c1 = cmd_cil(cfg, out / "never.ckpt", {});
    CHECK(c1.metrics.at("gamma_task1") == 1.0);
    const auto res = cmd_run(cfg, {});
    CHECK_FALSE(res.delegator.has_value());
    CHECK_FALSE(res.report.teacher_student_gap.has_value());
    for (const auto& f : res.report.checkpoints) CHECK(f.find("delegator") == std::string::npos);
}
