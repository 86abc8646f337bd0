#include "skd/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace skd {

namespace fs = std::filesystem;

namespace {

constexpr int kProbeSamples = 1000;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void say(const CommandOptions& opt, const std::string& m) {
    if (opt.log) opt.log(m);
}

void phase(const CommandOptions& opt, const std::string& p) {
    if (opt.audit) opt.audit->set_phase(p);
}

// path as recorded in a report: relative when it lives under out_dir
std::string report_path(const fs::path& file, const fs::path& out_dir) {
    const auto rel = file.lexically_relative(out_dir);
    if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
    return file.generic_string();
}

ClassifierModel<Real> load_base(const ExperimentConfig& cfg) {
    const auto path = cfg.base_checkpoint_path();
    if (!fs::exists(path))
        throw std::runtime_error("base checkpoint " + path.string() + " not found (run pretrain first)");
    return load_classifier<Real>(path);
}

LabeledBatch subsample(const LabeledBatch& b, int count, Rng& rng) {
    if (count < 1 || count > b.size())
        throw std::invalid_argument("cannot take " + std::to_string(count) + " of " +
                                    std::to_string(b.size()) + " samples");
    std::vector<int> idx(static_cast<std::size_t>(b.size()));
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(static_cast<std::size_t>(count));
    std::sort(idx.begin(), idx.end());
    LabeledBatch out;
    out.images = Activation<Real>(Matrix<Real>(count, b.images.values.cols()), b.images.shape);
    out.labels.resize(count, b.labels.cols());
    for (int i = 0; i < count; ++i) {
        out.images.values.row(i) = b.images.values.row(idx[i]);
        out.labels.row(i) = b.labels.row(idx[i]);
        out.local_ids.push_back(b.local_ids[idx[i]]);
        out.global_ids.push_back(b.global_ids[idx[i]]);
    }
    return out;
}

void write_loss_curve(const fs::path& path, const std::vector<double>& losses) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "epoch,loss\n";
    out.precision(9);
    for (std::size_t i = 0; i < losses.size(); ++i) out << i + 1 << ',' << losses[i] << '\n';
}

}  // namespace

ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
    if (cfg.data_root.empty()) throw std::invalid_argument("data.root is not set");
    ExperimentData d{load_dataset_spec(cfg.data_root), {}};
    d.tasks = build_task_sequence(d.spec, cfg.num_incremental, cfg.class_order_seed);
    return d;
}

RunReport make_report(const ExperimentConfig& cfg, const std::string& suffix) {
    RunReport r;
    r.name = suffix.empty() ? cfg.name : cfg.name + "-" + suffix;
    r.seed = cfg.seed;
    r.config = cfg.snapshot();
    r.config_hash = snapshot_hash(r.config);
    return r;
}

std::vector<int> head_classes(const TaskSequence& tasks, int class_count, int head_size) {
    if (head_size == class_count) return tasks.class_order;
    for (int t = 0; t <= tasks.num_incremental(); ++t) {
        auto seen = tasks.seen_classes(t);
        if (static_cast<int>(seen.size()) == head_size) return seen;
    }
    throw std::invalid_argument("a head of " + std::to_string(head_size) +
                                " outputs matches no task boundary of this sequence");
}

PretrainOutcome cmd_pretrain(const ExperimentConfig& cfg, const CommandOptions& opt) {
    cfg.validate();
    const auto data = load_experiment_data(cfg);
    const auto classes = cfg.pretrain_all_classes ? data.tasks.class_order : data.tasks.base_classes;
    fs::create_directories(cfg.out_dir);
    cfg.save_file(cfg.out_dir / "pretrain_config.txt");

    const auto p = cfg.effective_pretrain();
    PretrainOutcome res{build_classifier<Real>(cfg.arch, static_cast<int>(classes.size()), data.spec.input,
                                               cfg.width, cfg.model_seed()),
                        make_report(cfg, "pretrain")};
    phase(opt, "pretrain");
    TaskStream train(data.spec, classes, Split::Train, p.seed, opt.audit);
    const auto t0 = std::chrono::steady_clock::now();
    const auto losses = train_supervised(res.model, train, p, opt.log);
    res.report.timing_seconds["pretrain"] = seconds_since(t0);

    phase(opt, "eval-pretrain");
    const auto val = load_task_data(data.spec, classes, Split::Val, 0, opt.audit);
    const double acc = top1_accuracy(res.model, val);
    res.report.add_task_point(acc, static_cast<int>(classes.size()));
    res.report.metrics["final_loss"] = losses.empty() ? 0.0 : losses.back();
    say(opt, "pretrain: top-1 " + std::to_string(acc) + "% over " + std::to_string(classes.size()) + " classes");

    const auto ckpt = cfg.base_checkpoint_path();
    if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
    save_checkpoint(ckpt, res.model);
    res.report.checkpoints.push_back(report_path(ckpt, cfg.out_dir));
    write_loss_curve(cfg.out_dir / "pretrain_trace.csv", losses);
    res.report.trace_files.push_back("pretrain_trace.csv");
    save_report(cfg.out_dir / "pretrain_report.json", res.report);
    return res;
}

DistillOutcome cmd_distill(const ExperimentConfig& cfg, const CommandOptions& opt) {
    cfg.validate();
    const auto data = load_experiment_data(cfg);
    auto teacher = load_base(cfg);
    const auto classes = head_classes(data.tasks, data.spec.class_count, teacher.num_classes());
    fs::create_directories(cfg.out_dir);
    cfg.save_file(cfg.out_dir / "distill_config.txt");

    auto s = cfg.effective_skd();
    s.trace_path = cfg.out_dir / "skd_trace.csv";
    phase(opt, "distill");
    const auto t0 = std::chrono::steady_clock::now();
    DistillOutcome res{train_skd(teacher, std::nullopt, s,
                                 [&](int epoch, const SkdTraceRow& row) {
                                     if ((epoch + 1) % 10 == 0 || epoch + 1 == s.epochs)
                                         say(opt, "skd epoch " + std::to_string(epoch + 1) + "/" +
                                                      std::to_string(s.epochs) + " L_imi " +
                                                      std::to_string(row.losses.imitate) + " L_cat " +
                                                      std::to_string(row.losses.category) + " L_div " +
                                                      std::to_string(row.losses.diversity) + " R " +
                                                      std::to_string(row.losses.rfeature));
                                 }),
                       make_report(cfg, "distill")};
    auto& report = res.report;
    report.timing_seconds["skd"] = seconds_since(t0);
    report.trace_files.push_back("skd_trace.csv");
    if (res.result.aborted) {
        report.complete = false;
        report.abort_reason = res.result.abort_reason;
    }

    phase(opt, "eval-distill");
    const auto val = load_task_data(data.spec, classes, Split::Val, 0, opt.audit);
    const double teacher_top1 = top1_accuracy(teacher, val);
    auto with_head = attach_teacher_head(res.result.student, teacher);
    const double student_top1 = top1_accuracy(with_head, val);
    report.add_task_point(teacher_top1, static_cast<int>(classes.size()));
    report.teacher_student_gap = teacher_top1 - student_top1;
    report.metrics["teacher_top1"] = teacher_top1;
    report.metrics["student_top1"] = student_top1;

    Rng probe = Rng::derive(cfg.seed, "distill-probe");
    auto pseudo = embed_pseudo(teacher, res.result.delegator, teacher, kProbeSamples, probe);
    report.metrics["label_coverage"] = label_coverage(pseudo.labels, teacher.num_classes());
    auto table = embed_real(teacher, val, val.size());
    table.append(pseudo);
    const auto align = centroid_alignment(table);
    report.metrics["centroid_alignment"] = align.fraction;
    say(opt, "distill: teacher " + std::to_string(teacher_top1) + "% student " + std::to_string(student_top1) +
                 "% coverage " + std::to_string(report.metrics["label_coverage"]) + " alignment " +
                 std::to_string(align.fraction));

    save_checkpoint(cfg.out_dir / "delegator.ckpt", res.result.delegator);
    save_checkpoint(cfg.out_dir / "student.ckpt", res.result.student);
    report.checkpoints = {"delegator.ckpt", "student.ckpt"};
    save_report(cfg.out_dir / "distill_report.json", report);
    return res;
}

RunReport cmd_cil(const ExperimentConfig& cfg, const fs::path& delegator_path, const CommandOptions& opt) {
    cfg.validate();
    const auto data = load_experiment_data(cfg);
    if (data.tasks.num_incremental() < 1) throw std::invalid_argument("cil needs data.num_incremental >= 1");
    auto base = load_base(cfg);
    if (base.num_classes() != static_cast<int>(data.tasks.base_classes.size()))
        throw std::invalid_argument("base checkpoint does not cover the base task");
    std::optional<Delegator<Real>> delegator;
    if (cfg.use_skd()) {
        if (!fs::exists(delegator_path))
            throw std::runtime_error("delegator checkpoint " + delegator_path.string() + " not found (run distill first)");
        delegator = load_delegator<Real>(delegator_path);
    }
    fs::create_directories(cfg.out_dir);
    cfg.save_file(cfg.out_dir / "cil_config.txt");

    RunReport report = make_report(cfg, "cil");
    phase(opt, "eval-task-0");
    report.add_task_point(top1_accuracy(base, load_task_data(data.spec, data.tasks.seen_classes(0), Split::Val, 0,
                                                             opt.audit)),
                          static_cast<int>(data.tasks.base_classes.size()));

    auto c = cfg.effective_cil();
    c.gamma_schedule.total_tasks = data.tasks.num_incremental();
    c.gamma_schedule.class_counts = gamma_class_counts(data.tasks);
    c.seed = Rng::derive(c.seed, "cil-task", 1).next();
    c.trace_path = cfg.out_dir / "cil_trace_task1.csv";
    phase(opt, "train-task-1");
    TaskStream stream(data.spec, data.tasks.task(1), Split::Train, c.seed, opt.audit);
    const auto t0 = std::chrono::steady_clock::now();
    auto step = train_cil_task(base, delegator ? &*delegator : nullptr, stream, c, 1);
    report.timing_seconds["cil_task1"] = seconds_since(t0);
    report.metrics["gamma_task1"] = step.gamma;
    report.trace_files.push_back("cil_trace_task1.csv");
    if (step.aborted) {
        report.complete = false;
        report.abort_reason = step.abort_reason;
    }

    phase(opt, "eval-task-1");
    const auto seen = data.tasks.seen_classes(1);
    const double acc = top1_accuracy(step.model, load_task_data(data.spec, seen, Split::Val, 0, opt.audit));
    report.add_task_point(acc, static_cast<int>(seen.size()));
    say(opt, "task1: top-1 " + std::to_string(acc) + "% over " + std::to_string(seen.size()) + " classes");
    save_checkpoint(cfg.out_dir / "model_task1.ckpt", step.model);
    report.checkpoints.push_back("model_task1.ckpt");
    save_report(cfg.out_dir / "cil_report.json", report);
    return report;
}

SequenceResult cmd_run(const ExperimentConfig& cfg, const CommandOptions& opt) {
    cfg.validate();
    const auto data = load_experiment_data(cfg);
    auto base = load_base(cfg);
    fs::create_directories(cfg.out_dir);
    cfg.save_file(cfg.out_dir / "config.txt");

    SequenceOptions so;
    so.use_skd = cfg.use_skd();
    so.out_dir = cfg.out_dir;
    so.audit = opt.audit;
    so.log = opt.log;
    const auto t0 = std::chrono::steady_clock::now();
    auto res = run_sequence(std::move(base), data.spec, data.tasks, cfg.effective_skd(), cfg.effective_cil(), so);
    const auto skeleton = make_report(cfg);
    res.report.name = skeleton.name;
    res.report.seed = skeleton.seed;
    res.report.config = skeleton.config;
    res.report.config_hash = skeleton.config_hash;
    res.report.timing_seconds["total"] = seconds_since(t0);
    save_report(cfg.out_dir / "report.json", res.report);
    say(opt, "average top-1 " + std::to_string(res.report.average_top1) + "%");
    return res;
}

EvalOutcome cmd_eval(const ExperimentConfig& cfg, const fs::path& checkpoint) {
    const auto data = load_experiment_data(cfg);
    auto model = load_classifier<Real>(checkpoint);
    EvalOutcome out;
    out.classes = head_classes(data.tasks, data.spec.class_count, model.num_classes());
    out.top1 = top1_accuracy(model, load_task_data(data.spec, out.classes, Split::Val));
    return out;
}

EmbeddingTable cmd_export_embeddings(const ExperimentConfig& cfg, const fs::path& checkpoint,
                                     const std::optional<fs::path>& delegator, int count,
                                     const fs::path& out_file) {
    if (count < 1) throw std::invalid_argument("embedding count must be >= 1");
    const auto data = load_experiment_data(cfg);
    auto model = load_classifier<Real>(checkpoint);
    const auto classes = head_classes(data.tasks, data.spec.class_count, model.num_classes());
    Rng rng = Rng::derive(cfg.seed, "embeddings");
    const auto val = subsample(load_task_data(data.spec, classes, Split::Val), count, rng);
    auto table = embed_real(model, val, count);
    if (delegator) {
        auto gen = load_delegator<Real>(*delegator);
        table.append(embed_pseudo(model, gen, model, count, rng));
    }
    write_embeddings(out_file, table);
    return table;
}

}  // namespace skd
