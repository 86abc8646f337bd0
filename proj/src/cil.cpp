#include "skd/cil.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace skd {

namespace fs = std::filesystem;

namespace {

void check_drops(const std::vector<int>& drops, int epochs, const char* what) {
    for (std::size_t i = 0; i < drops.size(); ++i) {
        if (i > 0 && drops[i] <= drops[i - 1])
            throw std::invalid_argument(std::string(what) + " lr drops must be strictly increasing");
        if (drops[i] >= epochs && epochs > 0)
            throw std::invalid_argument(std::string(what) + " lr drop at epoch " +
                                        std::to_string(drops[i]) + " is past the last epoch");
    }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void SupervisedConfig::validate() const {
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (!(lr > 0)) throw std::invalid_argument("lr must be positive");
    if (batch_size < 2) throw std::invalid_argument("batch size must be >= 2");
    check_drops(lr_drops, epochs, "supervised");
}

void CilTrainConfig::validate() const {
    if (epochs < 0) throw std::invalid_argument("cil epochs must be >= 0");
    if (!(lr >= 0)) throw std::invalid_argument("cil lr must be >= 0");
    if (batch_size_real < 1) throw std::invalid_argument("cil batch size must be >= 1");
    if (!(fixed_gamma >= 0)) throw std::invalid_argument("fixed gamma must be >= 0");
    if (divergence_patience < 1) throw std::invalid_argument("divergence_patience must be >= 1");
    check_drops(lr_drops, epochs, "cil");
}

std::vector<double> train_supervised(ClassifierModel<Real>& model, TaskStream& train,
                                     const SupervisedConfig& cfg, const LogFn& log) {
    cfg.validate();
    if (static_cast<int>(train.classes().size()) != model.num_classes())
        throw std::invalid_argument("stream has " + std::to_string(train.classes().size()) +
                                    " classes, model head has " +
                                    std::to_string(model.num_classes()));
    model.set_requires_grad(true);
    Sgd<Real> opt(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay);
    std::vector<double> losses;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.set_lr(milestone_decay(cfg.lr, epoch, cfg.lr_drops, cfg.lr_drop_factor));
        train.start_epoch(epoch);
        LabeledBatch b;
        double sum = 0;
        long n = 0;
        while (train.next(cfg.batch_size, b)) {
            if (b.size() < 2) continue;  // batch statistics need two samples
            opt.zero_grad();
            const auto logits = model.forward(b.images, Mode::Train);
            const auto ce = cross_entropy_grad(logits.values, b.labels);
            if (!std::isfinite(ce.value)) throw std::runtime_error("non-finite supervised loss");
            model.backward_features(model.backward_head(Activation<Real>(ce.grad, logits.shape)));
            opt.step();
            sum += ce.value * b.size();
            n += b.size();
        }
        losses.push_back(n > 0 ? sum / static_cast<double>(n) : 0.0);
        if (log) log("pretrain epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) +
                     " loss " + std::to_string(losses.back()));
    }
    return losses;
}

PseudoBatch make_pseudo_batch(Delegator<Real>& delegator, ClassifierModel<Real>& teacher, int count,
                              Rng& rng, Mode generation_mode) {
    if (count < 1) throw std::invalid_argument("pseudo batch needs at least one sample");
    if (generation_mode == Mode::Train)
        throw std::invalid_argument("pseudo generation must not update the delegator");
    const auto z = sample_latent<Real>(count, delegator.latent_dim(), rng);
    PseudoBatch p{delegator.forward(z, generation_mode), {}};
    p.labels = pseudo_label(teacher.predict(p.images));
    return p;
}

MixedBatch mix_batch(const PseudoBatch& pseudo, const LabeledBatch& real, int old_k, int new_k) {
    if (pseudo.size() != real.size())
        throw std::invalid_argument("pseudo batch has " + std::to_string(pseudo.size()) +
                                    " rows, real batch " + std::to_string(real.size()));
    if (pseudo.labels.cols() != old_k)
        throw std::invalid_argument("pseudo labels span " + std::to_string(pseudo.labels.cols()) +
                                    " classes, expected " + std::to_string(old_k));
    if (pseudo.images.shape != real.images.shape)
        throw std::invalid_argument("pseudo and real image shapes differ");
    MixedBatch m = real_only_batch(real, old_k, new_k);
    const int b = pseudo.size();
    Matrix<Real> images(2 * b, real.images.shape.size());
    images.topRows(b) = pseudo.images.values;
    images.bottomRows(b) = m.images.values;
    Matrix<Real> labels = Matrix<Real>::Zero(2 * b, old_k + new_k);
    labels.topLeftCorner(b, old_k) = pseudo.labels;
    labels.bottomRows(b) = m.labels;
    m.images = Activation<Real>(std::move(images), real.images.shape);
    m.labels = std::move(labels);
    m.pseudo_rows = b;
    return m;
}

MixedBatch real_only_batch(const LabeledBatch& real, int old_k, int new_k) {
    if (real.labels.cols() != new_k)
        throw std::invalid_argument("real labels span " + std::to_string(real.labels.cols()) +
                                    " classes, expected " + std::to_string(new_k));
    MixedBatch m;
    m.images = real.images;
    m.labels = Matrix<Real>::Zero(real.size(), old_k + new_k);
    m.labels.rightCols(new_k) = real.labels;
    m.real_rows = real.size();
    return m;
}

CilTaskResult train_cil_task(const ClassifierModel<Real>& old_model, Delegator<Real>* delegator,
                             TaskStream& new_data, const CilTrainConfig& cfg, int task_index) {
    cfg.validate();
    if (cfg.use_pseudo && delegator == nullptr)
        throw std::invalid_argument("pseudo rehearsal requested without a delegator");
    const int old_k = old_model.num_classes();
    const int new_k = static_cast<int>(new_data.classes().size());
    const double gamma =
        cfg.adaptive_gamma ? adaptive_gamma(cfg.gamma_schedule, task_index) : cfg.fixed_gamma;

    ClassifierModel<Real> old = old_model;
    old.set_requires_grad(false);
    CilTaskResult r{.model = extend_head(old_model, {old_k, new_k},
                                Rng::derive(cfg.seed, "head-extension", static_cast<std::uint64_t>(task_index)).next())};
    r.gamma = gamma;
    auto& model = r.model;
    model.set_requires_grad(true);
    Sgd<Real> opt(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay);
    Rng rng = Rng::derive(cfg.seed, "cil-pseudo", static_cast<std::uint64_t>(task_index));

    long step = 0;
    int consecutive = 0;
    for (int epoch = 0; epoch < cfg.epochs && !r.aborted; ++epoch) {
        opt.set_lr(milestone_decay(cfg.lr, epoch, cfg.lr_drops, cfg.lr_drop_factor));
        new_data.start_epoch(epoch);
        LabeledBatch real;
        while (new_data.next(cfg.batch_size_real, real)) {
            MixedBatch batch =
                cfg.use_pseudo
                    ? mix_batch(make_pseudo_batch(*delegator, old, real.size(), rng,
                                                  cfg.pseudo_generation_mode),
                                real, old_k, new_k)
                    : real_only_batch(real, old_k, new_k);
            if (batch.images.batch() < 2) continue;  // batch statistics need two samples

            opt.zero_grad();
            const auto f_old = old.features(batch.images, Mode::Eval);
            const auto f_new = model.features(batch.images, Mode::Train);
            const auto logits = model.head_forward(f_new, Mode::Train);
            const auto cls = cross_entropy_grad(logits.values, batch.labels);
            const auto fc = feature_cosine_discrepancy_grad(f_old.values, f_new.values);
            CilTraceRow row{step++, epoch, cls.value, fc.value, gamma,
                            cil_total(gamma, cls.value, fc.value)};
            if (!std::isfinite(row.total)) {
                ++r.skipped_steps;
                if (++consecutive >= cfg.divergence_patience) {
                    r.aborted = true;
                    r.abort_reason = "non-finite incremental loss for " +
                                     std::to_string(consecutive) + " consecutive steps";
                    break;
                }
                continue;
            }
            consecutive = 0;
            const Matrix<Real> d_logits = static_cast<Real>(gamma) * cls.grad;
            auto d_feat = model.backward_head(Activation<Real>(d_logits, logits.shape));
            d_feat.values += fc.grad_b;
            model.backward_features(d_feat);
            opt.step();
            r.pseudo_samples += batch.pseudo_rows;
            r.real_samples += batch.real_rows;
            r.trace.push_back(row);
        }
    }
    if (!cfg.trace_path.empty()) write_cil_trace(cfg.trace_path, r.trace);
    return r;
}

void write_cil_trace(const fs::path& path, const std::vector<CilTraceRow>& rows) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "step,epoch,L_cls,L_fc,gamma,total\n";
    out.precision(9);
    for (const auto& r : rows)
        out << r.step << ',' << r.epoch << ',' << r.classification << ',' << r.consolidation << ','
            << r.gamma << ',' << r.total << '\n';
}

std::vector<int> gamma_class_counts(const TaskSequence& tasks) {
    std::vector<int> counts;
    for (int t = 1; t <= tasks.num_incremental(); ++t)
        counts.push_back(static_cast<int>(tasks.task(t).size()));
    if (!counts.empty()) counts[0] += static_cast<int>(tasks.base_classes.size());
    return counts;
}

SequenceResult run_sequence(ClassifierModel<Real> base_model, const DatasetSpec& spec,
                            const TaskSequence& tasks, const SkdTrainConfig& skd_cfg,
                            const CilTrainConfig& cil_cfg, const SequenceOptions& opt) {
    if (base_model.num_classes() != static_cast<int>(tasks.base_classes.size()))
        throw std::invalid_argument("base model head has " + std::to_string(base_model.num_classes()) +
                                    " outputs for " + std::to_string(tasks.base_classes.size()) +
                                    " base classes");
    auto log = [&](const std::string& m) {
        if (opt.log) opt.log(m);
    };
    auto phase = [&](const std::string& p) {
        if (opt.audit) opt.audit->set_phase(p);
    };
    const bool write = !opt.out_dir.empty();
    if (write) fs::create_directories(opt.out_dir);

    SequenceResult res{RunReport{}, std::move(base_model), std::nullopt, {}};
    RunReport& report = res.report;
    ClassifierModel<Real>& current = res.final_model;

    phase("eval-task-0");
    {
        const auto val = load_task_data(spec, tasks.seen_classes(0), Split::Val, 0, opt.audit);
        const double acc = top1_accuracy(current, val);
        report.add_task_point(acc, static_cast<int>(tasks.base_classes.size()));
        log("task 0: top-1 " + std::to_string(acc) + "% over " +
            std::to_string(tasks.base_classes.size()) + " classes");
    }

    CilTrainConfig cil = cil_cfg;
    cil.use_pseudo = opt.use_skd && cil_cfg.use_pseudo;
    cil.gamma_schedule.total_tasks = std::max(1, tasks.num_incremental());
    cil.gamma_schedule.class_counts = gamma_class_counts(tasks);

    for (int n = 1; n <= tasks.num_incremental(); ++n) {
        const std::string tag = "task" + std::to_string(n);
        phase("train-task-" + std::to_string(n));
        std::optional<ClassifierModel<Real>> student;
        if (cil.use_pseudo) {
            SkdTrainConfig s = skd_cfg;
            s.seed = Rng::derive(skd_cfg.seed, "skd-task", static_cast<std::uint64_t>(n)).next();
            if (write) {
                s.trace_path = opt.out_dir / ("skd_trace_" + tag + ".csv");
                report.trace_files.push_back(s.trace_path.filename().string());
            }
            const auto t0 = std::chrono::steady_clock::now();
            auto skd = train_skd(current, std::move(res.delegator), s, [&](int epoch, const SkdTraceRow& row) {
                if ((epoch + 1) % 10 == 0 || epoch + 1 == s.epochs)
                    log(tag + " skd epoch " + std::to_string(epoch + 1) + "/" +
                        std::to_string(s.epochs) + " L_imi " + std::to_string(row.losses.imitate) +
                        " L_cat " + std::to_string(row.losses.category) + " L_div " +
                        std::to_string(row.losses.diversity) + " R " +
                        std::to_string(row.losses.rfeature));
            });
            report.timing_seconds["skd_" + tag] = seconds_since(t0);
            if (skd.teacher_digest_before != skd.teacher_digest_after)
                throw std::logic_error("teacher changed during delegator training");
            res.delegator = std::move(skd.delegator);
            student = std::move(skd.student);
            if (skd.aborted) {
                report.complete = false;
                report.abort_reason = tag + " delegator training: " + skd.abort_reason;
                break;
            }
        }

        CilTrainConfig c = cil;
        c.seed = Rng::derive(cil_cfg.seed, "cil-task", static_cast<std::uint64_t>(n)).next();
        if (write) {
            c.trace_path = opt.out_dir / ("cil_trace_" + tag + ".csv");
            report.trace_files.push_back(c.trace_path.filename().string());
        }
        TaskStream stream(spec, tasks.task(n), Split::Train, c.seed, opt.audit);
        const auto t0 = std::chrono::steady_clock::now();
        auto step = train_cil_task(current, res.delegator ? &*res.delegator : nullptr, stream, c, n);
        report.timing_seconds["cil_" + tag] = seconds_since(t0);
        report.metrics["gamma_" + tag] = step.gamma;

        phase("eval-task-" + std::to_string(n));
        if (student) {
            const auto old_val = load_task_data(spec, tasks.seen_classes(n - 1), Split::Val, 0, opt.audit);
            auto with_head = attach_teacher_head(*student, current);
            const double gap = accuracy_gap(current, with_head, old_val);
            res.student_gaps.push_back(gap);
            report.metrics["student_gap_" + tag] = gap;
            if (!report.teacher_student_gap) report.teacher_student_gap = gap;
        }
        current = std::move(step.model);
        if (step.aborted) {
            report.complete = false;
            report.abort_reason = tag + " incremental training: " + step.abort_reason;
            break;
        }
        const auto seen = tasks.seen_classes(n);
        const auto val = load_task_data(spec, seen, Split::Val, 0, opt.audit);
        const double acc = top1_accuracy(current, val);
        report.add_task_point(acc, static_cast<int>(seen.size()));
        log(tag + ": top-1 " + std::to_string(acc) + "% over " + std::to_string(seen.size()) +
            " classes (gamma " + std::to_string(step.gamma) + ")");

        if (write) {
            const auto model_file = "model_" + tag + ".ckpt";
            save_checkpoint(opt.out_dir / model_file, current);
            report.checkpoints.push_back(model_file);
            if (res.delegator) {
                const auto gen_file = "delegator_" + tag + ".ckpt";
                save_checkpoint(opt.out_dir / gen_file, *res.delegator);
                report.checkpoints.push_back(gen_file);
            }
        }
    }
    return res;
}

}  // namespace skd
