#include "skd/delegate.hpp"

#include "skd/evalkit.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace skd {

namespace fs = std::filesystem;

void SkdTrainConfig::validate() const {
    if (epochs < 0) throw std::invalid_argument("skd epochs must be >= 0");
    if (steps_per_epoch < 1) throw std::invalid_argument("skd steps_per_epoch must be >= 1");
    if (imitate_steps_per_explore < 1)
        throw std::invalid_argument("imitate_steps_per_explore must be >= 1");
    if (!(imitate_lr > 0) || !(explore_lr > 0))
        throw std::invalid_argument("skd learning rates must be positive");
    if (!(lr_drop_factor > 0)) throw std::invalid_argument("lr_drop_factor must be positive");
    if (pseudo_batch_size < 2) throw std::invalid_argument("pseudo_batch_size must be >= 2");
    if (latent_dim < 1) throw std::invalid_argument("latent_dim must be >= 1");
    if (divergence_patience < 1) throw std::invalid_argument("divergence_patience must be >= 1");
    explore_weights.validate();
}

template <typename Scalar>
Matrix<Scalar> sample_latent(int batch, int latent_dim, Rng& rng) {
    if (batch < 1 || latent_dim < 1) throw std::invalid_argument("latent sizes must be positive");
    Matrix<Scalar> z(batch, latent_dim);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = static_cast<Scalar>(rng.normal());
    return z;
}

namespace {

Mode student_mode(const SkdTrainConfig& cfg) {
    return cfg.student_uses_batch_stats ? Mode::Train : Mode::Eval;
}

template <typename Scalar>
void inject_statistics_gradient(ClassifierModel<Scalar>& model, const MomentsGradient<Scalar>& g) {
    auto layers = model.norm_layers();
    for (std::size_t l = 0; l < layers.size(); ++l)
        layers[l]->set_statistics_gradient(g.d_mean[l], g.d_std[l]);
}

}  // namespace

template <typename Scalar>
ExploreComponents explore_backward(const Matrix<Scalar>& z, Delegator<Scalar>& delegator,
                                   ClassifierModel<Scalar>& teacher,
                                   ClassifierModel<Scalar>& student, const SkdTrainConfig& cfg,
                                   Mode delegator_mode, Matrix<Scalar>* d_latent) {
    const auto& w = cfg.explore_weights;
    const bool from_student = cfg.rfeature_source == StatisticsSource::Student;
    const auto x = delegator.forward(z, delegator_mode);

    teacher.set_observe_statistics(!from_student);
    student.set_observe_statistics(from_student);
    const auto ft = teacher.features(x, Mode::Eval);
    const auto logits = teacher.head_forward(ft, Mode::Eval);
    const auto fs = student.features(x, student_mode(cfg));

    ExploreComponents c;
    const auto psi = feature_cosine_discrepancy_grad(ft.values, fs.values);
    c.imitate = psi.value;
    c.explore = -psi.value;

    const Matrix<Scalar> probs = softmax(logits.values);
    const auto cat = category_loss_grad(logits.values);
    const auto div = diversity_loss_grad(probs);
    c.category = cat.value;
    c.diversity = div.value;
    auto& observed_in = from_student ? student : teacher;
    const auto rf = bn_statistic_regularizer_grad(observed_moments(observed_in), stored_moments(teacher));
    c.rfeature = rf.value;
    c.total = explore_total(c, w);

    const auto lambda = static_cast<Scalar>(w.lambda_exp);
    Matrix<Scalar> d_logits = Matrix<Scalar>::Zero(logits.values.rows(), logits.values.cols());
    if (w.use_cat) d_logits += cat.grad;
    if (w.use_div) d_logits += softmax_backward(probs, div.grad);

    Matrix<Scalar> d_ft = teacher.backward_head(Activation<Scalar>(d_logits, logits.shape)).values;
    d_ft -= lambda * psi.grad_a;
    if (w.use_rfeature && !from_student) inject_statistics_gradient(teacher, rf);
    auto dx = teacher.backward_features(Activation<Scalar>(std::move(d_ft), ft.shape));

    const bool student_path = lambda != Scalar(0) || (w.use_rfeature && from_student);
    if (student_path) {
        Matrix<Scalar> d_fs = -lambda * psi.grad_b;
        if (w.use_rfeature && from_student) inject_statistics_gradient(student, rf);
        dx.values += student.backward_features(Activation<Scalar>(std::move(d_fs), fs.shape)).values;
    }
    auto dz = delegator.backward(dx);
    if (d_latent) *d_latent = std::move(dz.values);

    teacher.set_observe_statistics(false);
    student.set_observe_statistics(false);
    return c;
}

template <typename Scalar>
Scalar imitate_backward(const Activation<Scalar>& x, ClassifierModel<Scalar>& teacher,
                        ClassifierModel<Scalar>& student, const SkdTrainConfig& cfg) {
    const auto ft = teacher.features(x, Mode::Eval);
    const auto fs = student.features(x, student_mode(cfg));
    const auto psi = feature_cosine_discrepancy_grad(ft.values, fs.values);
    student.backward_features(Activation<Scalar>(psi.grad_b, fs.shape));
    return psi.value;
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

std::vector<Parameter<Real>*> explore_parameters(Delegator<Real>& d, ClassifierModel<Real>& s,
                                                 bool delegator_only) {
    auto out = d.parameters();
    if (!delegator_only)
        for (auto* p : s.feature_parameters()) out.push_back(p);
    return out;
}

bool finite_components(const ExploreComponents& c) {
    return std::isfinite(c.imitate) && std::isfinite(c.category) && std::isfinite(c.diversity) &&
           std::isfinite(c.rfeature) && std::isfinite(c.total);
}

}  // namespace

SkdTrainer::SkdTrainer(ClassifierModel<Real>& teacher, Delegator<Real> delegator,
                       ClassifierModel<Real> student, SkdTrainConfig cfg)
    : teacher_(teacher),
      delegator_(std::move(delegator)),
      student_(std::move(student)),
      cfg_(std::move(cfg)),
      rng_(Rng::derive(cfg_.seed, "skd-latent")),
      imitate_opt_(student_.feature_parameters(), cfg_.imitate_lr, cfg_.imitate_momentum,
                   cfg_.imitate_weight_decay),
      explore_opt_(explore_parameters(delegator_, student_, cfg_.explore_updates_delegator_only),
                   cfg_.explore_lr) {
    cfg_.validate();
    if (delegator_.output_shape() != teacher_.input_shape())
        throw std::invalid_argument("delegator emits " + delegator_.output_shape().str() +
                                    " but the teacher expects " + teacher_.input_shape().str());
    if (student_.feature_dim() != teacher_.feature_dim())
        throw std::invalid_argument("student and teacher feature widths differ");
    teacher_.set_requires_grad(false);
    student_.set_requires_grad(true);
    student_.head().set_requires_grad(false);
    delegator_.set_helper_enabled(cfg_.helper_bn);
}

Real SkdTrainer::imitate_step() {
    auto student_params = student_.feature_parameters();
    zero_grad(student_params);
    const auto z = sample_latent<Real>(cfg_.pseudo_batch_size, delegator_.latent_dim(), rng_);
    const auto x = delegator_.forward(z, Mode::BatchStats);
    const Real loss = imitate_backward(x, teacher_, student_, cfg_);
    if (!std::isfinite(loss)) {
        zero_grad(student_params);
        throw std::runtime_error("non-finite imitate loss");
    }
    imitate_opt_.step();
    return loss;
}

ExploreComponents SkdTrainer::explore_step() {
    explore_opt_.zero_grad();
    zero_grad(student_.feature_parameters());
    const auto z = sample_latent<Real>(cfg_.pseudo_batch_size, delegator_.latent_dim(), rng_);
    const auto c = explore_backward(z, delegator_, teacher_, student_, cfg_, Mode::Train);
    if (!finite_components(c)) {
        explore_opt_.zero_grad();
        throw std::runtime_error("non-finite explore loss");
    }
    explore_opt_.step();
    return c;
}

void SkdTrainer::set_epoch(int epoch) {
    imitate_opt_.set_lr(step_decay(cfg_.imitate_lr, epoch, cfg_.lr_drop_every, cfg_.lr_drop_factor));
    explore_opt_.set_lr(step_decay(cfg_.explore_lr, epoch, cfg_.lr_drop_every, cfg_.lr_drop_factor));
}

// ---------------------------------------------------------------------------
// Full run

SkdTrainResult<Real> train_skd(ClassifierModel<Real>& teacher,
                               std::optional<Delegator<Real>> delegator_init,
                               const SkdTrainConfig& cfg, const SkdProgress& progress) {
    cfg.validate();
    const auto digest_before = teacher.digest();
    auto student = clone_reinit(teacher, Rng::derive(cfg.seed, "student-init").next());
    Delegator<Real> delegator =
        delegator_init ? std::move(*delegator_init)
                       : build_delegator<Real>(teacher.input_shape(), cfg.latent_dim,
                                               cfg.delegator_widths,
                                               Rng::derive(cfg.seed, "delegator-init").next());
    if (delegator.latent_dim() != cfg.latent_dim)
        throw std::invalid_argument("warm-start delegator latent width " +
                                    std::to_string(delegator.latent_dim()) + " != " +
                                    std::to_string(cfg.latent_dim));

    SkdTrainer trainer(teacher, std::move(delegator), std::move(student), cfg);
    if (!cfg.checkpoint_dir.empty() && cfg.checkpoint_every > 0) fs::create_directories(cfg.checkpoint_dir);
    std::vector<SkdTraceRow> trace;
    trace.reserve(static_cast<std::size_t>(cfg.epochs) * cfg.steps_per_epoch *
                  (cfg.imitate_steps_per_explore + 1));
    long step = 0, imitate_steps = 0, explore_steps = 0, skipped = 0;
    int consecutive = 0, completed = 0;
    bool aborted = false;
    std::string reason;

    auto guarded = [&](auto&& body) {
        try {
            body();
            consecutive = 0;
        } catch (const std::runtime_error& e) {
            ++skipped;
            if (++consecutive >= cfg.divergence_patience) {
                aborted = true;
                reason = std::string(e.what()) + " for " + std::to_string(consecutive) +
                         " consecutive steps";
            }
        }
        ++step;
    };

    for (int epoch = 0; epoch < cfg.epochs && !aborted; ++epoch) {
        trainer.set_epoch(epoch);
        SkdTraceRow last{};
        for (int cycle = 0; cycle < cfg.steps_per_epoch && !aborted; ++cycle) {
            for (int i = 0; i < cfg.imitate_steps_per_explore && !aborted; ++i)
                guarded([&] {
                    SkdTraceRow row;
                    row.step = step;
                    row.epoch = epoch;
                    row.losses.imitate = trainer.imitate_step();
                    row.losses.total = row.losses.imitate;
                    trace.push_back(row);
                    ++imitate_steps;
                });
            if (aborted) break;
            guarded([&] {
                SkdTraceRow row;
                row.step = step;
                row.epoch = epoch;
                row.explore = true;
                row.losses = trainer.explore_step();
                trace.push_back(row);
                last = row;
                ++explore_steps;
            });
        }
        if (aborted) break;
        ++completed;
        if (progress) progress(epoch, last);
        if (!cfg.checkpoint_dir.empty() && cfg.checkpoint_every > 0 &&
            completed % cfg.checkpoint_every == 0) {
            const auto tag = "epoch" + std::to_string(completed);
            save_checkpoint(cfg.checkpoint_dir / ("delegator_" + tag + ".ckpt"), trainer.delegator());
            save_checkpoint(cfg.checkpoint_dir / ("student_" + tag + ".ckpt"), trainer.student());
        }
    }

    teacher.set_requires_grad(true);
    SkdTrainResult<Real> result{.delegator = std::move(trainer.delegator()),
                                .student = std::move(trainer.student()),
                                .trace = std::move(trace)};
    result.student.set_requires_grad(true);
    result.teacher_digest_before = digest_before;
    result.teacher_digest_after = teacher.digest();
    result.epochs_completed = completed;
    result.imitate_steps = imitate_steps;
    result.explore_steps = explore_steps;
    result.skipped_steps = skipped;
    result.aborted = aborted;
    result.abort_reason = reason;
    if (!cfg.trace_path.empty()) write_skd_trace(cfg.trace_path, result.trace);
    return result;
}

ClassifierModel<Real> attach_teacher_head(const ClassifierModel<Real>& student,
                                          const ClassifierModel<Real>& teacher) {
    if (student.feature_dim() != teacher.feature_dim())
        throw std::invalid_argument("student features (" + std::to_string(student.feature_dim()) +
                                    ") do not fit the teacher head (" +
                                    std::to_string(teacher.feature_dim()) + ")");
    ClassifierModel<Real> out = student;
    out.replace_head(teacher.head());
    return out;
}

double evaluate_student_with_teacher_head(ClassifierModel<Real>& student,
                                          ClassifierModel<Real>& teacher,
                                          const Activation<Real>& images,
                                          const std::vector<int>& labels) {
    auto combined = attach_teacher_head(student, teacher);
    return top1_accuracy(combined, images, labels);
}

void write_skd_trace(const fs::path& path, const std::vector<SkdTraceRow>& rows) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "step,epoch,phase,L_imi,L_exp,L_cat,L_div,R_feature,total\n";
    out.precision(9);
    for (const auto& r : rows) {
        out << r.step << ',' << r.epoch << ',' << (r.explore ? "explore" : "imitate") << ','
            << r.losses.imitate << ',';
        if (r.explore)
            out << r.losses.explore << ',' << r.losses.category << ',' << r.losses.diversity << ','
                << r.losses.rfeature << ',';
        else
            out << ",,,,";
        out << r.losses.total << '\n';
    }
}

#define SKD_INSTANTIATE_DELEGATE(S)                                                              \
    template Matrix<S> sample_latent<S>(int, int, Rng&);                                         \
    template ExploreComponents explore_backward<S>(const Matrix<S>&, Delegator<S>&,              \
                                                   ClassifierModel<S>&, ClassifierModel<S>&,     \
                                                   const SkdTrainConfig&, Mode, Matrix<S>*);               \
    template S imitate_backward<S>(const Activation<S>&, ClassifierModel<S>&, ClassifierModel<S>&, \
                                   const SkdTrainConfig&);

SKD_INSTANTIATE_DELEGATE(float)
SKD_INSTANTIATE_DELEGATE(double)

}  // namespace skd
