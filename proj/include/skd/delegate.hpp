#pragma once

// Data-free delegator training: alternating imitate and explore steps that train a
// generator and a freshly initialized student against a frozen teacher.

#include "skd/losses.hpp"
#include "skd/networks.hpp"
#include "skd/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace skd {

/// Which model's normalization layers supply the observed statistics of the
/// feature-statistic regularizer. The stored statistics are always the teacher's.
enum class StatisticsSource { Teacher, Student };

struct SkdTrainConfig {
    int epochs = 200;
    int steps_per_epoch = 50;  ///< imitate/explore cycles per epoch
    int imitate_steps_per_explore = 5;
    double imitate_lr = 0.1;
    double imitate_momentum = 0.9;
    double imitate_weight_decay = 5e-4;
    double explore_lr = 1e-3;
    int lr_drop_every = 100;
    double lr_drop_factor = 10.0;
    int pseudo_batch_size = 256;
    int latent_dim = 256;
    std::vector<int> delegator_widths;  ///< empty: architecture default
    ExploreWeights explore_weights;
    StatisticsSource rfeature_source = StatisticsSource::Teacher;
    bool explore_updates_delegator_only = false;
    bool helper_bn = true;
    /// Student normalization uses batch statistics while training. Off: running
    /// statistics, which keeps the student's forward pass identical to the teacher's
    /// when their parameters agree.
    bool student_uses_batch_stats = true;
    int divergence_patience = 10;
    std::uint64_t seed = 0;

    std::filesystem::path trace_path;      ///< empty: no trace file
    std::filesystem::path checkpoint_dir;  ///< empty: no intermediate checkpoints
    int checkpoint_every = 0;              ///< epochs; 0 disables

    void validate() const;
};

/// One loss-trace row. Imitate rows only carry `imitate`.
struct SkdTraceRow {
    long step = 0;
    int epoch = 0;
    bool explore = false;
    ExploreComponents losses;
};

template <typename Scalar>
struct SkdTrainResult {
    Delegator<Scalar> delegator;
    ClassifierModel<Scalar> student;
    std::vector<SkdTraceRow> trace;
    std::uint64_t teacher_digest_before = 0;
    std::uint64_t teacher_digest_after = 0;
    int epochs_completed = 0;
    long imitate_steps = 0;
    long explore_steps = 0;
    long skipped_steps = 0;
    bool aborted = false;
    std::string abort_reason{};
};

/// i.i.d. standard normal batch x latent_dim.
template <typename Scalar>
Matrix<Scalar> sample_latent(int batch, int latent_dim, Rng& rng);

/// Gradients of one explore step, accumulated into the delegator and (optionally)
/// the student; the teacher's parameters receive nothing. Returns the loss components
/// evaluated on the pseudo batch generated from z; `d_latent`, when given, receives the
/// gradient of the weighted total with respect to z.
template <typename Scalar>
ExploreComponents explore_backward(const Matrix<Scalar>& z, Delegator<Scalar>& delegator,
                                   ClassifierModel<Scalar>& teacher,
                                   ClassifierModel<Scalar>& student, const SkdTrainConfig& cfg,
                                   Mode delegator_mode = Mode::Train,
                                   Matrix<Scalar>* d_latent = nullptr);

/// Imitate gradient on the student feature extractor for pseudo images x. Returns L_imi.
template <typename Scalar>
Scalar imitate_backward(const Activation<Scalar>& x, ClassifierModel<Scalar>& teacher,
                        ClassifierModel<Scalar>& student, const SkdTrainConfig& cfg);

/// Mutable state of a stage-1 run: models, optimizers and the latent stream.
class SkdTrainer {
public:
    SkdTrainer(ClassifierModel<Real>& teacher, Delegator<Real> delegator,
               ClassifierModel<Real> student, SkdTrainConfig cfg);
    SkdTrainer(const SkdTrainer&) = delete;
    SkdTrainer& operator=(const SkdTrainer&) = delete;

    /// One optimizer step on the student against L_imi; returns the loss before the step.
    /// Throws std::runtime_error on a non-finite loss (the parameters are left untouched).
    Real imitate_step();
    /// One joint optimizer step against the explore objective; returns its components.
    ExploreComponents explore_step();
    void set_epoch(int epoch);

    Delegator<Real>& delegator() { return delegator_; }
    ClassifierModel<Real>& student() { return student_; }
    const SkdTrainConfig& config() const { return cfg_; }

private:
    ClassifierModel<Real>& teacher_;
    Delegator<Real> delegator_;
    ClassifierModel<Real> student_;
    SkdTrainConfig cfg_;
    Rng rng_;
    Sgd<Real> imitate_opt_;
    Adam<Real> explore_opt_;
};

using SkdProgress = std::function<void(int epoch, const SkdTraceRow& last_explore)>;

/// Full stage-1 run. The student is `clone_reinit(teacher)`; the delegator starts from
/// `delegator_init` when given (warm start for later tasks) and is freshly built otherwise.
SkdTrainResult<Real> train_skd(ClassifierModel<Real>& teacher,
                               std::optional<Delegator<Real>> delegator_init,
                               const SkdTrainConfig& cfg, const SkdProgress& progress = {});

/// Accuracy (percent) of teacher.head applied to student features.
double evaluate_student_with_teacher_head(ClassifierModel<Real>& student,
                                          ClassifierModel<Real>& teacher,
                                          const Activation<Real>& images,
                                          const std::vector<int>& labels);

/// Student feature extractor with the teacher's head attached.
ClassifierModel<Real> attach_teacher_head(const ClassifierModel<Real>& student,
                                          const ClassifierModel<Real>& teacher);

void write_skd_trace(const std::filesystem::path& path, const std::vector<SkdTraceRow>& rows);

}  // namespace skd
