#pragma once

// Supervised base training and exemplar-free incremental tasks: every step mixes a
// freshly generated pseudo batch of old classes with an equal-sized real batch of
// new classes under gamma * L_cls + L_fc.

#include "skd/data.hpp"
#include "skd/delegate.hpp"
#include "skd/evalkit.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace skd {

using LogFn = std::function<void(const std::string&)>;

struct SupervisedConfig {
    int epochs = 30;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::vector<int> lr_drops{20, 25};
    double lr_drop_factor = 10.0;
    int batch_size = 64;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Cross-entropy training of every parameter on a labelled stream; labels are the
/// stream's local ids. Returns per-epoch mean loss.
std::vector<double> train_supervised(ClassifierModel<Real>& model, TaskStream& train,
                                     const SupervisedConfig& cfg, const LogFn& log = {});

struct CilTrainConfig {
    int epochs = 160;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::vector<int> lr_drops{80, 120};
    double lr_drop_factor = 10.0;
    int batch_size_real = 64;
    GammaSchedule gamma_schedule;
    bool adaptive_gamma = true;  ///< off: `fixed_gamma` for every task
    double fixed_gamma = 1.0;
    bool use_pseudo = true;      ///< off: real data only, consolidation on real data
    Mode pseudo_generation_mode = Mode::Eval;
    int divergence_patience = 10;
    std::uint64_t seed = 0;
    std::filesystem::path trace_path;

    void validate() const;
};

struct PseudoBatch {
    Activation<Real> images;
    Matrix<Real> labels;  ///< one-hot over the old classes

    [[nodiscard]] int size() const { return images.batch(); }
};

/// `count` generated images labelled by the teacher's argmax.
PseudoBatch make_pseudo_batch(Delegator<Real>& delegator, ClassifierModel<Real>& teacher, int count,
                              Rng& rng, Mode generation_mode = Mode::Eval);

struct MixedBatch {
    Activation<Real> images;
    Matrix<Real> labels;  ///< one-hot over old_k + new_k classes
    int pseudo_rows = 0;
    int real_rows = 0;
};

/// Pseudo rows first (labels zero-padded on the right), then real rows (labels
/// shifted past the old classes).
MixedBatch mix_batch(const PseudoBatch& pseudo, const LabeledBatch& real, int old_k, int new_k);

/// Real rows only, labels shifted past the old classes.
MixedBatch real_only_batch(const LabeledBatch& real, int old_k, int new_k);

struct CilTraceRow {
    long step = 0;
    int epoch = 0;
    double classification = 0;
    double consolidation = 0;
    double gamma = 0;
    double total = 0;
};

struct CilTaskResult {
    ClassifierModel<Real> model;
    std::vector<CilTraceRow> trace{};
    double gamma = 0;
    long pseudo_samples = 0;
    long real_samples = 0;
    long skipped_steps = 0;
    bool aborted = false;
    std::string abort_reason{};
};

/// Trains T_{n+1} from T_n for incremental task `task_index` (1-based). The new model
/// copies old_model, gains new_k head rows and trains against gamma * L_cls + L_fc.
/// `delegator` may be null only when cfg.use_pseudo is false.
CilTaskResult train_cil_task(const ClassifierModel<Real>& old_model, Delegator<Real>* delegator,
                             TaskStream& new_data, const CilTrainConfig& cfg, int task_index);

void write_cil_trace(const std::filesystem::path& path, const std::vector<CilTraceRow>& rows);

/// Options for a full base + incremental sequence.
struct SequenceOptions {
    bool use_skd = true;
    std::filesystem::path out_dir;  ///< empty: nothing written
    AccessAudit* audit = nullptr;
    LogFn log;
};

struct SequenceResult {
    RunReport report;
    ClassifierModel<Real> final_model;
    std::optional<Delegator<Real>> delegator;
    /// Teacher top-1 minus student-with-teacher-head top-1 per task on the teacher's classes.
    std::vector<double> student_gaps;
};

/// Alternates stage 1 and stage 2 for every incremental task. Per-task evaluation covers
/// all seen classes in model label order; the first point is the base model.
SequenceResult run_sequence(ClassifierModel<Real> base_model, const DatasetSpec& spec,
                            const TaskSequence& tasks, const SkdTrainConfig& skd_cfg,
                            const CilTrainConfig& cil_cfg, const SequenceOptions& opt);

/// Class counts for the gamma schedule: cumulative sums equal the classes seen after
/// each incremental task, base classes included.
std::vector<int> gamma_class_counts(const TaskSequence& tasks);

}  // namespace skd
