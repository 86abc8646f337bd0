#pragma once

// Pipeline commands shared by the command-line tool and the tests. Every command reads
// its inputs from files named in the config and writes its outputs under out_dir.

#include "skd/cil.hpp"
#include "skd/config.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace skd {

struct CommandOptions {
    LogFn log;
    AccessAudit* audit = nullptr;
};

/// Loads the dataset spec and task sequence the config describes.
struct ExperimentData {
    DatasetSpec spec;
    TaskSequence tasks;
};
ExperimentData load_experiment_data(const ExperimentConfig& cfg);

/// Report skeleton carrying the config snapshot and its hash.
RunReport make_report(const ExperimentConfig& cfg, const std::string& suffix = {});

struct PretrainOutcome {
    ClassifierModel<Real> model;
    RunReport report;  ///< one point: validation top-1 on the trained classes
};

/// Supervised training of the base model (or of every class with pretrain.all_classes).
/// Writes the base checkpoint, pretrain_report.json and pretrain_config.txt.
PretrainOutcome cmd_pretrain(const ExperimentConfig& cfg, const CommandOptions& opt = {});

struct DistillOutcome {
    SkdTrainResult<Real> result;
    RunReport report;  ///< teacher top-1, student gap, label coverage and centroid alignment
};

/// Stage 1 only against the base checkpoint. Writes delegator.ckpt, student.ckpt,
/// skd_trace.csv, distill_report.json and distill_config.txt.
DistillOutcome cmd_distill(const ExperimentConfig& cfg, const CommandOptions& opt = {});

/// Stage 2 only: the first incremental task from the base checkpoint, with pseudo data
/// from `delegator_path` (ignored under no_skd). Writes model_task1.ckpt,
/// cil_trace_task1.csv, cil_report.json and cil_config.txt.
RunReport cmd_cil(const ExperimentConfig& cfg, const std::filesystem::path& delegator_path,
                  const CommandOptions& opt = {});

/// Full sequence from the base checkpoint. Writes config.txt, report.json, every
/// checkpoint and trace.
SequenceResult cmd_run(const ExperimentConfig& cfg, const CommandOptions& opt = {});

struct EvalOutcome {
    double top1 = 0;
    std::vector<int> classes;  ///< evaluated classes in head order
};

/// Validation top-1 of a checkpoint over the classes its head covers.
EvalOutcome cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint);

/// Feature table of `count` real validation samples over the model's classes and, when a
/// delegator is given, `count` pseudo samples labelled by the same model.
EmbeddingTable cmd_export_embeddings(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                     const std::optional<std::filesystem::path>& delegator, int count,
                                     const std::filesystem::path& out_file);

/// Classes a classifier head covers: every class in class order when the head spans the
/// dataset, otherwise the first tasks whose classes add up to the head size.
std::vector<int> head_classes(const TaskSequence& tasks, int class_count, int head_size);

}  // namespace skd
