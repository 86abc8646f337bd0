#pragma once

#include "skd/data.hpp"
#include "skd/losses.hpp"
#include "skd/networks.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace skd {

/// Argmax class per row of `model` on `images`, evaluated in inference mode in chunks.
std::vector<int> predict_labels(ClassifierModel<Real>& model, const Activation<Real>& images,
                                int chunk = 256);

/// Percent of rows whose argmax (lowest index on ties) equals the label.
template <typename Derived>
double top1_from_logits(const Eigen::MatrixBase<Derived>& logits, const std::vector<int>& labels) {
    if (logits.rows() == 0) throw std::invalid_argument("top1: empty evaluation set");
    if (static_cast<std::size_t>(logits.rows()) != labels.size())
        throw std::invalid_argument("top1: label count does not match rows");
    const auto pred = argmax_rows(logits);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
    return 100.0 * static_cast<double>(hits) / static_cast<double>(labels.size());
}

double top1_accuracy(ClassifierModel<Real>& model, const Activation<Real>& images,
                     const std::vector<int>& labels);
/// Labels are the batch's local ids, i.e. positions in the stream's class list.
double top1_accuracy(ClassifierModel<Real>& model, const LabeledBatch& batch);

/// Teacher top-1 minus student top-1 (student evaluated with the teacher's head).
double accuracy_gap(ClassifierModel<Real>& teacher, ClassifierModel<Real>& student_with_teacher_head,
                    const LabeledBatch& val);

// ---------------------------------------------------------------------------
// Embeddings

struct EmbeddingTable {
    Matrix<Real> features;  ///< rows x d
    std::vector<int> labels;
    std::vector<std::string> sources;  ///< "real" or "pseudo"

    [[nodiscard]] int rows() const { return static_cast<int>(labels.size()); }
    void append(const EmbeddingTable& other);
};

/// Features of the first `count` samples of `batch`, labelled with the batch's local ids.
EmbeddingTable embed_real(ClassifierModel<Real>& model, const LabeledBatch& batch, int count);

/// Features of `count` generated samples, labelled by the teacher's argmax.
EmbeddingTable embed_pseudo(ClassifierModel<Real>& model, Delegator<Real>& delegator,
                            ClassifierModel<Real>& teacher, int count, Rng& rng,
                            Mode generation_mode = Mode::Eval);

/// CSV with header feature_0..feature_{d-1},label,source.
void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& table);
EmbeddingTable read_embeddings(const std::filesystem::path& path);

struct CentroidAlignment {
    int classes = 0;   ///< classes with real samples
    int aligned = 0;   ///< matched cosine strictly above every mismatched one
    double fraction = 0;
    std::vector<double> matched;        ///< per real class; NaN if no pseudo sample
    std::vector<double> max_mismatched;
};

/// For each class with real rows: cosine between its real centroid and its pseudo centroid
/// versus the best cosine to any other class's pseudo centroid. Centroids average
/// L2-normalized features.
CentroidAlignment centroid_alignment(const EmbeddingTable& table);

/// Distinct classes among labels and the fraction of `class_count` they cover.
double label_coverage(const std::vector<int>& labels, int class_count);

// ---------------------------------------------------------------------------
// Run report

using ConfigSnapshot = std::map<std::string, std::string>;

/// FNV-1a over the canonical "key=value\n" lines, as 16 hex digits.
std::string snapshot_hash(const ConfigSnapshot& snapshot);

struct RunReport {
    std::string name;
    std::uint64_t seed = 0;
    ConfigSnapshot config;
    std::string config_hash;
    std::vector<double> per_task_top1;    ///< percent; entry 0 is the base task
    std::vector<int> seen_classes;        ///< classes evaluated at each point
    double average_top1 = 0;
    std::optional<double> teacher_student_gap;
    std::map<std::string, double> metrics;
    std::vector<std::string> trace_files;
    std::vector<std::string> checkpoints;
    std::map<std::string, double> timing_seconds;
    bool complete = true;
    std::string abort_reason;

    void add_task_point(double top1, int seen);
    /// Throws if invariants (range, average, hash) do not hold.
    void validate() const;
};

/// JSON text. Timing is wall-clock and is left out when `with_timing` is false.
std::string report_to_json(const RunReport& report, bool with_timing = true);
RunReport report_from_json(const std::string& text);
void save_report(const std::filesystem::path& path, const RunReport& report);
RunReport load_report(const std::filesystem::path& path);
/// Equality of everything except timing.
bool same_results(const RunReport& a, const RunReport& b);

}  // namespace skd
