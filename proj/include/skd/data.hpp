#pragma once

#include "skd/rng.hpp"
#include "skd/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace skd {

/// On-disk dataset description. Images are stored as 8-bit per channel and
/// mapped to (p / 255 - mean[c]) / std[c] on load.
struct DatasetSpec {
    std::string name;
    Shape input{};       ///< shape delivered to models (stored images are resized to it)
    Shape stored{};      ///< shape of the records on disk
    int class_count = 0;
    std::vector<double> mean;
    std::vector<double> std;
    std::vector<std::string> class_names;
    std::filesystem::path root;

    void validate() const;
};

/// Reads `dataset.txt` under root. Errors if the file or any required key is missing.
DatasetSpec load_dataset_spec(const std::filesystem::path& root);

/// Seeded class permutation split into a base task and N incremental groups.
struct TaskSequence {
    std::vector<int> class_order;
    std::vector<int> base_classes;
    std::vector<std::vector<int>> incremental_tasks;
    std::uint64_t seed = 0;

    [[nodiscard]] int num_incremental() const { return static_cast<int>(incremental_tasks.size()); }
    /// Classes of task t: 0 is the base task, t >= 1 is incremental group t.
    [[nodiscard]] const std::vector<int>& task(int t) const;
    /// Classes of tasks 0..t in model label order.
    [[nodiscard]] std::vector<int> seen_classes(int t) const;
    /// |classes| of tasks 0..t.
    [[nodiscard]] std::vector<int> class_counts(int t) const;
};

TaskSequence build_task_sequence(int class_count, int num_incremental, std::uint64_t seed);
TaskSequence build_task_sequence(const DatasetSpec& spec, int num_incremental, std::uint64_t seed);

enum class Split { Train, Val };
const char* split_name(Split s);

/// Record of every record-file read, tagged with the phase active at the time.
class AccessAudit {
public:
    struct Entry {
        Split split;
        int class_id;
        std::string phase;
        std::string file;
    };

    void set_phase(std::string phase) { phase_ = std::move(phase); }
    [[nodiscard]] const std::string& phase() const { return phase_; }
    void record(Split split, int class_id, const std::filesystem::path& file);
    [[nodiscard]] const std::vector<Entry>& entries() const { return entries_; }
    /// Entries of `split` during `phase` whose class is in `classes`.
    [[nodiscard]] std::vector<Entry> reads_of(const std::vector<int>& classes, Split split,
                                              const std::string& phase) const;
    void clear() { entries_.clear(); }

private:
    std::string phase_ = "unscoped";
    std::vector<Entry> entries_;
};

/// A batch of real images. `labels` is one-hot over the stream's class list,
/// in the order that list was given.
struct LabeledBatch {
    Activation<Real> images;
    Matrix<Real> labels;
    std::vector<int> local_ids;
    std::vector<int> global_ids;

    [[nodiscard]] int size() const { return images.batch(); }
};

/// Stream over the real data of a class group. Train streams are reshuffled at every
/// epoch from a per-epoch seed; val streams keep file order.
class TaskStream {
public:
    TaskStream(const DatasetSpec& spec, std::vector<int> classes, Split split, std::uint64_t seed,
               AccessAudit* audit = nullptr);

    void start_epoch(int epoch);
    /// Next batch of at most `batch_size` samples; false once the epoch is exhausted.
    bool next(int batch_size, LabeledBatch& out);
    /// Every sample, in the current epoch order.
    [[nodiscard]] LabeledBatch all() const;
    /// Samples [first, first + count) of the current epoch order.
    [[nodiscard]] LabeledBatch slice(int first, int count) const;

    [[nodiscard]] int size() const { return static_cast<int>(global_.size()); }
    [[nodiscard]] const std::vector<int>& classes() const { return classes_; }
    [[nodiscard]] Split split() const { return split_; }
    [[nodiscard]] Shape shape() const { return shape_; }

private:
    std::vector<int> classes_;
    Split split_;
    std::uint64_t seed_;
    Shape shape_;
    Matrix<Real> images_;  // one row per sample, normalized
    std::vector<int> local_, global_;
    std::vector<int> order_;
    int cursor_ = 0;
};

/// Convenience wrapper for `TaskStream(...).all()`.
LabeledBatch load_task_data(const DatasetSpec& spec, const std::vector<int>& classes, Split split,
                            std::uint64_t seed = 0, AccessAudit* audit = nullptr);

// Record files: header "SKDREC01", u32 channels, height, width, count, then per record
// u32 class id, u32 checksum and channels*height*width bytes. The checksum is the low
// 32 bits of FNV-1a over the class id and the pixel bytes.
std::filesystem::path record_file(const std::filesystem::path& root, Split split, int class_id);

struct RawRecord {
    int class_id = 0;
    std::vector<std::uint8_t> pixels;
};

void write_records(const std::filesystem::path& file, Shape shape, const std::vector<RawRecord>& recs);
std::vector<RawRecord> read_records(const std::filesystem::path& file, Shape expected);

/// Bilinear resize of one channel-major image.
std::vector<float> resize_bilinear(const std::vector<float>& src, Shape from, Shape to);

struct DeskDatasetOptions {
    int train_per_class = 600;
    int val_per_class = 200;
    int side = 28;
    std::uint64_t seed = 1;
};

/// Writes the procedural seven-segment digit dataset (10 classes, one channel):
/// record files, `index.txt` and `dataset.txt` with normalization constants
/// computed from the train split. Returns the resulting spec.
DatasetSpec make_desk_dataset(const std::filesystem::path& root, const DeskDatasetOptions& opt);

/// Renders one digit with random geometric and photometric jitter, values in [0, 1].
std::vector<float> render_desk_digit(int digit, int side, Rng& rng);

}  // namespace skd
