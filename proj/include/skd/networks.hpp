#pragma once

#include "skd/layers.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace skd {

/// Registered classifier backbones.
namespace arch {
inline constexpr const char* kDeskCnn = "desk-cnn";
inline constexpr const char* kResNet32 = "resnet32";
inline constexpr const char* kResNet18 = "resnet18";
}  // namespace arch

/// (running_mean, running_var) of one normalization layer.
template <typename Scalar>
using NormStats = std::pair<Vector<Scalar>, Vector<Scalar>>;

/// Feature extractor followed by an affine classification head.
template <typename Scalar>
class ClassifierModel {
public:
    ClassifierModel(std::string arch_id, Shape input, int width, Sequential<Scalar> features,
                    Linear<Scalar> head);

    ClassifierModel(const ClassifierModel&) = default;
    ClassifierModel& operator=(const ClassifierModel&) = default;
    ClassifierModel(ClassifierModel&&) noexcept = default;
    ClassifierModel& operator=(ClassifierModel&&) noexcept = default;

    Activation<Scalar> features(const Activation<Scalar>& x, Mode mode) {
        return features_.forward(x, mode);
    }
    Activation<Scalar> head_forward(const Activation<Scalar>& feats, Mode mode) {
        return head_.forward(feats, mode);
    }
    Activation<Scalar> forward(const Activation<Scalar>& x, Mode mode) {
        return head_.forward(features_.forward(x, mode), mode);
    }
    /// Gradient of the logits -> gradient of the features (head parameters accumulate).
    Activation<Scalar> backward_head(const Activation<Scalar>& d_logits) {
        return head_.backward(d_logits);
    }
    /// Gradient of the features -> gradient of the input image batch.
    Activation<Scalar> backward_features(const Activation<Scalar>& d_features) {
        return features_.backward(d_features);
    }

    /// Inference-mode logits.
    Matrix<Scalar> predict(const Activation<Scalar>& x) { return forward(x, Mode::Eval).values; }

    std::vector<Parameter<Scalar>*> parameters();
    std::vector<Parameter<Scalar>*> feature_parameters();
    std::vector<Parameter<Scalar>*> head_parameters();
    std::vector<Buffer<Scalar>> buffers();
    std::vector<BatchNorm2d<Scalar>*> norm_layers();
    /// Running statistics of every normalization layer in forward order.
    [[nodiscard]] std::vector<NormStats<Scalar>> bn_stats() const;

    void set_requires_grad(bool on);
    void set_observe_statistics(bool on);
    void reset(Rng& rng);

    /// Content hash over all parameters and running statistics.
    [[nodiscard]] std::uint64_t digest() const;

    [[nodiscard]] const std::string& arch() const { return arch_; }
    [[nodiscard]] Shape input_shape() const { return input_; }
    [[nodiscard]] int width() const { return width_; }
    [[nodiscard]] int num_classes() const { return head_.out_features(); }
    [[nodiscard]] int feature_dim() const { return head_.in_features(); }
    Linear<Scalar>& head() { return head_; }
    [[nodiscard]] const Linear<Scalar>& head() const { return head_; }
    void replace_head(Linear<Scalar> head) { head_ = std::move(head); }
    Sequential<Scalar>& feature_extractor() { return features_; }

private:
    std::string arch_;
    Shape input_;
    int width_;
    Sequential<Scalar> features_;
    Linear<Scalar> head_;
};

/// Latent-to-image generator followed by a trainable helper normalization layer.
template <typename Scalar>
class Delegator {
public:
    Delegator(int latent_dim, Shape output, std::vector<int> widths, Sequential<Scalar> generator,
              BatchNorm2d<Scalar> helper_bn);

    Delegator(const Delegator&) = default;
    Delegator& operator=(const Delegator&) = default;
    Delegator(Delegator&&) noexcept = default;
    Delegator& operator=(Delegator&&) noexcept = default;

    /// z is batch x latent_dim. Returns images in the classifier input domain.
    Activation<Scalar> forward(const Matrix<Scalar>& z, Mode mode);
    /// Image gradient -> latent gradient; accumulates generator and helper gradients.
    Activation<Scalar> backward(const Activation<Scalar>& d_images);

    /// Output of the last forward pass before the helper layer (saturated to [-1, 1]).
    [[nodiscard]] const Activation<Scalar>& raw_output() const { return raw_; }

    std::vector<Parameter<Scalar>*> parameters();
    std::vector<Buffer<Scalar>> buffers();
    void set_requires_grad(bool on);
    void reset(Rng& rng);
    [[nodiscard]] std::uint64_t digest() const;

    void set_helper_enabled(bool on) { helper_enabled_ = on; }
    [[nodiscard]] bool helper_enabled() const { return helper_enabled_; }

    [[nodiscard]] int latent_dim() const { return latent_dim_; }
    [[nodiscard]] Shape output_shape() const { return output_; }
    [[nodiscard]] const std::vector<int>& widths() const { return widths_; }
    /// "low-res" or "high-res".
    [[nodiscard]] std::string stack() const;
    [[nodiscard]] std::string describe() const;
    BatchNorm2d<Scalar>& helper_bn() { return helper_bn_; }

private:
    int latent_dim_;
    Shape output_;
    std::vector<int> widths_;
    Sequential<Scalar> generator_;
    BatchNorm2d<Scalar> helper_bn_;
    bool helper_enabled_ = true;
    Activation<Scalar> raw_;
};

/// Size growth of a classification head. new rows are appended after the old ones.
struct HeadExtension {
    int old_class_count = 0;
    int new_class_count = 0;
};

/// Builds an untrained classifier with seeded parameters. `width` scales channel
/// counts; 0 selects the architecture default (16 for desk-cnn and resnet32, 64 for resnet18).
template <typename Scalar>
ClassifierModel<Scalar> build_classifier(const std::string& arch_id, int num_classes, Shape input,
                                         int width = 0, std::uint64_t seed = 0);

/// Default generator widths: {128, 128, 64} below 65 px, {512, 512, 256, 128, 64} above.
std::vector<int> default_delegator_widths(Shape output);

/// Low-resolution stack (4x upsampling) for height <= 64, high-resolution stack (16x) otherwise.
template <typename Scalar>
Delegator<Scalar> build_delegator(Shape output, int latent_dim, std::vector<int> widths = {},
                                  std::uint64_t seed = 0);

template <typename Scalar>
ClassifierModel<Scalar> extend_head(const ClassifierModel<Scalar>& model, HeadExtension ext,
                                    std::uint64_t seed);

/// Same architecture, every parameter and running statistic freshly initialized.
template <typename Scalar>
ClassifierModel<Scalar> clone_reinit(const ClassifierModel<Scalar>& model, std::uint64_t seed);

// Checkpoints: versioned little-endian binary, parameters and running statistics in
// enumeration order, raw scalar bytes so a round trip is bitwise.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, ClassifierModel<Scalar>& model);
template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, Delegator<Scalar>& delegator);
template <typename Scalar>
ClassifierModel<Scalar> load_classifier(const std::filesystem::path& path);
template <typename Scalar>
Delegator<Scalar> load_delegator(const std::filesystem::path& path);

}  // namespace skd
