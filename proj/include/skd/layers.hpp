#pragma once

#include "skd/rng.hpp"
#include "skd/tensor.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace skd {

/// How normalization layers treat statistics during a forward pass.
enum class Mode {
    Train,       ///< normalize with batch statistics, update running statistics
    BatchStats,  ///< normalize with batch statistics, running statistics untouched
    Eval,        ///< normalize with running statistics
};

template <typename Scalar>
class BatchNorm2d;

/// A differentiable stage. forward() caches whatever backward() needs, so a layer
/// instance supports one in-flight forward/backward pair at a time.
///
/// backward() returns the gradient with respect to the layer input and, unless
/// gradients are disabled, accumulates parameter gradients with +=.
template <typename Scalar>
class Layer {
public:
    virtual ~Layer() = default;

    virtual Activation<Scalar> forward(const Activation<Scalar>& x, Mode mode) = 0;
    virtual Activation<Scalar> backward(const Activation<Scalar>& grad) = 0;
    [[nodiscard]] virtual Shape output_shape(const Shape& in) const = 0;
    [[nodiscard]] virtual std::unique_ptr<Layer> clone() const = 0;
    [[nodiscard]] virtual std::string describe() const = 0;

    virtual void parameters(std::vector<Parameter<Scalar>*>& /*out*/) {}
    virtual void buffers(std::vector<Buffer<Scalar>>& /*out*/) {}
    virtual void norm_layers(std::vector<BatchNorm2d<Scalar>*>& /*out*/) {}
    virtual void reset(Rng& /*rng*/) {}
    virtual void set_requires_grad(bool on) { requires_grad_ = on; }
    [[nodiscard]] bool requires_grad() const { return requires_grad_; }

protected:
    bool requires_grad_ = true;
};

template <typename Scalar>
using LayerPtr = std::unique_ptr<Layer<Scalar>>;

// Patch extraction shared by the convolution layers. `cols` has one row per
// (channel, ky, kx) triple and one column per (sample, output pixel) pair.
template <typename Scalar>
void im2col(const Matrix<Scalar>& x, const Shape& in, int kernel, int stride, int pad,
            const Shape& out, Matrix<Scalar>& cols);
template <typename Scalar>
void col2im(const Matrix<Scalar>& cols, const Shape& in, int kernel, int stride, int pad,
            const Shape& out, int batch, Matrix<Scalar>& x);

template <typename Scalar>
class Conv2d final : public Layer<Scalar> {
public:
    Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride = 1,
           int pad = 0, bool bias = false);

    Activation<Scalar> forward(const Activation<Scalar>& x, Mode mode) override;
    Activation<Scalar> backward(const Activation<Scalar>& grad) override;
    [[nodiscard]] Shape output_shape(const Shape& in) const override;
    [[nodiscard]] LayerPtr<Scalar> clone() const override {
        return std::make_unique<Conv2d>(*this);
    }
    [[nodiscard]] std::string describe() const override;
    void parameters(std::vector<Parameter<Scalar>*>& out) override;
    void reset(Rng& rng) override;

    Parameter<Scalar>& weight() { return weight_; }

private:
    int in_channels_, out_channels_, kernel_, stride_, pad_;
    Parameter<Scalar> weight_;  // out x (in * k * k)
    std::optional<Parameter<Scalar>> bias_;
    Matrix<Scalar> input_;
    Shape in_shape_{}, out_shape_{};
};

/// Transposed convolution (the adjoint of Conv2d with the same geometry).
template <typename Scalar>
class ConvTranspose2d final : public Layer<Scalar> {
public:
    ConvTranspose2d(std::string name, int in_channels, int out_channels, int kernel, int stride,
                    int pad, int output_pad, bool bias = false);

    Activation<Scalar> forward(const Activation<Scalar>& x, Mode mode) override;
    Activation<Scalar> backward(const Activation<Scalar>& grad) override;
    [[nodiscard]] Shape output_shape(const Shape& in) const override;
    [[nodiscard]] LayerPtr<Scalar> clone() const override {
        return std::make_unique<ConvTranspose2d>(*this);
    }
    [[nodiscard]] std::string describe() const override;
    void parameters(std::vector<Parameter<Scalar>*>& out) override;
    void reset(Rng& rng) override;

private:
    int in_channels_, out_channels_, kernel_, stride_, pad_, output_pad_;
    Parameter<Scalar> weight_;  // in x (out * k * k)
    std::optional<Parameter<Scalar>> bias_;
    Matrix<Scalar> input_;
    Shape in_shape_{}, out_shape_{};
};

template <typename Scalar>
class Linear final : public Layer<Scalar> {
public:
    Linear(std::string name, int in_features, int out_features, bool bias = true);

    Activation<Scalar> forward(const Activation<Scalar>& x, Mode mode) override;
    Activation<Scalar> backward(const Activation<Scalar>& grad) override;
    [[nodiscard]] Shape output_shape(const Shape& in) const override;
    [[nodiscard]] LayerPtr<Scalar> clone() const override {
        return std::make_unique<Linear>(*this);
    }
    [[nodiscard]] std::string describe() const override;
    void parameters(std::vector<Parameter<Scalar>*>& out) override;
    void reset(Rng& rng) override;

    /// Stateless evaluation; does not touch the backward cache.
    [[nodiscard]] Matrix<Scalar> apply(const Matrix<Scalar>& x) const;

    [[nodiscard]] int in_features() const { return in_features_; }
    [[nodiscard]] int out_features() const { return out_features_; }
    Parameter<Scalar>& weight() { return weight_; }
    Parameter<Scalar>& bias() { return *bias_; }
    [[nodiscard]] const Parameter<Scalar>& weight() const { return weight_; }
    [[nodiscard]] const Parameter<Scalar>& bias() const { return *bias_; }

private:
    int in_features_, out_features_;
    Parameter<Scalar> weight_;  // out x in
    std::optional<Parameter<Scalar>> bias_;
    Matrix<Scalar> input_;
    Shape in_shape_{};
};

/// Per-channel batch normalization with running statistics.
///
/// When observation is enabled, every forward pass also records the batch mean and
/// standard deviation sqrt(var + eps) of the layer input, whatever the mode. A gradient
/// with respect to those observed statistics can be attached before backward(); it is
/// then folded into the input gradient.
template <typename Scalar>
class BatchNorm2d final : public Layer<Scalar> {
public:
    BatchNorm2d(std::string name, int channels, Scalar momentum = Scalar(0.1),
                Scalar eps = Scalar(1e-5));

    Activation<Scalar> forward(const Activation<Scalar>& x, Mode mode) override;
    Activation<Scalar> backward(const Activation<Scalar>& grad) override;
    [[nodiscard]] Shape output_shape(const Shape& in) const override { return in; }
    [[nodiscard]] LayerPtr<Scalar> clone() const override {
        return std::make_unique<BatchNorm2d>(*this);
    }
    [[nodiscard]] std::string describe() const override;
    void parameters(std::vector<Parameter<Scalar>*>& out) override;
    void buffers(std::vector<Buffer<Scalar>>& out) override;
    void norm_layers(std::vector<BatchNorm2d<Scalar>*>& out) override { out.push_back(this); }
    void reset(Rng& rng) override;

    [[nodiscard]] int channels() const { return channels_; }
    [[nodiscard]] Scalar eps() const { return eps_; }
    [[nodiscard]] const Matrix<Scalar>& running_mean() const { return running_mean_; }
    [[nodiscard]] const Matrix<Scalar>& running_var() const { return running_var_; }
    Matrix<Scalar>& running_mean() { return running_mean_; }
    Matrix<Scalar>& running_var() { return running_var_; }
    Parameter<Scalar>& gamma() { return gamma_; }
    Parameter<Scalar>& beta() { return beta_; }

    void set_observe(bool on) { observe_ = on; }
    [[nodiscard]] bool observing() const { return observe_; }
    [[nodiscard]] const Vector<Scalar>& observed_mean() const { return observed_mean_; }
    [[nodiscard]] const Vector<Scalar>& observed_std() const { return observed_std_; }
    void set_statistics_gradient(Vector<Scalar> d_mean, Vector<Scalar> d_std);

private:
    int channels_;
    Scalar momentum_, eps_;
    Parameter<Scalar> gamma_, beta_;
    Matrix<Scalar> running_mean_, running_var_;  // 1 x C

    Matrix<Scalar> x_hat_;
    Vector<Scalar> inv_std_;
    bool used_batch_stats_ = false;
    Shape shape_{};

    bool observe_ = false;
    Matrix<Scalar> input_;
    Vector<Scalar> observed_mean_, observed_std_;
    std::optional<std::pair<Vector<Scalar>, Vector<Scalar>>> stat_grad_;
};

template <typename Scalar>
class ReLU final : public Layer<Scalar> {
public:
    Activation<Scalar> forward(const Activation<Scalar>& x, Mode mode) override;
    Activation<Scalar> backward(const Activation<Scalar>& grad) override;
    [[nodiscard]] Shape output_shape(const Shape& in) const override { return in; }
    [[nodiscard]] LayerPtr<Scalar> clone() const override { return std::make_unique<ReLU>(*this); }
    [[nodiscard]] std::string describe() const override { return "ReLU"; }

private:
    Matrix<Scalar> output_;
};

template <typename Scalar>
class LeakyReLU final : public Layer<Scalar> {
public:
    explicit LeakyReLU(Scalar slope = Scalar(0.2)) : slope_(slope) {}
    Activation<Scalar> forward(const Activation<Scalar>& x, Mode mode) override;
    Activation<Scalar> backward(const Activation<Scalar>& grad) override;
    [[nodiscard]] Shape output_shape(const Shape& in) const override { return in; }
    [[nodiscard]] LayerPtr<Scalar> clone() const override {
        return std::make_unique<LeakyReLU>(*this);
    }
    [[nodiscard]] std::string describe() const override { return "LeakyReLU"; }

private:
    Scalar slope_;
    Matrix<Scalar> input_;
};

template <typename Scalar>
class Tanh final : public Layer<Scalar> {
public:
    Activation<Scalar> forward(const Activation<Scalar>& x, Mode mode) override;
    Activation<Scalar> backward(const Activation<Scalar>& grad) override;
    [[nodiscard]] Shape output_shape(const Shape& in) const override { return in; }
    [[nodiscard]] LayerPtr<Scalar> clone() const override { return std::make_unique<Tanh>(*this); }
    [[nodiscard]] std::string describe() const override { return "Tanh"; }

private:
    Matrix<Scalar> output_;
};

template <typename Scalar>
class MaxPool2d final : public Layer<Scalar> {
public:
    MaxPool2d(int kernel, int stride, int pad = 0) : kernel_(kernel), stride_(stride), pad_(pad) {}
    Activation<Scalar> forward(const Activation<Scalar>& x, Mode mode) override;
    Activation<Scalar> backward(const Activation<Scalar>& grad) override;
    [[nodiscard]] Shape output_shape(const Shape& in) const override;
    [[nodiscard]] LayerPtr<Scalar> clone() const override {
        return std::make_unique<MaxPool2d>(*this);
    }
    [[nodiscard]] std::string describe() const override;

private:
    int kernel_, stride_, pad_;
    std::vector<int> argmax_;
    Shape in_shape_{};
};

template <typename Scalar>
class GlobalAvgPool final : public Layer<Scalar> {
public:
    Activation<Scalar> forward(const Activation<Scalar>& x, Mode mode) override;
    Activation<Scalar> backward(const Activation<Scalar>& grad) override;
    [[nodiscard]] Shape output_shape(const Shape& in) const override {
        return {in.channels, 1, 1};
    }
    [[nodiscard]] LayerPtr<Scalar> clone() const override {
        return std::make_unique<GlobalAvgPool>(*this);
    }
    [[nodiscard]] std::string describe() const override { return "GlobalAvgPool"; }

private:
    Shape in_shape_{};
};

/// Nearest-neighbour 2x upsampling.
template <typename Scalar>
class Upsample2x final : public Layer<Scalar> {
public:
    Activation<Scalar> forward(const Activation<Scalar>& x, Mode mode) override;
    Activation<Scalar> backward(const Activation<Scalar>& grad) override;
    [[nodiscard]] Shape output_shape(const Shape& in) const override {
        return {in.channels, 2 * in.height, 2 * in.width};
    }
    [[nodiscard]] LayerPtr<Scalar> clone() const override {
        return std::make_unique<Upsample2x>(*this);
    }
    [[nodiscard]] std::string describe() const override { return "Upsample2x"; }

private:
    Shape in_shape_{};
};

/// Reinterprets the flat per-sample vector with a new shape of equal size.
template <typename Scalar>
class Reshape final : public Layer<Scalar> {
public:
    explicit Reshape(Shape target) : target_(target) {}
    Activation<Scalar> forward(const Activation<Scalar>& x, Mode mode) override;
    Activation<Scalar> backward(const Activation<Scalar>& grad) override;
    [[nodiscard]] Shape output_shape(const Shape& in) const override;
    [[nodiscard]] LayerPtr<Scalar> clone() const override {
        return std::make_unique<Reshape>(*this);
    }
    [[nodiscard]] std::string describe() const override { return "Reshape" + target_.str(); }

private:
    Shape target_;
    Shape in_shape_{};
};

template <typename Scalar>
class Sequential final : public Layer<Scalar> {
public:
    Sequential() = default;
    Sequential(const Sequential& other);
    Sequential& operator=(const Sequential& other);
    Sequential(Sequential&&) noexcept = default;
    Sequential& operator=(Sequential&&) noexcept = default;

    Sequential& add(LayerPtr<Scalar> layer) {
        layers_.push_back(std::move(layer));
        return *this;
    }
    template <typename L, typename... Args>
    Sequential& emplace(Args&&... args) {
        return add(std::make_unique<L>(std::forward<Args>(args)...));
    }

    Activation<Scalar> forward(const Activation<Scalar>& x, Mode mode) override;
    Activation<Scalar> backward(const Activation<Scalar>& grad) override;
    [[nodiscard]] Shape output_shape(const Shape& in) const override;
    [[nodiscard]] LayerPtr<Scalar> clone() const override {
        return std::make_unique<Sequential>(*this);
    }
    [[nodiscard]] std::string describe() const override;
    void parameters(std::vector<Parameter<Scalar>*>& out) override;
    void buffers(std::vector<Buffer<Scalar>>& out) override;
    void norm_layers(std::vector<BatchNorm2d<Scalar>*>& out) override;
    void reset(Rng& rng) override;
    void set_requires_grad(bool on) override;

    [[nodiscard]] std::size_t size() const { return layers_.size(); }
    [[nodiscard]] bool empty() const { return layers_.empty(); }
    Layer<Scalar>& operator[](std::size_t i) { return *layers_[i]; }
    [[nodiscard]] const Layer<Scalar>& operator[](std::size_t i) const { return *layers_[i]; }

private:
    std::vector<LayerPtr<Scalar>> layers_;
};

/// relu(main(x) + shortcut(x)); an empty shortcut is the identity.
template <typename Scalar>
class ResidualBlock final : public Layer<Scalar> {
public:
    ResidualBlock(Sequential<Scalar> main, Sequential<Scalar> shortcut)
        : main_(std::move(main)), shortcut_(std::move(shortcut)) {}

    Activation<Scalar> forward(const Activation<Scalar>& x, Mode mode) override;
    Activation<Scalar> backward(const Activation<Scalar>& grad) override;
    [[nodiscard]] Shape output_shape(const Shape& in) const override {
        return main_.output_shape(in);
    }
    [[nodiscard]] LayerPtr<Scalar> clone() const override {
        return std::make_unique<ResidualBlock>(*this);
    }
    [[nodiscard]] std::string describe() const override;
    void parameters(std::vector<Parameter<Scalar>*>& out) override;
    void buffers(std::vector<Buffer<Scalar>>& out) override;
    void norm_layers(std::vector<BatchNorm2d<Scalar>*>& out) override;
    void reset(Rng& rng) override;
    void set_requires_grad(bool on) override;

private:
    Sequential<Scalar> main_, shortcut_;
    Matrix<Scalar> output_;
};

}  // namespace skd
