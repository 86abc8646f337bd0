#include "skd/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace skd {

namespace {

template <typename Scalar>
void kaiming_normal(Matrix<Scalar>& w, double fan_in, Rng& rng) {
    const double std = std::sqrt(2.0 / fan_in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(std * rng.normal());
}

template <typename Scalar>
void uniform_fill(Matrix<Scalar>& w, double bound, Rng& rng) {
    for (Eigen::Index i = 0; i < w.size(); ++i)
        w.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
}

void require_positive(int v, const char* what) {
    if (v <= 0) throw std::invalid_argument(std::string(what) + " must be positive");
}

}  // namespace

std::string hex_digest(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[h & 0xF];
        h >>= 4;
    }
    return s;
}

// ---------------------------------------------------------------------------
// im2col / col2im

namespace {

// Patches of one sample into rows of `dst` with leading dimension `ld`.
template <typename Scalar>
void im2col_sample(const Scalar* xb, const Shape& in, int kernel, int stride, int pad,
                   const Shape& out, Scalar* dst, Eigen::Index ld) {
    for (int c = 0; c < in.channels; ++c) {
        const Scalar* plane = xb + static_cast<Eigen::Index>(c) * in.plane();
        for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
                const Eigen::Index row = (static_cast<Eigen::Index>(c) * kernel + ky) * kernel + kx;
                Scalar* d0 = dst + row * ld;
                for (int oy = 0; oy < out.height; ++oy) {
                    Scalar* d = d0 + oy * out.width;
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= in.height) {
                        std::fill(d, d + out.width, Scalar(0));
                        continue;
                    }
                    const Scalar* srow = plane + iy * in.width;
                    if (stride == 1) {
                        const int lo = std::max(0, pad - kx);
                        const int hi = std::min(out.width, in.width + pad - kx);
                        std::fill(d, d + lo, Scalar(0));
                        if (hi > lo) std::copy(srow + lo - pad + kx, srow + hi - pad + kx, d + lo);
                        std::fill(d + std::max(lo, hi), d + out.width, Scalar(0));
                        continue;
                    }
                    for (int ox = 0; ox < out.width; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        d[ox] = (ix >= 0 && ix < in.width) ? srow[ix] : Scalar(0);
                    }
                }
            }
        }
    }
}

// Adjoint of im2col_sample, accumulated into xb.
template <typename Scalar>
void col2im_sample(const Scalar* src, Eigen::Index ld, const Shape& in, int kernel, int stride,
                   int pad, const Shape& out, Scalar* xb) {
    for (int c = 0; c < in.channels; ++c) {
        Scalar* plane = xb + static_cast<Eigen::Index>(c) * in.plane();
        for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
                const Eigen::Index row = (static_cast<Eigen::Index>(c) * kernel + ky) * kernel + kx;
                const Scalar* s0 = src + row * ld;
                for (int oy = 0; oy < out.height; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= in.height) continue;
                    const Scalar* s = s0 + oy * out.width;
                    Scalar* drow = plane + iy * in.width;
                    if (stride == 1) {
                        const int lo = std::max(0, pad - kx);
                        const int hi = std::min(out.width, in.width + pad - kx);
                        Scalar* d = drow - pad + kx;
                        for (int ox = lo; ox < hi; ++ox) d[ox] += s[ox];
                        continue;
                    }
                    for (int ox = 0; ox < out.width; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < in.width) drow[ix] += s[ox];
                    }
                }
            }
        }
    }
}

// Samples per GEMM so that each product has a few hundred columns.
int chunk_samples(int plane, int batch) {
    return std::clamp(512 / std::max(plane, 1), 1, std::max(batch, 1));
}

// Rows [first, first + n) of a sample-major activation as a (channels x n*plane) block.
template <typename Scalar>
void gather_channel_major(const Matrix<Scalar>& v, int first, int n, int channels, int plane,
                          Matrix<Scalar>& g) {
    g.resize(channels, static_cast<Eigen::Index>(n) * plane);
    for (int s = 0; s < n; ++s)
        for (int c = 0; c < channels; ++c)
            g.block(c, static_cast<Eigen::Index>(s) * plane, 1, plane) =
                v.block(first + s, static_cast<Eigen::Index>(c) * plane, 1, plane);
}

template <typename Scalar>
void scatter_sample_major(const Matrix<Scalar>& g, int first, int n, int plane, Matrix<Scalar>& v) {
    const auto channels = static_cast<int>(g.rows());
    for (int s = 0; s < n; ++s)
        for (int c = 0; c < channels; ++c)
            v.block(first + s, static_cast<Eigen::Index>(c) * plane, 1, plane) =
                g.block(c, static_cast<Eigen::Index>(s) * plane, 1, plane);
}

}  // namespace

template <typename Scalar>
void im2col(const Matrix<Scalar>& x, const Shape& in, int kernel, int stride, int pad,
            const Shape& out, Matrix<Scalar>& cols) {
    const auto batch = static_cast<int>(x.rows());
    const int P = out.plane();
    const Eigen::Index ncols = static_cast<Eigen::Index>(batch) * P;
    cols.resize(static_cast<Eigen::Index>(in.channels) * kernel * kernel, ncols);
    for (int b = 0; b < batch; ++b)
        im2col_sample(x.data() + static_cast<Eigen::Index>(b) * x.cols(), in, kernel, stride, pad, out,
                      cols.data() + static_cast<Eigen::Index>(b) * P, ncols);
}

template <typename Scalar>
void col2im(const Matrix<Scalar>& cols, const Shape& in, int kernel, int stride, int pad,
            const Shape& out, int batch, Matrix<Scalar>& x) {
    const int P = out.plane();
    x.setZero(batch, in.size());
    for (int b = 0; b < batch; ++b)
        col2im_sample(cols.data() + static_cast<Eigen::Index>(b) * P, cols.cols(), in, kernel, stride,
                      pad, out, x.data() + static_cast<Eigen::Index>(b) * x.cols());
}

namespace {

// Elementwise gate out[i] = key[i] > 0 ? pos(v[i]) : neg(v[i]), written as a plain loop so
// the compiler vectorizes it.
template <typename Scalar, typename Pos, typename Neg>
Matrix<Scalar> gate(const Matrix<Scalar>& key, const Matrix<Scalar>& v, Pos pos, Neg neg) {
    Matrix<Scalar> out(v.rows(), v.cols());
    const Scalar* k = key.data();
    const Scalar* x = v.data();
    Scalar* o = out.data();
    const Eigen::Index n = v.size();
    for (Eigen::Index i = 0; i < n; ++i) o[i] = k[i] > Scalar(0) ? pos(x[i]) : neg(x[i]);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

template <typename Scalar>
Conv2d<Scalar>::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride,
                       int pad, bool bias)
    : in_channels_(in_channels), out_channels_(out_channels), kernel_(kernel), stride_(stride),
      pad_(pad),
      weight_(name + ".weight",
              Matrix<Scalar>::Zero(out_channels, static_cast<Eigen::Index>(in_channels) * kernel * kernel)) {
    require_positive(in_channels, "conv input channels");
    require_positive(out_channels, "conv output channels");
    require_positive(kernel, "conv kernel");
    require_positive(stride, "conv stride");
    if (bias) bias_.emplace(name + ".bias", Matrix<Scalar>::Zero(1, out_channels), false);
}

template <typename Scalar>
Shape Conv2d<Scalar>::output_shape(const Shape& in) const {
    if (in.channels != in_channels_)
        throw std::invalid_argument("conv expects " + std::to_string(in_channels_) +
                                    " channels, got " + in.str());
    const int h = (in.height + 2 * pad_ - kernel_) / stride_ + 1;
    const int w = (in.width + 2 * pad_ - kernel_) / stride_ + 1;
    if (h <= 0 || w <= 0) throw std::invalid_argument("conv input too small: " + in.str());
    return {out_channels_, h, w};
}

template <typename Scalar>
Activation<Scalar> Conv2d<Scalar>::forward(const Activation<Scalar>& x, Mode) {
    in_shape_ = x.shape;
    out_shape_ = output_shape(x.shape);
    input_ = x.values;
    const int batch = x.batch(), P = out_shape_.plane();
    const int chunk = chunk_samples(P, batch);
    Matrix<Scalar> y(batch, out_shape_.size());
    Matrix<Scalar> cols(weight_.value.cols(), static_cast<Eigen::Index>(chunk) * P), prod;
    for (int first = 0; first < batch; first += chunk) {
        const int n = std::min(chunk, batch - first);
        const Eigen::Index w = static_cast<Eigen::Index>(n) * P;
        for (int s = 0; s < n; ++s)
            im2col_sample(x.values.data() + static_cast<Eigen::Index>(first + s) * x.values.cols(), in_shape_,
                          kernel_, stride_, pad_, out_shape_, cols.data() + static_cast<Eigen::Index>(s) * P,
                          cols.cols());
        prod.noalias() = weight_.value * cols.leftCols(w);
        if (bias_) prod.colwise() += bias_->value.transpose().col(0);
        scatter_sample_major(prod, first, n, P, y);
    }
    return Activation<Scalar>(std::move(y), out_shape_);
}

template <typename Scalar>
Activation<Scalar> Conv2d<Scalar>::backward(const Activation<Scalar>& grad) {
    const int batch = grad.batch(), P = out_shape_.plane();
    const int chunk = chunk_samples(P, batch);
    Matrix<Scalar> dx = Matrix<Scalar>::Zero(batch, in_shape_.size());
    Matrix<Scalar> cols(weight_.value.cols(), static_cast<Eigen::Index>(chunk) * P), g, dcols;
    for (int first = 0; first < batch; first += chunk) {
        const int n = std::min(chunk, batch - first);
        const Eigen::Index w = static_cast<Eigen::Index>(n) * P;
        gather_channel_major(grad.values, first, n, out_channels_, P, g);
        if (this->requires_grad_) {
            for (int s = 0; s < n; ++s)
                im2col_sample(input_.data() + static_cast<Eigen::Index>(first + s) * input_.cols(), in_shape_,
                              kernel_, stride_, pad_, out_shape_, cols.data() + static_cast<Eigen::Index>(s) * P,
                              cols.cols());
            weight_.grad.noalias() += g * cols.leftCols(w).transpose();
            if (bias_) bias_->grad += g.rowwise().sum().transpose();
        }
        dcols.noalias() = weight_.value.transpose() * g;
        for (int s = 0; s < n; ++s)
            col2im_sample(dcols.data() + static_cast<Eigen::Index>(s) * P, dcols.cols(), in_shape_, kernel_,
                          stride_, pad_, out_shape_, dx.data() + static_cast<Eigen::Index>(first + s) * dx.cols());
    }
    return Activation<Scalar>(std::move(dx), in_shape_);
}

template <typename Scalar>
std::string Conv2d<Scalar>::describe() const {
    std::ostringstream os;
    os << "Conv(" << kernel_ << "x" << kernel_ << "x" << out_channels_ << ", stride " << stride_
       << ")";
    return os.str();
}

template <typename Scalar>
void Conv2d<Scalar>::parameters(std::vector<Parameter<Scalar>*>& out) {
    out.push_back(&weight_);
    if (bias_) out.push_back(&*bias_);
}

template <typename Scalar>
void Conv2d<Scalar>::reset(Rng& rng) {
    kaiming_normal(weight_.value, static_cast<double>(in_channels_) * kernel_ * kernel_, rng);
    if (bias_) bias_->value.setZero();
}

// ---------------------------------------------------------------------------
// ConvTranspose2d

template <typename Scalar>
ConvTranspose2d<Scalar>::ConvTranspose2d(std::string name, int in_channels, int out_channels,
                                         int kernel, int stride, int pad, int output_pad, bool bias)
    : in_channels_(in_channels), out_channels_(out_channels), kernel_(kernel), stride_(stride),
      pad_(pad), output_pad_(output_pad),
      weight_(name + ".weight",
              Matrix<Scalar>::Zero(in_channels, static_cast<Eigen::Index>(out_channels) * kernel * kernel)) {
    require_positive(in_channels, "deconv input channels");
    require_positive(out_channels, "deconv output channels");
    if (output_pad >= stride) throw std::invalid_argument("deconv output padding must be < stride");
    if (bias) bias_.emplace(name + ".bias", Matrix<Scalar>::Zero(1, out_channels), false);
}

template <typename Scalar>
Shape ConvTranspose2d<Scalar>::output_shape(const Shape& in) const {
    if (in.channels != in_channels_)
        throw std::invalid_argument("deconv expects " + std::to_string(in_channels_) +
                                    " channels, got " + in.str());
    return {out_channels_, (in.height - 1) * stride_ - 2 * pad_ + kernel_ + output_pad_,
            (in.width - 1) * stride_ - 2 * pad_ + kernel_ + output_pad_};
}

template <typename Scalar>
Activation<Scalar> ConvTranspose2d<Scalar>::forward(const Activation<Scalar>& x, Mode) {
    in_shape_ = x.shape;
    out_shape_ = output_shape(x.shape);
    input_ = x.values;
    const int batch = x.batch(), P = in_shape_.plane();
    const int chunk = chunk_samples(P, batch);
    Matrix<Scalar> y = Matrix<Scalar>::Zero(batch, out_shape_.size());
    Matrix<Scalar> xin, cols;
    for (int first = 0; first < batch; first += chunk) {
        const int n = std::min(chunk, batch - first);
        gather_channel_major(x.values, first, n, in_channels_, P, xin);
        cols.noalias() = weight_.value.transpose() * xin;
        // Scatter as the adjoint of a convolution from the output grid onto the input grid.
        for (int s = 0; s < n; ++s)
            col2im_sample(cols.data() + static_cast<Eigen::Index>(s) * P, cols.cols(), out_shape_, kernel_,
                          stride_, pad_, in_shape_, y.data() + static_cast<Eigen::Index>(first + s) * y.cols());
    }
    if (bias_) {
        const int Q = out_shape_.plane();
        for (int b = 0; b < batch; ++b)
            for (int c = 0; c < out_channels_; ++c)
                y.block(b, static_cast<Eigen::Index>(c) * Q, 1, Q).array() += bias_->value(0, c);
    }
    return Activation<Scalar>(std::move(y), out_shape_);
}

template <typename Scalar>
Activation<Scalar> ConvTranspose2d<Scalar>::backward(const Activation<Scalar>& grad) {
    const int batch = grad.batch(), P = in_shape_.plane();
    const int chunk = chunk_samples(P, batch);
    Matrix<Scalar> dx(batch, in_shape_.size());
    Matrix<Scalar> gcols(weight_.value.cols(), static_cast<Eigen::Index>(chunk) * P), xin, prod;
    for (int first = 0; first < batch; first += chunk) {
        const int n = std::min(chunk, batch - first);
        const Eigen::Index w = static_cast<Eigen::Index>(n) * P;
        for (int s = 0; s < n; ++s)
            im2col_sample(grad.values.data() + static_cast<Eigen::Index>(first + s) * grad.values.cols(),
                          out_shape_, kernel_, stride_, pad_, in_shape_,
                          gcols.data() + static_cast<Eigen::Index>(s) * P, gcols.cols());
        if (this->requires_grad_) {
            gather_channel_major(input_, first, n, in_channels_, P, xin);
            weight_.grad.noalias() += xin * gcols.leftCols(w).transpose();
        }
        prod.noalias() = weight_.value * gcols.leftCols(w);
        scatter_sample_major(prod, first, n, P, dx);
    }
    if (this->requires_grad_ && bias_) {
        const int Q = out_shape_.plane();
        for (int c = 0; c < out_channels_; ++c)
            bias_->grad(0, c) += grad.values.middleCols(static_cast<Eigen::Index>(c) * Q, Q).sum();
    }
    return Activation<Scalar>(std::move(dx), in_shape_);
}

template <typename Scalar>
std::string ConvTranspose2d<Scalar>::describe() const {
    std::ostringstream os;
    os << "Deconv(" << kernel_ << "x" << kernel_ << "x" << out_channels_ << ", " << stride_ << "x)";
    return os.str();
}

template <typename Scalar>
void ConvTranspose2d<Scalar>::parameters(std::vector<Parameter<Scalar>*>& out) {
    out.push_back(&weight_);
    if (bias_) out.push_back(&*bias_);
}

template <typename Scalar>
void ConvTranspose2d<Scalar>::reset(Rng& rng) {
    const double fan_in =
        static_cast<double>(in_channels_) * kernel_ * kernel_ / (stride_ * stride_);
    kaiming_normal(weight_.value, fan_in, rng);
    if (bias_) bias_->value.setZero();
}

// ---------------------------------------------------------------------------
// Linear

template <typename Scalar>
Linear<Scalar>::Linear(std::string name, int in_features, int out_features, bool bias)
    : in_features_(in_features), out_features_(out_features),
      weight_(name + ".weight", Matrix<Scalar>::Zero(out_features, in_features)) {
    require_positive(in_features, "linear input width");
    if (out_features < 0) throw std::invalid_argument("linear output width must be >= 0");
    if (bias) bias_.emplace(name + ".bias", Matrix<Scalar>::Zero(1, out_features), false);
}

template <typename Scalar>
Shape Linear<Scalar>::output_shape(const Shape& in) const {
    if (in.size() != in_features_)
        throw std::invalid_argument("linear expects " + std::to_string(in_features_) +
                                    " inputs, got " + in.str());
    return {out_features_, 1, 1};
}

template <typename Scalar>
Matrix<Scalar> Linear<Scalar>::apply(const Matrix<Scalar>& x) const {
    if (x.cols() != in_features_)
        throw std::invalid_argument("linear expects " + std::to_string(in_features_) +
                                    " inputs, got " + std::to_string(x.cols()));
    Matrix<Scalar> y = x * weight_.value.transpose();
    if (bias_) y.rowwise() += bias_->value.row(0);
    return y;
}

template <typename Scalar>
Activation<Scalar> Linear<Scalar>::forward(const Activation<Scalar>& x, Mode) {
    const Shape out = output_shape(x.shape);
    in_shape_ = x.shape;
    input_ = x.values;
    return Activation<Scalar>(apply(x.values), out);
}

template <typename Scalar>
Activation<Scalar> Linear<Scalar>::backward(const Activation<Scalar>& grad) {
    if (this->requires_grad_) {
        weight_.grad.noalias() += grad.values.transpose() * input_;
        if (bias_) bias_->grad += grad.values.colwise().sum();
    }
    return Activation<Scalar>(grad.values * weight_.value, in_shape_);
}

template <typename Scalar>
std::string Linear<Scalar>::describe() const {
    return "FC(" + std::to_string(in_features_) + "->" + std::to_string(out_features_) + ")";
}

template <typename Scalar>
void Linear<Scalar>::parameters(std::vector<Parameter<Scalar>*>& out) {
    out.push_back(&weight_);
    if (bias_) out.push_back(&*bias_);
}

template <typename Scalar>
void Linear<Scalar>::reset(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features_));
    uniform_fill(weight_.value, bound, rng);
    if (bias_) uniform_fill(bias_->value, bound, rng);
}

// ---------------------------------------------------------------------------
// BatchNorm2d

template <typename Scalar>
BatchNorm2d<Scalar>::BatchNorm2d(std::string name, int channels, Scalar momentum, Scalar eps)
    : channels_(channels), momentum_(momentum), eps_(eps),
      gamma_(name + ".gamma", Matrix<Scalar>::Ones(1, channels), false),
      beta_(name + ".beta", Matrix<Scalar>::Zero(1, channels), false),
      running_mean_(Matrix<Scalar>::Zero(1, channels)),
      running_var_(Matrix<Scalar>::Ones(1, channels)) {
    require_positive(channels, "batch norm channels");
}

namespace {

template <typename Scalar>
using Segment = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
template <typename Scalar>
using ConstSegment = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

// Contiguous plane of channel c in sample b.
template <typename Scalar>
ConstSegment<Scalar> plane_of(const Matrix<Scalar>& m, int b, int c, int P) {
    return ConstSegment<Scalar>(m.data() + static_cast<Eigen::Index>(b) * m.cols() + static_cast<Eigen::Index>(c) * P, P);
}
template <typename Scalar>
Segment<Scalar> plane_of(Matrix<Scalar>& m, int b, int c, int P) {
    return Segment<Scalar>(m.data() + static_cast<Eigen::Index>(b) * m.cols() + static_cast<Eigen::Index>(c) * P, P);
}

}  // namespace

template <typename Scalar>
Activation<Scalar> BatchNorm2d<Scalar>::forward(const Activation<Scalar>& x, Mode mode) {
    if (x.shape.channels != channels_)
        throw std::invalid_argument("batch norm expects " + std::to_string(channels_) +
                                    " channels, got " + x.shape.str());
    shape_ = x.shape;
    const int batch = x.batch();
    const int P = x.shape.plane();
    const double count = static_cast<double>(batch) * P;

    Vector<Scalar> batch_mean(channels_), batch_var(channels_);
    for (int c = 0; c < channels_; ++c) {
        double sum = 0.0, sq = 0.0;
        for (int b = 0; b < batch; ++b) sum += static_cast<double>(plane_of(x.values, b, c, P).sum());
        const double mean = sum / count;
        for (int b = 0; b < batch; ++b)
            sq += static_cast<double>((plane_of(x.values, b, c, P) - static_cast<Scalar>(mean)).square().sum());
        batch_mean(c) = static_cast<Scalar>(mean);
        batch_var(c) = static_cast<Scalar>(sq / count);
    }

    if (observe_) {
        input_ = x.values;
        observed_mean_ = batch_mean;
        observed_std_ = (batch_var.array() + eps_).sqrt().matrix();
    }

    used_batch_stats_ = mode != Mode::Eval;
    if (mode == Mode::Train) {
        const Scalar unbias = count > 1 ? static_cast<Scalar>(count / (count - 1)) : Scalar(1);
        running_mean_ = (Scalar(1) - momentum_) * running_mean_ + momentum_ * batch_mean.transpose();
        running_var_ =
            (Scalar(1) - momentum_) * running_var_ + momentum_ * unbias * batch_var.transpose();
    }

    inv_std_.resize(channels_);
    x_hat_.resize(batch, x.values.cols());
    Matrix<Scalar> y(batch, x.values.cols());
    for (int c = 0; c < channels_; ++c) {
        const Scalar mean = used_batch_stats_ ? batch_mean(c) : running_mean_(0, c);
        const Scalar var = used_batch_stats_ ? batch_var(c) : running_var_(0, c);
        const Scalar is = Scalar(1) / std::sqrt(var + eps_);
        inv_std_(c) = is;
        const Scalar g = gamma_.value(0, c), bt = beta_.value(0, c);
        for (int b = 0; b < batch; ++b) {
            auto xh = plane_of(x_hat_, b, c, P);
            xh = (plane_of(x.values, b, c, P) - mean) * is;
            plane_of(y, b, c, P) = xh * g + bt;
        }
    }
    return Activation<Scalar>(std::move(y), x.shape);
}

template <typename Scalar>
void BatchNorm2d<Scalar>::set_statistics_gradient(Vector<Scalar> d_mean, Vector<Scalar> d_std) {
    if (!observe_) throw std::logic_error("statistics gradient requires observation enabled");
    if (d_mean.size() != channels_ || d_std.size() != channels_)
        throw std::invalid_argument("statistics gradient width mismatch");
    stat_grad_.emplace(std::move(d_mean), std::move(d_std));
}

template <typename Scalar>
Activation<Scalar> BatchNorm2d<Scalar>::backward(const Activation<Scalar>& grad) {
    const int batch = grad.batch();
    const int P = shape_.plane();
    const Scalar count = static_cast<Scalar>(batch) * static_cast<Scalar>(P);
    Matrix<Scalar> dx(batch, grad.values.cols());
    for (int c = 0; c < channels_; ++c) {
        Scalar sum_dy = 0, sum_dy_xhat = 0;
        for (int b = 0; b < batch; ++b) {
            const auto dy = plane_of(grad.values, b, c, P);
            sum_dy += dy.sum();
            sum_dy_xhat += (dy * plane_of(x_hat_, b, c, P)).sum();
        }
        if (this->requires_grad_) {
            gamma_.grad(0, c) += sum_dy_xhat;
            beta_.grad(0, c) += sum_dy;
        }
        const Scalar scale = gamma_.value(0, c) * inv_std_(c);
        const Scalar mean_dy = sum_dy / count, mean_dy_xhat = sum_dy_xhat / count;
        for (int b = 0; b < batch; ++b) {
            auto d = plane_of(dx, b, c, P);
            const auto dy = plane_of(grad.values, b, c, P);
            if (used_batch_stats_)
                d = scale * (dy - mean_dy - plane_of(x_hat_, b, c, P) * mean_dy_xhat);
            else
                d = scale * dy;
        }
        if (stat_grad_) {
            const Scalar dm = stat_grad_->first(c) / count;
            const Scalar ds = stat_grad_->second(c) / (count * observed_std_(c));
            const Scalar mu = observed_mean_(c);
            for (int b = 0; b < batch; ++b)
                plane_of(dx, b, c, P) += dm + ds * (plane_of(input_, b, c, P) - mu);
        }
    }
    stat_grad_.reset();
    return Activation<Scalar>(std::move(dx), shape_);
}

template <typename Scalar>
std::string BatchNorm2d<Scalar>::describe() const {
    return "BN(" + std::to_string(channels_) + ")";
}

template <typename Scalar>
void BatchNorm2d<Scalar>::parameters(std::vector<Parameter<Scalar>*>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
}

template <typename Scalar>
void BatchNorm2d<Scalar>::buffers(std::vector<Buffer<Scalar>>& out) {
    const std::string base = gamma_.name.substr(0, gamma_.name.size() - 6);
    out.push_back({base + ".running_mean", &running_mean_});
    out.push_back({base + ".running_var", &running_var_});
}

template <typename Scalar>
void BatchNorm2d<Scalar>::reset(Rng&) {
    gamma_.value.setOnes();
    beta_.value.setZero();
    running_mean_.setZero();
    running_var_.setOnes();
}

// ---------------------------------------------------------------------------
// Pointwise activations

template <typename Scalar>
Activation<Scalar> ReLU<Scalar>::forward(const Activation<Scalar>& x, Mode) {
    output_ = x.values.cwiseMax(Scalar(0));
    return Activation<Scalar>(output_, x.shape);
}

template <typename Scalar>
Activation<Scalar> ReLU<Scalar>::backward(const Activation<Scalar>& grad) {
    Matrix<Scalar> dx = gate(output_, grad.values, [](Scalar g) { return g; }, [](Scalar) { return Scalar(0); });
    return Activation<Scalar>(std::move(dx), grad.shape);
}

template <typename Scalar>
Activation<Scalar> LeakyReLU<Scalar>::forward(const Activation<Scalar>& x, Mode) {
    input_ = x.values;
    const Scalar a = slope_;
    Matrix<Scalar> y = gate(x.values, x.values, [](Scalar v) { return v; }, [a](Scalar v) { return a * v; });
    return Activation<Scalar>(std::move(y), x.shape);
}

template <typename Scalar>
Activation<Scalar> LeakyReLU<Scalar>::backward(const Activation<Scalar>& grad) {
    const Scalar a = slope_;
    Matrix<Scalar> dx = gate(input_, grad.values, [](Scalar g) { return g; }, [a](Scalar g) { return a * g; });
    return Activation<Scalar>(std::move(dx), grad.shape);
}

template <typename Scalar>
Activation<Scalar> Tanh<Scalar>::forward(const Activation<Scalar>& x, Mode) {
    output_ = x.values.array().tanh().matrix();
    return Activation<Scalar>(output_, x.shape);
}

template <typename Scalar>
Activation<Scalar> Tanh<Scalar>::backward(const Activation<Scalar>& grad) {
    Matrix<Scalar> dx = (grad.values.array() * (Scalar(1) - output_.array().square())).matrix();
    return Activation<Scalar>(std::move(dx), grad.shape);
}

// ---------------------------------------------------------------------------
// Pooling, resampling, reshaping

template <typename Scalar>
Shape MaxPool2d<Scalar>::output_shape(const Shape& in) const {
    const int h = (in.height + 2 * pad_ - kernel_) / stride_ + 1;
    const int w = (in.width + 2 * pad_ - kernel_) / stride_ + 1;
    if (h <= 0 || w <= 0) throw std::invalid_argument("max pool input too small: " + in.str());
    return {in.channels, h, w};
}

template <typename Scalar>
Activation<Scalar> MaxPool2d<Scalar>::forward(const Activation<Scalar>& x, Mode) {
    in_shape_ = x.shape;
    const Shape out = output_shape(x.shape);
    const int batch = x.batch();
    Matrix<Scalar> y(batch, out.size());
    argmax_.assign(static_cast<std::size_t>(batch) * out.size(), 0);
    if (kernel_ == 2 && stride_ == 2 && pad_ == 0) {
        const int W = in_shape_.width;
        for (int b = 0; b < batch; ++b) {
            const Scalar* xb = x.values.data() + static_cast<Eigen::Index>(b) * x.values.cols();
            Scalar* yb = y.data() + static_cast<Eigen::Index>(b) * y.cols();
            int* ab = argmax_.data() + static_cast<std::size_t>(b) * out.size();
            for (int c = 0; c < out.channels; ++c)
                for (int oy = 0; oy < out.height; ++oy) {
                    const int row = (c * in_shape_.height + 2 * oy) * W;
                    for (int ox = 0; ox < out.width; ++ox) {
                        int best_idx = row + 2 * ox;
                        const int cand[3] = {best_idx + 1, best_idx + W, best_idx + W + 1};
                        for (int k : cand)
                            if (xb[k] > xb[best_idx]) best_idx = k;
                        const int o = (c * out.height + oy) * out.width + ox;
                        yb[o] = xb[best_idx];
                        ab[o] = best_idx;
                    }
                }
        }
        return Activation<Scalar>(std::move(y), out);
    }
    for (int b = 0; b < batch; ++b) {
        const Scalar* xb = x.values.data() + static_cast<Eigen::Index>(b) * x.values.cols();
        for (int c = 0; c < out.channels; ++c) {
            for (int oy = 0; oy < out.height; ++oy) {
                for (int ox = 0; ox < out.width; ++ox) {
                    Scalar best = -std::numeric_limits<Scalar>::infinity();
                    int best_idx = -1;
                    for (int ky = 0; ky < kernel_; ++ky) {
                        const int iy = oy * stride_ - pad_ + ky;
                        if (iy < 0 || iy >= in_shape_.height) continue;
                        for (int kx = 0; kx < kernel_; ++kx) {
                            const int ix = ox * stride_ - pad_ + kx;
                            if (ix < 0 || ix >= in_shape_.width) continue;
                            const int idx = (c * in_shape_.height + iy) * in_shape_.width + ix;
                            if (best_idx < 0 || xb[idx] > best) {
                                best = xb[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    const int o = (c * out.height + oy) * out.width + ox;
                    y(b, o) = best;
                    argmax_[static_cast<std::size_t>(b) * out.size() + o] = best_idx;
                }
            }
        }
    }
    return Activation<Scalar>(std::move(y), out);
}

template <typename Scalar>
Activation<Scalar> MaxPool2d<Scalar>::backward(const Activation<Scalar>& grad) {
    Matrix<Scalar> dx = Matrix<Scalar>::Zero(grad.batch(), in_shape_.size());
    const auto out_size = grad.values.cols();
    for (int b = 0; b < grad.batch(); ++b)
        for (Eigen::Index o = 0; o < out_size; ++o)
            dx(b, argmax_[static_cast<std::size_t>(b * out_size + o)]) += grad.values(b, o);
    return Activation<Scalar>(std::move(dx), in_shape_);
}

template <typename Scalar>
std::string MaxPool2d<Scalar>::describe() const {
    return "MaxPool(" + std::to_string(kernel_) + ", stride " + std::to_string(stride_) + ")";
}

template <typename Scalar>
Activation<Scalar> GlobalAvgPool<Scalar>::forward(const Activation<Scalar>& x, Mode) {
    in_shape_ = x.shape;
    const int P = x.shape.plane();
    Matrix<Scalar> y(x.batch(), x.shape.channels);
    for (int c = 0; c < x.shape.channels; ++c)
        y.col(c) = x.values.middleCols(static_cast<Eigen::Index>(c) * P, P).rowwise().mean();
    return Activation<Scalar>(std::move(y), {x.shape.channels, 1, 1});
}

template <typename Scalar>
Activation<Scalar> GlobalAvgPool<Scalar>::backward(const Activation<Scalar>& grad) {
    const int P = in_shape_.plane();
    Matrix<Scalar> dx(grad.batch(), in_shape_.size());
    for (int c = 0; c < in_shape_.channels; ++c)
        dx.middleCols(static_cast<Eigen::Index>(c) * P, P) =
            (grad.values.col(c) / static_cast<Scalar>(P)).replicate(1, P);
    return Activation<Scalar>(std::move(dx), in_shape_);
}

template <typename Scalar>
Activation<Scalar> Upsample2x<Scalar>::forward(const Activation<Scalar>& x, Mode) {
    in_shape_ = x.shape;
    const Shape out = output_shape(x.shape);
    Matrix<Scalar> y(x.batch(), out.size());
    for (int b = 0; b < x.batch(); ++b) {
        const Scalar* src = x.values.data() + static_cast<Eigen::Index>(b) * x.values.cols();
        Scalar* dst = y.data() + static_cast<Eigen::Index>(b) * y.cols();
        for (int c = 0; c < out.channels; ++c)
            for (int oy = 0; oy < out.height; ++oy)
                for (int ox = 0; ox < out.width; ++ox)
                    dst[(c * out.height + oy) * out.width + ox] =
                        src[(c * in_shape_.height + oy / 2) * in_shape_.width + ox / 2];
    }
    return Activation<Scalar>(std::move(y), out);
}

template <typename Scalar>
Activation<Scalar> Upsample2x<Scalar>::backward(const Activation<Scalar>& grad) {
    const Shape out = output_shape(in_shape_);
    Matrix<Scalar> dx = Matrix<Scalar>::Zero(grad.batch(), in_shape_.size());
    for (int b = 0; b < grad.batch(); ++b) {
        const Scalar* src = grad.values.data() + static_cast<Eigen::Index>(b) * grad.values.cols();
        Scalar* dst = dx.data() + static_cast<Eigen::Index>(b) * dx.cols();
        for (int c = 0; c < out.channels; ++c)
            for (int oy = 0; oy < out.height; ++oy)
                for (int ox = 0; ox < out.width; ++ox)
                    dst[(c * in_shape_.height + oy / 2) * in_shape_.width + ox / 2] +=
                        src[(c * out.height + oy) * out.width + ox];
    }
    return Activation<Scalar>(std::move(dx), in_shape_);
}

template <typename Scalar>
Shape Reshape<Scalar>::output_shape(const Shape& in) const {
    if (in.size() != target_.size())
        throw std::invalid_argument("cannot reshape " + in.str() + " to " + target_.str());
    return target_;
}

template <typename Scalar>
Activation<Scalar> Reshape<Scalar>::forward(const Activation<Scalar>& x, Mode) {
    in_shape_ = x.shape;
    return Activation<Scalar>(x.values, output_shape(x.shape));
}

template <typename Scalar>
Activation<Scalar> Reshape<Scalar>::backward(const Activation<Scalar>& grad) {
    return Activation<Scalar>(grad.values, in_shape_);
}

// ---------------------------------------------------------------------------
// Containers

template <typename Scalar>
Sequential<Scalar>::Sequential(const Sequential& other) : Layer<Scalar>(other) {
    layers_.reserve(other.layers_.size());
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

template <typename Scalar>
Sequential<Scalar>& Sequential<Scalar>::operator=(const Sequential& other) {
    if (this != &other) {
        Sequential tmp(other);
        *this = std::move(tmp);
    }
    return *this;
}

template <typename Scalar>
Activation<Scalar> Sequential<Scalar>::forward(const Activation<Scalar>& x, Mode mode) {
    if (layers_.empty()) return x;
    Activation<Scalar> h = layers_.front()->forward(x, mode);
    for (std::size_t i = 1; i < layers_.size(); ++i) h = layers_[i]->forward(h, mode);
    return h;
}

template <typename Scalar>
Activation<Scalar> Sequential<Scalar>::backward(const Activation<Scalar>& grad) {
    if (layers_.empty()) return grad;
    Activation<Scalar> g = layers_.back()->backward(grad);
    for (std::size_t i = layers_.size() - 1; i-- > 0;) g = layers_[i]->backward(g);
    return g;
}

template <typename Scalar>
Shape Sequential<Scalar>::output_shape(const Shape& in) const {
    Shape s = in;
    for (const auto& l : layers_) s = l->output_shape(s);
    return s;
}

template <typename Scalar>
std::string Sequential<Scalar>::describe() const {
    std::string out;
    for (const auto& l : layers_) {
        if (!out.empty()) out += " -> ";
        out += l->describe();
    }
    return out;
}

template <typename Scalar>
void Sequential<Scalar>::parameters(std::vector<Parameter<Scalar>*>& out) {
    for (auto& l : layers_) l->parameters(out);
}

template <typename Scalar>
void Sequential<Scalar>::buffers(std::vector<Buffer<Scalar>>& out) {
    for (auto& l : layers_) l->buffers(out);
}

template <typename Scalar>
void Sequential<Scalar>::norm_layers(std::vector<BatchNorm2d<Scalar>*>& out) {
    for (auto& l : layers_) l->norm_layers(out);
}

template <typename Scalar>
void Sequential<Scalar>::reset(Rng& rng) {
    for (auto& l : layers_) l->reset(rng);
}

template <typename Scalar>
void Sequential<Scalar>::set_requires_grad(bool on) {
    this->requires_grad_ = on;
    for (auto& l : layers_) l->set_requires_grad(on);
}

template <typename Scalar>
Activation<Scalar> ResidualBlock<Scalar>::forward(const Activation<Scalar>& x, Mode mode) {
    Activation<Scalar> m = main_.forward(x, mode);
    if (shortcut_.empty()) {
        m.values += x.values;
    } else {
        m.values += shortcut_.forward(x, mode).values;
    }
    output_ = m.values.cwiseMax(Scalar(0));
    return Activation<Scalar>(output_, m.shape);
}

template <typename Scalar>
Activation<Scalar> ResidualBlock<Scalar>::backward(const Activation<Scalar>& grad) {
    const Activation<Scalar> g(
        gate(output_, grad.values, [](Scalar v) { return v; }, [](Scalar) { return Scalar(0); }), grad.shape);
    Activation<Scalar> dx = main_.backward(g);
    if (shortcut_.empty()) {
        dx.values += g.values;
    } else {
        dx.values += shortcut_.backward(g).values;
    }
    return dx;
}

template <typename Scalar>
std::string ResidualBlock<Scalar>::describe() const {
    return "Residual[" + main_.describe() +
           (shortcut_.empty() ? std::string(" | id") : " | " + shortcut_.describe()) + "]";
}

template <typename Scalar>
void ResidualBlock<Scalar>::parameters(std::vector<Parameter<Scalar>*>& out) {
    main_.parameters(out);
    shortcut_.parameters(out);
}

template <typename Scalar>
void ResidualBlock<Scalar>::buffers(std::vector<Buffer<Scalar>>& out) {
    main_.buffers(out);
    shortcut_.buffers(out);
}

template <typename Scalar>
void ResidualBlock<Scalar>::norm_layers(std::vector<BatchNorm2d<Scalar>*>& out) {
    main_.norm_layers(out);
    shortcut_.norm_layers(out);
}

template <typename Scalar>
void ResidualBlock<Scalar>::reset(Rng& rng) {
    main_.reset(rng);
    shortcut_.reset(rng);
}

template <typename Scalar>
void ResidualBlock<Scalar>::set_requires_grad(bool on) {
    this->requires_grad_ = on;
    main_.set_requires_grad(on);
    shortcut_.set_requires_grad(on);
}

#define SKD_INSTANTIATE_LAYERS(T)                                                               \
    template void im2col<T>(const Matrix<T>&, const Shape&, int, int, int, const Shape&,         \
                            Matrix<T>&);                                                        \
    template void col2im<T>(const Matrix<T>&, const Shape&, int, int, int, const Shape&, int,    \
                            Matrix<T>&);                                                        \
    template class Conv2d<T>;                                                                   \
    template class ConvTranspose2d<T>;                                                          \
    template class Linear<T>;                                                                   \
    template class BatchNorm2d<T>;                                                              \
    template class ReLU<T>;                                                                     \
    template class LeakyReLU<T>;                                                                \
    template class Tanh<T>;                                                                     \
    template class MaxPool2d<T>;                                                                \
    template class GlobalAvgPool<T>;                                                            \
    template class Upsample2x<T>;                                                               \
    template class Reshape<T>;                                                                  \
    template class Sequential<T>;                                                               \
    template class ResidualBlock<T>;

SKD_INSTANTIATE_LAYERS(float)
SKD_INSTANTIATE_LAYERS(double)

}  // namespace skd
