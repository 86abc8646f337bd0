#pragma once

#include "skd/tensor.hpp"

#include <cmath>
#include <vector>

namespace skd {

template <typename Scalar>
void zero_grad(const std::vector<Parameter<Scalar>*>& params) {
    for (auto* p : params) p->zero_grad();
}

/// SGD with heavy-ball momentum and decoupled-from-BN L2 weight decay.
template <typename Scalar>
class Sgd {
public:
    Sgd(std::vector<Parameter<Scalar>*> params, double lr, double momentum = 0.9,
        double weight_decay = 5e-4)
        : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
        velocity_.reserve(params_.size());
        for (auto* p : params_) velocity_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
    }

    void step() {
        const auto lr = static_cast<Scalar>(lr_);
        const auto mu = static_cast<Scalar>(momentum_);
        const auto wd = static_cast<Scalar>(weight_decay_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            Matrix<Scalar> g = p.grad;
            if (p.decay && wd != Scalar(0)) g += wd * p.value;
            velocity_[i] = mu * velocity_[i] + g;
            p.value -= lr * velocity_[i];
        }
    }
    void zero_grad() { skd::zero_grad(params_); }
    void set_lr(double lr) { lr_ = lr; }
    [[nodiscard]] double lr() const { return lr_; }

private:
    std::vector<Parameter<Scalar>*> params_;
    std::vector<Matrix<Scalar>> velocity_;
    double lr_, momentum_, weight_decay_;
};

template <typename Scalar>
class Adam {
public:
    Adam(std::vector<Parameter<Scalar>*> params, double lr, double beta1 = 0.9,
         double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto* p : params_) {
            m_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        const auto b1 = static_cast<Scalar>(beta1_);
        const auto b2 = static_cast<Scalar>(beta2_);
        const auto step = static_cast<Scalar>(lr_ / bc1);
        const auto eps = static_cast<Scalar>(eps_);
        const auto rs = static_cast<Scalar>(1.0 / std::sqrt(bc2));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            m_[i] = b1 * m_[i] + (Scalar(1) - b1) * p.grad;
            v_[i] = b2 * v_[i] + (Scalar(1) - b2) * p.grad.cwiseAbs2();
            p.value.array() -= step * m_[i].array() / (v_[i].array().sqrt() * rs + eps);
        }
    }
    void zero_grad() { skd::zero_grad(params_); }
    void set_lr(double lr) { lr_ = lr; }
    [[nodiscard]] double lr() const { return lr_; }

private:
    std::vector<Parameter<Scalar>*> params_;
    std::vector<Matrix<Scalar>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    int t_ = 0;
};

/// lr0 / factor^(epoch / every).
inline double step_decay(double lr0, int epoch, int every, double factor) {
    if (every <= 0) return lr0;
    return lr0 / std::pow(factor, epoch / every);
}

/// lr0 / factor^(number of milestones <= epoch).
inline double milestone_decay(double lr0, int epoch, const std::vector<int>& milestones,
                              double factor) {
    double lr = lr0;
    for (int m : milestones)
        if (epoch >= m) lr /= factor;
    return lr;
}

}  // namespace skd
