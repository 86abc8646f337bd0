#pragma once

// Training objectives for delegator training and incremental learning. Every
// objective is a pure function of its direct inputs; the *_grad variants also
// return the analytic gradient with respect to those inputs. All batch
// reductions are means over rows.

#include "skd/networks.hpp"
#include "skd/tensor.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace skd {

/// Weights of the explore-phase objective. The category, diversity and
/// feature-statistic terms carry unit weight and can only be switched off.
struct ExploreWeights {
    double lambda_exp = 1.0;
    bool use_cat = true;
    bool use_div = true;
    bool use_rfeature = true;

    void validate() const {
        if (!(lambda_exp >= 0.0)) throw std::invalid_argument("lambda_exp must be >= 0");
    }
};

/// Classification weight schedule beta / (N * sum of class counts up to task n).
struct GammaSchedule {
    double beta = 5.0;
    int total_tasks = 1;
    std::vector<int> class_counts;

    void validate() const {
        if (!(beta > 0.0)) throw std::invalid_argument("beta must be > 0");
        if (total_tasks < 1) throw std::invalid_argument("total_tasks must be >= 1");
        for (int c : class_counts)
            if (c <= 0) throw std::invalid_argument("class counts must be positive");
    }
};

template <typename Scalar>
struct PairGradient {
    Scalar value{};
    Matrix<Scalar> grad_a;
    Matrix<Scalar> grad_b;
};

template <typename Scalar>
struct Gradient {
    Scalar value{};
    Matrix<Scalar> grad;
};

/// (mean, standard deviation) per channel of one normalization layer.
template <typename Scalar>
using Moments = std::pair<Vector<Scalar>, Vector<Scalar>>;

template <typename Scalar>
struct MomentsGradient {
    Scalar value{};
    std::vector<Vector<Scalar>> d_mean;
    std::vector<Vector<Scalar>> d_std;
};

namespace detail {

template <typename DA, typename DB>
void require_same_shape(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b,
                        const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(what) + ": shape mismatch (" +
                                    std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()) + ")");
    if (a.rows() == 0) throw std::invalid_argument(std::string(what) + ": empty batch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Feature cosine discrepancy: mean over rows of 1 - cos(a_i, b_i).

template <typename DA, typename DB>
auto feature_cosine_discrepancy_grad(const Eigen::MatrixBase<DA>& a,
                                     const Eigen::MatrixBase<DB>& b) {
    using Scalar = typename DA::Scalar;
    detail::require_same_shape(a, b, "feature_cosine_discrepancy");
    const auto n = a.rows();
    PairGradient<Scalar> out;
    out.grad_a.resize(n, a.cols());
    out.grad_b.resize(n, a.cols());
    Scalar total = 0;
    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Scalar na = a.row(i).norm();
        const Scalar nb = b.row(i).norm();
        if (!(na > Scalar(0)) || !(nb > Scalar(0)))
            throw std::domain_error("feature_cosine_discrepancy: zero-norm row " + std::to_string(i));
        const auto ua = (a.row(i) / na).eval();
        const auto ub = (b.row(i) / nb).eval();
        const Scalar cos = ua.dot(ub);
        total += Scalar(1) - cos;
        out.grad_a.row(i) = -inv_n * (ub - cos * ua) / na;
        out.grad_b.row(i) = -inv_n * (ua - cos * ub) / nb;
    }
    out.value = total * inv_n;
    return out;
}

template <typename DA, typename DB>
typename DA::Scalar feature_cosine_discrepancy(const Eigen::MatrixBase<DA>& a,
                                               const Eigen::MatrixBase<DB>& b) {
    return feature_cosine_discrepancy_grad(a, b).value;
}

// ---------------------------------------------------------------------------
// Softmax helpers

template <typename Derived>
auto log_softmax(const Eigen::MatrixBase<Derived>& logits) {
    using Scalar = typename Derived::Scalar;
    Matrix<Scalar> out = logits;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        const Scalar m = out.row(i).maxCoeff();
        out.row(i).array() -= m;
        const Scalar lse = std::log(out.row(i).array().exp().sum());
        out.row(i).array() -= lse;
    }
    return out;
}

template <typename Derived>
auto softmax(const Eigen::MatrixBase<Derived>& logits) {
    using Scalar = typename Derived::Scalar;
    Matrix<Scalar> out = log_softmax(logits).array().exp().matrix();
    return out;
}

/// Pulls a gradient with respect to softmax scores back to the logits.
template <typename DP, typename DG>
auto softmax_backward(const Eigen::MatrixBase<DP>& probs, const Eigen::MatrixBase<DG>& d_probs) {
    using Scalar = typename DP::Scalar;
    Matrix<Scalar> out(probs.rows(), probs.cols());
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        const Scalar inner = probs.row(i).dot(d_probs.row(i));
        out.row(i) = probs.row(i).cwiseProduct((d_probs.row(i).array() - inner).matrix());
    }
    return out;
}

/// Row-wise argmax one-hot; ties resolve to the lowest class index.
template <typename Derived>
auto pseudo_label(const Eigen::MatrixBase<Derived>& logits) {
    using Scalar = typename Derived::Scalar;
    if (logits.rows() == 0) throw std::invalid_argument("pseudo_label: empty batch");
    if (logits.cols() == 0) throw std::invalid_argument("pseudo_label: no classes");
    Matrix<Scalar> out = Matrix<Scalar>::Zero(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index k = 1; k < logits.cols(); ++k)
            if (logits(i, k) > logits(i, best)) best = k;
        out(i, best) = Scalar(1);
    }
    return out;
}

/// Index of the row-wise argmax (lowest index on ties).
template <typename Derived>
std::vector<int> argmax_rows(const Eigen::MatrixBase<Derived>& m) {
    std::vector<int> out(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index k = 1; k < m.cols(); ++k)
            if (m(i, k) > m(i, best)) best = k;
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cross-entropy against one-hot (or soft) targets, log-softmax form.

template <typename DL, typename DY>
auto cross_entropy_grad(const Eigen::MatrixBase<DL>& logits, const Eigen::MatrixBase<DY>& targets) {
    using Scalar = typename DL::Scalar;
    detail::require_same_shape(logits, targets, "cross_entropy");
    const Matrix<Scalar> logp = log_softmax(logits);
    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(logits.rows());
    Gradient<Scalar> out;
    out.value = -(targets.array() * logp.array()).sum() * inv_n;
    // d/dz of -sum_k y_k log p_k is p * sum_k y_k - y.
    const Vector<Scalar> mass = targets.rowwise().sum();
    out.grad = (logp.array().exp().colwise() * mass.array() - targets.array()).matrix() * inv_n;
    return out;
}

template <typename DL, typename DY>
typename DL::Scalar cross_entropy(const Eigen::MatrixBase<DL>& logits,
                                  const Eigen::MatrixBase<DY>& targets) {
    return cross_entropy_grad(logits, targets).value;
}

/// Category loss: cross-entropy of the teacher scores against their own argmax labels.
/// The labels are treated as constants.
template <typename Derived>
auto category_loss_grad(const Eigen::MatrixBase<Derived>& teacher_logits) {
    return cross_entropy_grad(teacher_logits, pseudo_label(teacher_logits));
}

template <typename Derived>
typename Derived::Scalar category_loss(const Eigen::MatrixBase<Derived>& teacher_logits) {
    return category_loss_grad(teacher_logits).value;
}

// ---------------------------------------------------------------------------
// Diversity loss: sum_k w_k log w_k with w the batch-mean score vector; 0 log 0 = 0.

template <typename Derived>
void validate_distribution_rows(const Eigen::MatrixBase<Derived>& scores, double tol = 1e-5) {
    if (scores.rows() == 0) throw std::invalid_argument("diversity_loss: empty batch");
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        if ((scores.row(i).array() < 0).any() || !scores.row(i).allFinite())
            throw std::invalid_argument("diversity_loss: negative or non-finite score in row " +
                                        std::to_string(i));
        if (std::abs(static_cast<double>(scores.row(i).sum()) - 1.0) > tol)
            throw std::invalid_argument("diversity_loss: row " + std::to_string(i) +
                                        " does not sum to 1");
    }
}

template <typename Derived>
auto diversity_loss_grad(const Eigen::MatrixBase<Derived>& scores) {
    using Scalar = typename Derived::Scalar;
    validate_distribution_rows(scores);
    const RowVector<Scalar> w = scores.colwise().mean();
    const Scalar floor = Scalar(1e-12);
    Gradient<Scalar> out;
    out.value = 0;
    RowVector<Scalar> dw(w.size());
    for (Eigen::Index k = 0; k < w.size(); ++k) {
        if (w(k) > Scalar(0)) out.value += w(k) * std::log(w(k));
        dw(k) = std::log(std::max(w(k), floor)) + Scalar(1);
    }
    out.grad = dw.replicate(scores.rows(), 1) / static_cast<Scalar>(scores.rows());
    return out;
}

template <typename Derived>
typename Derived::Scalar diversity_loss(const Eigen::MatrixBase<Derived>& scores) {
    return diversity_loss_grad(scores).value;
}

// ---------------------------------------------------------------------------
// Feature-statistic regularizer: sum_l ||mu_l - mu_hat_l||_2 + ||sigma_l - sigma_hat_l||_2.

template <typename Scalar>
MomentsGradient<Scalar> bn_statistic_regularizer_grad(const std::vector<Moments<Scalar>>& observed,
                                                      const std::vector<Moments<Scalar>>& stored) {
    if (observed.size() != stored.size())
        throw std::invalid_argument("bn_statistic_regularizer: " + std::to_string(observed.size()) +
                                    " observed layers vs " + std::to_string(stored.size()) +
                                    " stored");
    MomentsGradient<Scalar> out;
    out.value = 0;
    auto term = [&](const Vector<Scalar>& v, const Vector<Scalar>& ref, std::size_t l) {
        if (v.size() != ref.size())
            throw std::invalid_argument("bn_statistic_regularizer: layer " + std::to_string(l) +
                                        " channel width mismatch");
        const Vector<Scalar> diff = v - ref;
        const Scalar n = diff.norm();
        out.value += n;
        // Subgradient 0 at an exact match.
        return n > Scalar(0) ? Vector<Scalar>(diff / n) : Vector<Scalar>(Vector<Scalar>::Zero(v.size()));
    };
    for (std::size_t l = 0; l < observed.size(); ++l) {
        out.d_mean.push_back(term(observed[l].first, stored[l].first, l));
        out.d_std.push_back(term(observed[l].second, stored[l].second, l));
    }
    return out;
}

template <typename Scalar>
Scalar bn_statistic_regularizer(const std::vector<Moments<Scalar>>& observed,
                                const std::vector<Moments<Scalar>>& stored) {
    return bn_statistic_regularizer_grad(observed, stored).value;
}

/// Stored running statistics of a model as (mean, sqrt(var + eps)) per layer.
template <typename Scalar>
std::vector<Moments<Scalar>> stored_moments(ClassifierModel<Scalar>& model) {
    std::vector<Moments<Scalar>> out;
    for (auto* bn : model.norm_layers())
        out.emplace_back(bn->running_mean().row(0).transpose(),
                         (bn->running_var().row(0).transpose().array() + bn->eps()).sqrt().matrix());
    return out;
}

/// Batch statistics recorded by observing normalization layers during the last forward pass.
template <typename Scalar>
std::vector<Moments<Scalar>> observed_moments(ClassifierModel<Scalar>& model) {
    std::vector<Moments<Scalar>> out;
    for (auto* bn : model.norm_layers()) {
        if (!bn->observing()) throw std::logic_error("observed_moments: observation is disabled");
        out.emplace_back(bn->observed_mean(), bn->observed_std());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adaptive classification weight.

inline double adaptive_gamma(const GammaSchedule& sched, int task_index) {
    sched.validate();
    if (task_index < 1 || task_index > sched.total_tasks)
        throw std::out_of_range("adaptive_gamma: task index " + std::to_string(task_index) +
                                " outside [1, " + std::to_string(sched.total_tasks) + "]");
    if (static_cast<std::size_t>(task_index) > sched.class_counts.size())
        throw std::out_of_range("adaptive_gamma: class counts cover only " +
                                std::to_string(sched.class_counts.size()) + " tasks");
    long long seen = 0;
    for (int i = 0; i < task_index; ++i) seen += sched.class_counts[static_cast<std::size_t>(i)];
    return sched.beta / (static_cast<double>(sched.total_tasks) * static_cast<double>(seen));
}

// ---------------------------------------------------------------------------
// Composite objectives.

struct ExploreComponents {
    double imitate = 0;   ///< cosine discrepancy teacher vs student
    double explore = 0;   ///< negated discrepancy
    double category = 0;
    double diversity = 0;
    double rfeature = 0;
    double total = 0;
};

inline double explore_total(const ExploreComponents& c, const ExploreWeights& w) {
    w.validate();
    return w.lambda_exp * c.explore + (w.use_cat ? c.category : 0.0) +
           (w.use_div ? c.diversity : 0.0) + (w.use_rfeature ? c.rfeature : 0.0);
}

inline double cil_total(double gamma, double classification, double consolidation) {
    if (!(gamma >= 0.0)) throw std::invalid_argument("gamma must be >= 0");
    return gamma * classification + consolidation;
}

// Model-level evaluations in inference mode. These run forward passes and therefore
// take the models by mutable reference; parameters are never modified.

template <typename Scalar>
Scalar imitate_loss(const Activation<Scalar>& x_pseudo, ClassifierModel<Scalar>& teacher,
                    ClassifierModel<Scalar>& student) {
    const auto ft = teacher.features(x_pseudo, Mode::Eval);
    const auto fs = student.features(x_pseudo, Mode::Eval);
    return feature_cosine_discrepancy(ft.values, fs.values);
}

template <typename Scalar>
Scalar explore_adversarial_loss(const Activation<Scalar>& x_pseudo,
                                ClassifierModel<Scalar>& teacher, ClassifierModel<Scalar>& student) {
    return -imitate_loss(x_pseudo, teacher, student);
}

template <typename Scalar>
Scalar category_loss(const Activation<Scalar>& x_pseudo, ClassifierModel<Scalar>& teacher) {
    return category_loss(teacher.predict(x_pseudo));
}

/// Explore objective evaluated with the teacher in inference mode; `observed` holds the
/// per-layer batch moments matched against the teacher's stored statistics.
template <typename Scalar>
ExploreComponents explore_total_loss(const Activation<Scalar>& x_pseudo,
                                     ClassifierModel<Scalar>& teacher,
                                     ClassifierModel<Scalar>& student, const ExploreWeights& weights,
                                     const std::vector<Moments<Scalar>>& observed) {
    ExploreComponents c;
    const auto ft = teacher.features(x_pseudo, Mode::Eval);
    const Matrix<Scalar> logits = teacher.head().apply(ft.values);
    const auto fs = student.features(x_pseudo, Mode::Eval);
    c.imitate = feature_cosine_discrepancy(ft.values, fs.values);
    c.explore = -c.imitate;
    c.category = category_loss(logits);
    c.diversity = diversity_loss(softmax(logits));
    c.rfeature = bn_statistic_regularizer(observed, stored_moments(teacher));
    c.total = explore_total(c, weights);
    return c;
}

template <typename Scalar>
Scalar feature_consolidation_loss(const Activation<Scalar>& x_mixed,
                                  ClassifierModel<Scalar>& old_model,
                                  ClassifierModel<Scalar>& new_model) {
    const auto fo = old_model.features(x_mixed, Mode::Eval);
    const auto fn = new_model.features(x_mixed, Mode::Eval);
    return feature_cosine_discrepancy(fo.values, fn.values);
}

template <typename Scalar>
Scalar cil_classification_loss(const Activation<Scalar>& x_mixed, const Matrix<Scalar>& labels,
                               ClassifierModel<Scalar>& new_model) {
    if (labels.cols() != new_model.num_classes())
        throw std::invalid_argument("cil_classification_loss: label width " +
                                    std::to_string(labels.cols()) + " vs " +
                                    std::to_string(new_model.num_classes()) + " classes");
    return cross_entropy(new_model.predict(x_mixed), labels);
}

template <typename Scalar>
Scalar cil_total_loss(const Activation<Scalar>& x_mixed, const Matrix<Scalar>& labels,
                      ClassifierModel<Scalar>& old_model, ClassifierModel<Scalar>& new_model,
                      double gamma) {
    const Scalar cls = cil_classification_loss(x_mixed, labels, new_model);
    const Scalar fc = feature_consolidation_loss(x_mixed, old_model, new_model);
    return static_cast<Scalar>(cil_total(gamma, cls, fc));
}

}  // namespace skd
