#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gradcheck.hpp"
#include "skd/losses.hpp"

#include <cmath>

using namespace skd;
using D = double;

namespace {

Matrix<D> randn(int r, int c, std::uint64_t seed) {
    Rng rng(seed);
    Matrix<D> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

Matrix<D> rows(std::initializer_list<std::initializer_list<double>> v) {
    Matrix<D> m(static_cast<Eigen::Index>(v.size()), static_cast<Eigen::Index>(v.begin()->size()));
    Eigen::Index r = 0;
    for (const auto& row : v) {
        Eigen::Index c = 0;
        for (double x : row) m(r, c++) = x;
        ++r;
    }
    return m;
}

// Straight-line reference: mean over rows of 1 - a.b / (|a||b|).
double psi_reference(const Matrix<D>& a, const Matrix<D>& b) {
    double s = 0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        double dot = 0, na = 0, nb = 0;
        for (Eigen::Index k = 0; k < a.cols(); ++k) {
            dot += a(i, k) * b(i, k);
            na += a(i, k) * a(i, k);
            nb += b(i, k) * b(i, k);
        }
        s += 1 - dot / std::sqrt(na * nb);
    }
    return s / static_cast<double>(a.rows());
}

}  // namespace

TEST_CASE("cosine discrepancy examples") {
    CHECK(feature_cosine_discrepancy(rows({{1, 2, 3}}), rows({{1, 2, 3}})) ==
          doctest::Approx(0).epsilon(1e-12));
    CHECK(feature_cosine_discrepancy(rows({{1, 0}}), rows({{0, 1}})) == doctest::Approx(1));
    CHECK(feature_cosine_discrepancy(rows({{1, 0}}), rows({{-1, 0}})) == doctest::Approx(2));
    CHECK_THROWS_AS(feature_cosine_discrepancy(rows({{0, 0}}), rows({{0, 1}})), std::domain_error);
    CHECK_THROWS_AS(feature_cosine_discrepancy(rows({{1, 0}}), rows({{0, 1, 2}})),
                    std::invalid_argument);
}

TEST_CASE("cosine discrepancy properties") {
    const auto a = randn(8, 16, 1);
    const auto b = randn(8, 16, 2);
    const double ab = feature_cosine_discrepancy(a, b);
    CHECK(ab == doctest::Approx(feature_cosine_discrepancy(b, a)).epsilon(1e-14));
    CHECK(ab == doctest::Approx(psi_reference(a, b)).epsilon(1e-12));
    CHECK(ab >= 0.0);
    CHECK(ab <= 2.0);
    CHECK(feature_cosine_discrepancy(a, (3.7 * a).eval()) == doctest::Approx(0).scale(1));
}

TEST_CASE("cosine discrepancy gradient") {
    const auto a = randn(8, 16, 3);
    const auto b = randn(8, 16, 4);
    const auto g = feature_cosine_discrepancy_grad(a, b);
    const auto na = testing::numeric_gradient(
        a, [&](const Matrix<D>& v) { return feature_cosine_discrepancy(v, b); }, 1e-4);
    const auto nb = testing::numeric_gradient(
        b, [&](const Matrix<D>& v) { return feature_cosine_discrepancy(a, v); }, 1e-4);
    CHECK(testing::rel_error(g.grad_a, na) < 1e-4);
    CHECK(testing::rel_error(g.grad_b, nb) < 1e-4);
}

TEST_CASE("pseudo labels") {
    CHECK(pseudo_label(rows({{0.1, 2.0, -1.0}})) == rows({{0, 1, 0}}));
    CHECK(pseudo_label(rows({{3.0, 3.0}})) == rows({{1, 0}}));
    const auto l = randn(20, 7, 5);
    const auto y = pseudo_label(l);
    CHECK((y.rowwise().sum().array() == 1.0).all());
    CHECK(((y.array() == 0.0) || (y.array() == 1.0)).all());
    const Matrix<D> monotone = (l.array() * 2.0).exp().matrix();
    CHECK(pseudo_label(monotone) == y);
    CHECK_THROWS_AS(pseudo_label(Matrix<D>(0, 3)), std::invalid_argument);
}

TEST_CASE("category loss examples") {
    CHECK(category_loss(rows({{50, 0, 0}, {0, 0, 50}})) == doctest::Approx(0).scale(1));
    CHECK(category_loss(Matrix<D>::Zero(4, 10).eval()) == doctest::Approx(std::log(10.0)));
    CHECK(category_loss(randn(16, 5, 6)) >= 0.0);
}

TEST_CASE("category loss gradient with labels held fixed") {
    const auto l = randn(8, 16, 7);
    const auto y = pseudo_label(l);
    const auto g = category_loss_grad(l);
    const auto num = testing::numeric_gradient(
        l, [&](const Matrix<D>& v) { return cross_entropy(v, y); }, 1e-4);
    CHECK(testing::rel_error(g.grad, num) < 1e-4);
    CHECK(g.grad.isApprox((softmax(l) - y) / 8.0, 1e-12));
}

TEST_CASE("diversity loss examples and bounds") {
    Matrix<D> halves = Matrix<D>::Constant(5, 2, 0.5);
    CHECK(diversity_loss(halves) == doctest::Approx(-std::log(2.0)));
    Matrix<D> degenerate = Matrix<D>::Zero(5, 4);
    degenerate.col(0).setOnes();
    CHECK(diversity_loss(degenerate) == 0.0);
    Matrix<D> uniform = Matrix<D>::Constant(3, 10, 0.1);
    CHECK(diversity_loss(uniform) == doctest::Approx(-std::log(10.0)));
    // Uniform column means from one-hot rows also attain the lower bound.
    Matrix<D> eye = Matrix<D>::Identity(4, 4);
    CHECK(diversity_loss(eye) == doctest::Approx(-std::log(4.0)));

    const auto s = softmax(randn(32, 6, 8));
    const double v = diversity_loss(s);
    CHECK(v >= -std::log(6.0) - 1e-12);
    CHECK(v <= 0.0);
    CHECK_THROWS_AS(diversity_loss(rows({{0.7, 0.7}})), std::invalid_argument);
    CHECK_THROWS_AS(diversity_loss(rows({{1.5, -0.5}})), std::invalid_argument);
}

TEST_CASE("diversity loss gradient") {
    const auto s = softmax(randn(8, 16, 9));
    const auto g = diversity_loss_grad(s);
    // Finite differences on the unconstrained form sum_k w_k log w_k.
    auto f = [](const Matrix<D>& v) {
        const RowVector<D> w = v.colwise().mean();
        return (w.array() * w.array().log()).sum();
    };
    const auto num = testing::numeric_gradient(s, f, 1e-4);
    CHECK(testing::rel_error(g.grad, num) < 1e-4);

    // Chained through softmax.
    const auto l = randn(8, 16, 10);
    const Matrix<D> dl = softmax_backward(softmax(l), diversity_loss_grad(softmax(l)).grad);
    const auto numl = testing::numeric_gradient(
        l, [&](const Matrix<D>& v) { return f(softmax(v)); }, 1e-4);
    CHECK(testing::rel_error(dl, numl) < 1e-4);
}

TEST_CASE("feature statistic regularizer") {
    std::vector<Moments<D>> obs{{Vector<D>::Constant(1, 0.0), Vector<D>::Constant(1, 1.0)}};
    std::vector<Moments<D>> ref{{Vector<D>::Constant(1, 1.0), Vector<D>::Constant(1, 1.0)}};
    CHECK(bn_statistic_regularizer(obs, ref) == doctest::Approx(1.0));
    CHECK(bn_statistic_regularizer(ref, ref) == 0.0);
    auto obs2 = obs;
    auto ref2 = ref;
    obs2.push_back(obs[0]);
    ref2.push_back(ref[0]);
    CHECK(bn_statistic_regularizer(obs2, ref2) == doctest::Approx(2.0));
    CHECK_THROWS_AS(bn_statistic_regularizer(obs2, ref), std::invalid_argument);
    std::vector<Moments<D>> wide{{Vector<D>::Zero(2), Vector<D>::Ones(2)}};
    CHECK_THROWS_AS(bn_statistic_regularizer(wide, ref), std::invalid_argument);
}

TEST_CASE("feature statistic regularizer gradient") {
    Matrix<D> m = randn(4, 16, 11);
    m.row(1) = m.row(1).cwiseAbs();
    m.row(3) = m.row(3).cwiseAbs();
    std::vector<Moments<D>> obs, ref;
    for (int l = 0; l < 2; ++l) {
        obs.emplace_back(m.row(2 * l).transpose(), m.row(2 * l + 1).transpose());
        ref.emplace_back(randn(16, 1, 20 + l), randn(16, 1, 30 + l).cwiseAbs());
    }
    const auto g = bn_statistic_regularizer_grad(obs, ref);
    Matrix<D> analytic(4, 16);
    for (int l = 0; l < 2; ++l) {
        analytic.row(2 * l) = g.d_mean[l].transpose();
        analytic.row(2 * l + 1) = g.d_std[l].transpose();
    }
    const auto num = testing::numeric_gradient(
        m,
        [&](const Matrix<D>& v) {
            std::vector<Moments<D>> o;
            for (int l = 0; l < 2; ++l)
                o.emplace_back(v.row(2 * l).transpose(), v.row(2 * l + 1).transpose());
            return bn_statistic_regularizer(o, ref);
        },
        1e-4);
    CHECK(testing::rel_error(analytic, num) < 1e-4);
}

TEST_CASE("cross-entropy") {
    CHECK(cross_entropy(Matrix<D>::Zero(3, 60).eval(), pseudo_label(randn(3, 60, 1))) ==
          doctest::Approx(std::log(60.0)));
    CHECK(cross_entropy(rows({{40, 0}}), rows({{1, 0}})) == doctest::Approx(0).scale(1));
    CHECK(cross_entropy(rows({{1e4, -1e4}}), rows({{0, 1}})) == doctest::Approx(2e4));
    const auto l = randn(8, 5, 2);
    const auto y = pseudo_label(randn(8, 5, 3));
    const auto g = cross_entropy_grad(l, y);
    CHECK(g.value >= 0.0);
    const auto num =
        testing::numeric_gradient(l, [&](const Matrix<D>& v) { return cross_entropy(v, y); }, 1e-4);
    CHECK(testing::rel_error(g.grad, num) < 1e-4);
}

TEST_CASE("adaptive gamma") {
    CHECK(adaptive_gamma({5.0, 10, {55}}, 1) == doctest::Approx(5.0 / 550.0).epsilon(1e-15));
    const double g1 = adaptive_gamma({5.0, 10, {50, 5, 5}}, 1);
    const double g2 = adaptive_gamma({5.0, 10, {50, 5, 5}}, 2);
    const double g3 = adaptive_gamma({5.0, 10, {50, 5, 5}}, 3);
    CHECK(g1 > g2);
    CHECK(g2 > g3);
    CHECK_THROWS_AS(adaptive_gamma({5.0, 2, {5, 5}}, 3), std::out_of_range);
    CHECK_THROWS_AS(adaptive_gamma({5.0, 2, {5, 5}}, 0), std::out_of_range);
    CHECK_THROWS_AS(adaptive_gamma({5.0, 3, {5}}, 2), std::out_of_range);
    CHECK_THROWS_AS(adaptive_gamma({0.0, 3, {5}}, 1), std::invalid_argument);
    CHECK_THROWS_AS(adaptive_gamma({5.0, 3, {-1}}, 1), std::invalid_argument);
}

TEST_CASE("composite totals") {
    ExploreComponents c;
    c.explore = -0.4;
    c.category = 0.3;
    c.diversity = -1.2;
    c.rfeature = 2.5;
    CHECK(explore_total(c, {1.0}) == doctest::Approx(-0.4 + 0.3 - 1.2 + 2.5).epsilon(1e-15));
    CHECK(explore_total(c, {0.0}) == doctest::Approx(0.3 - 1.2 + 2.5).epsilon(1e-15));
    CHECK(explore_total(c, {20.0, false, true, true}) == doctest::Approx(-8.0 - 1.2 + 2.5));
    CHECK_THROWS_AS(explore_total(c, {-1.0}), std::invalid_argument);
    CHECK(cil_total(0.0, 3.0, 0.2) == 0.2);
    CHECK(cil_total(0.5, 3.0, 0.2) == doctest::Approx(1.7));
}

TEST_CASE("model-level losses") {
    auto teacher = build_classifier<D>(arch::kDeskCnn, 4, {1, 16, 16}, 4, 1);
    auto copy = teacher;
    auto other = clone_reinit(teacher, 2);
    Rng rng(3);
    Activation<D> x(Matrix<D>(6, 256), {1, 16, 16});
    for (Eigen::Index i = 0; i < x.values.size(); ++i) x.values.data()[i] = rng.normal();

    CHECK(imitate_loss(x, teacher, copy) == doctest::Approx(0).scale(1));
    const double li = imitate_loss(x, teacher, other);
    CHECK(li >= 0.0);
    CHECK(li <= 2.0);
    CHECK(explore_adversarial_loss(x, teacher, other) + li == 0.0);
    const Matrix<D> ft = teacher.features(x, Mode::Eval).values;
    const Matrix<D> fs = other.features(x, Mode::Eval).values;
    CHECK(li == doctest::Approx(psi_reference(ft, fs)).epsilon(1e-10));

    CHECK(feature_consolidation_loss(x, teacher, copy) == doctest::Approx(0).scale(1));
    auto ext = extend_head(teacher, {4, 2}, 5);
    Matrix<D> labels = Matrix<D>::Zero(6, 6);
    for (int i = 0; i < 6; ++i) labels(i, i) = 1;
    CHECK(cil_classification_loss(x, labels, ext) > 0.0);
    CHECK_THROWS_AS(cil_classification_loss(x, labels, teacher), std::invalid_argument);
    const double cls = cil_classification_loss(x, labels, ext);
    const double fc = feature_consolidation_loss(x, teacher, other);
    auto ext_other = extend_head(other, {4, 2}, 5);
    CHECK(cil_total_loss(x, labels, teacher, ext_other, 0.25) ==
          doctest::Approx(0.25 * cil_classification_loss(x, labels, ext_other) + fc).epsilon(1e-12));
    CHECK(cil_total_loss(x, labels, teacher, ext, 0.0) == doctest::Approx(0).scale(1));
    (void)cls;

    teacher.set_observe_statistics(true);
    teacher.features(x, Mode::Eval);
    const auto observed = observed_moments(teacher);
    const auto comps = explore_total_loss(x, teacher, other, ExploreWeights{}, observed);
    CHECK(comps.total == doctest::Approx(comps.explore + comps.category + comps.diversity +
                                         comps.rfeature)
                             .epsilon(1e-12));
    CHECK(comps.rfeature > 0.0);
    CHECK(bn_statistic_regularizer(stored_moments(teacher), stored_moments(teacher)) == 0.0);
}
