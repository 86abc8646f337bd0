#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "skd/networks.hpp"

#include <filesystem>
#include <limits>

using namespace skd;
using F = float;

namespace {

Activation<F> random_images(int batch, Shape s, std::uint64_t seed) {
    Rng rng(seed);
    Activation<F> x(Matrix<F>(batch, s.size()), s);
    for (Eigen::Index i = 0; i < x.values.size(); ++i)
        x.values.data()[i] = static_cast<F>(rng.normal());
    return x;
}

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "skd_test_networks";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("registered architectures build with the requested head") {
    auto desk = build_classifier<F>(arch::kDeskCnn, 10, {1, 28, 28});
    CHECK(desk.num_classes() == 10);
    CHECK(desk.feature_dim() == 64);
    CHECK(desk.bn_stats().size() == 3);

    auto r32 = build_classifier<F>(arch::kResNet32, 100, {3, 32, 32});
    CHECK(r32.num_classes() == 100);
    CHECK(r32.feature_dim() == 64);
    // stem + 15 blocks x 2 + 2 projection shortcuts
    CHECK(r32.norm_layers().size() == 33);

    auto r18 = build_classifier<F>(arch::kResNet18, 100, {3, 224, 224}, 8);
    CHECK(r18.num_classes() == 100);
    CHECK(r18.feature_dim() == 64);
}

TEST_CASE("architecture errors") {
    CHECK_THROWS_AS(build_classifier<F>("vgg", 10, {1, 28, 28}), std::invalid_argument);
    CHECK_THROWS_AS(build_classifier<F>(arch::kDeskCnn, 10, {1, 30, 30}), std::invalid_argument);
    CHECK_THROWS_AS(build_classifier<F>(arch::kResNet18, 10, {3, 32, 32}), std::invalid_argument);
    CHECK_THROWS_AS(build_classifier<F>(arch::kDeskCnn, 0, {1, 28, 28}), std::invalid_argument);
}

TEST_CASE("forward equals head after features") {
    auto m = build_classifier<F>(arch::kDeskCnn, 5, {1, 28, 28}, 8, 3);
    const auto x = random_images(4, {1, 28, 28}, 1);
    const Matrix<F> full = m.forward(x, Mode::Eval).values;
    const auto feats = m.features(x, Mode::Eval);
    const Matrix<F> composed = m.head_forward(feats, Mode::Eval).values;
    CHECK(full == composed);
}

TEST_CASE("running variances start positive and stay positive") {
    auto m = build_classifier<F>(arch::kDeskCnn, 5, {1, 28, 28}, 8, 3);
    m.forward(random_images(8, {1, 28, 28}, 2), Mode::Train);
    for (const auto& [mean, var] : m.bn_stats()) CHECK((var.array() > 0).all());
}

TEST_CASE("delegator stacks") {
    auto low = build_delegator<F>({3, 32, 32}, 256);
    CHECK(low.stack() == "low-res");
    CHECK(low.output_shape() == Shape{3, 32, 32});
    const std::string d = low.describe();
    CHECK(d.find("Upsample2x") != std::string::npos);
    CHECK(d.find("Tanh") != std::string::npos);

    auto high = build_delegator<F>({3, 128, 128}, 16, {32, 32, 16, 8, 8});
    CHECK(high.stack() == "high-res");
    CHECK(high.describe().find("Deconv") != std::string::npos);
    Matrix<F> z = Matrix<F>::Zero(2, 16);
    CHECK(high.forward(z, Mode::BatchStats).shape == Shape{3, 128, 128});

    CHECK_THROWS_AS(build_delegator<F>({3, 30, 30}, 256), std::invalid_argument);
    CHECK_THROWS_AS(build_delegator<F>({3, 120, 120}, 256), std::invalid_argument);
}

TEST_CASE("delegator output is finite and pre-helper output saturates to [-1, 1]") {
    auto g = build_delegator<F>({1, 28, 28}, 32, {16, 16, 8}, 4);
    Matrix<F> z = Matrix<F>::Zero(4, 32);
    const auto out = g.forward(z, Mode::Eval);
    CHECK(out.values.allFinite());
    CHECK(g.raw_output().values.cwiseAbs().maxCoeff() <= 1.0f);
    Rng rng(5);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = static_cast<F>(5 * rng.normal());
    g.forward(z, Mode::BatchStats);
    CHECK(g.raw_output().values.cwiseAbs().maxCoeff() <= 1.0f);
}

TEST_CASE("extend_head preserves old logits") {
    auto m = build_classifier<F>(arch::kDeskCnn, 5, {1, 28, 28}, 8, 7);
    const auto x = random_images(6, {1, 28, 28}, 3);
    const Matrix<F> before = m.predict(x);
    auto ext = extend_head(m, {5, 3}, 1);
    CHECK(ext.num_classes() == 8);
    const Matrix<F> after = ext.predict(x);
    // Different GEMM blocking for a wider head may move the last bit.
    CHECK((after.leftCols(5) - before).cwiseAbs().maxCoeff() <=
          4 * std::numeric_limits<F>::epsilon() * before.cwiseAbs().maxCoeff());
    CHECK(ext.head().weight().value.topRows(5) == m.head().weight().value);

    auto same = extend_head(m, {5, 0}, 9);
    CHECK(same.digest() == m.digest());
    CHECK_THROWS_AS(extend_head(ext, {5, 3}, 1), std::invalid_argument);
}

TEST_CASE("clone_reinit is seeded and leaves the source untouched") {
    auto m = build_classifier<F>(arch::kDeskCnn, 5, {1, 28, 28}, 8, 7);
    const auto before = m.digest();
    auto a = clone_reinit(m, 1);
    auto b = clone_reinit(m, 1);
    auto c = clone_reinit(m, 2);
    CHECK(m.digest() == before);
    CHECK(a.digest() == b.digest());
    CHECK(a.digest() != c.digest());
    CHECK(a.digest() != m.digest());
    auto pa = a.parameters();
    auto pm = m.parameters();
    REQUIRE(pa.size() == pm.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i]->value.rows() == pm[i]->value.rows());
        CHECK(pa[i]->value.cols() == pm[i]->value.cols());
    }
}

TEST_CASE("checkpoint round trip is bitwise") {
    auto m = build_classifier<F>(arch::kResNet32, 7, {3, 16, 16}, 4, 2);
    m.forward(random_images(4, {3, 16, 16}, 1), Mode::Train);
    const auto path = temp_path("model.ckpt");
    save_checkpoint(path, m);
    auto loaded = load_classifier<F>(path);
    CHECK(loaded.digest() == m.digest());
    CHECK(loaded.arch() == m.arch());
    const auto x = random_images(3, {3, 16, 16}, 9);
    CHECK(loaded.predict(x) == m.predict(x));
    auto stats_a = m.bn_stats();
    auto stats_b = loaded.bn_stats();
    REQUIRE(stats_a.size() == stats_b.size());
    for (std::size_t i = 0; i < stats_a.size(); ++i) CHECK(stats_a[i].second == stats_b[i].second);

    auto g = build_delegator<F>({1, 28, 28}, 16, {16, 16, 8}, 4);
    g.set_helper_enabled(false);
    save_checkpoint(temp_path("gen.ckpt"), g);
    auto g2 = load_delegator<F>(temp_path("gen.ckpt"));
    CHECK(g2.digest() == g.digest());
    CHECK_FALSE(g2.helper_enabled());

    CHECK_THROWS(load_delegator<F>(path));
    CHECK_THROWS(load_classifier<double>(path));
    {
        std::ofstream trunc(temp_path("bad.ckpt"), std::ios::binary);
        trunc << "SKDCKPT";
    }
    CHECK_THROWS_AS(load_classifier<F>(temp_path("bad.ckpt")), std::runtime_error);
}

TEST_CASE("untrained clone is near chance") {
    // Structured 2-class toy input: sign of mean pixel. Untrained model's argmax
    // should not be systematically right.
    auto m = build_classifier<F>(arch::kDeskCnn, 10, {1, 28, 28}, 8, 1);
    auto s = clone_reinit(m, 5);
    const auto x = random_images(200, {1, 28, 28}, 11);
    const Matrix<F> logits = s.predict(x);
    int hits = 0;
    for (int i = 0; i < 200; ++i) {
        Eigen::Index k;
        logits.row(i).maxCoeff(&k);
        hits += (k == i % 10);
    }
    CHECK(hits < 3 * 200 / 10);
}
