#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "skd/evalkit.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace skd;
namespace fs = std::filesystem;

namespace {

constexpr Shape kInput{1, 28, 28};

fs::path temp_dir() {
    auto d = fs::temp_directory_path() / "skd_test_evalkit";
    fs::create_directories(d);
    return d;
}

Activation<Real> random_images(int n, std::uint64_t seed) {
    Rng rng(seed);
    Activation<Real> x(Matrix<Real>(n, kInput.size()), kInput);
    for (Eigen::Index i = 0; i < x.values.size(); ++i) x.values.data()[i] = static_cast<Real>(rng.normal());
    return x;
}

RunReport sample_report() {
    RunReport r;
    r.name = "full";
    r.seed = 42;
    r.config = {{"cil.epochs", "12"}, {"skd.epochs", "30"}, {"flags.no_skd", "false"}};
    r.config_hash = snapshot_hash(r.config);
    r.add_task_point(91.25, 5);
    r.add_task_point(70.5, 8);
    r.add_task_point(61.0 / 3.0, 10);
    r.teacher_student_gap = 1.75;
    r.metrics["gamma_task1"] = 1.0 / 16.0;
    r.trace_files = {"skd_trace_task1.csv", "cil_trace_task1.csv"};
    r.checkpoints = {"model_task1.ckpt"};
    r.timing_seconds["cil_task1"] = 3.5;
    return r;
}

}  // namespace

TEST_CASE("top-1 from logits") {
    Matrix<double> eye = Matrix<double>::Identity(4, 4);
    CHECK(top1_from_logits(eye, {0, 1, 2, 3}) == 100.0);
    CHECK(top1_from_logits(eye, {1, 1, 0, 0}) == 25.0);
    Matrix<double> ties = Matrix<double>::Zero(2, 3);
    CHECK(top1_from_logits(ties, {0, 1}) == 50.0);
    CHECK_THROWS_AS(top1_from_logits(Matrix<double>(0, 3), {}), std::invalid_argument);
    CHECK_THROWS_AS(top1_from_logits(eye, {0, 1}), std::invalid_argument);
}

TEST_CASE("top-1 is invariant under increasing transforms of the logits") {
    Rng rng(9);
    Matrix<double> logits(200, 7);
    std::vector<int> labels;
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.normal();
    for (int i = 0; i < 200; ++i) labels.push_back(static_cast<int>(rng.below(7)));
    const double base = top1_from_logits(logits, labels);
    CHECK(top1_from_logits(Matrix<double>(logits.array().exp()), labels) == base);
    CHECK(top1_from_logits(Matrix<double>(3.0 * logits.array() - 11.0), labels) == base);
    CHECK(top1_from_logits(Matrix<double>(logits.array().cube()), labels) == base);
    CHECK(top1_from_logits(Matrix<double>(logits.array().tanh()), labels) == base);
}

TEST_CASE("constant model scores one over K on balanced labels") {
    auto m = build_classifier<Real>(arch::kDeskCnn, 5, kInput, 4, 1);
    m.head().weight().value.setZero();
    m.head().bias().value.setZero();
    m.head().bias().value(0, 2) = 1;
    const auto x = random_images(50, 3);
    std::vector<int> labels;
    for (int i = 0; i < 50; ++i) labels.push_back(i % 5);
    CHECK(top1_accuracy(m, x, labels) == doctest::Approx(20.0));
    std::vector<int> oracle(50, 2);
    CHECK(top1_accuracy(m, x, oracle) == 100.0);
    labels[0] = 5;
    CHECK_THROWS_AS(top1_accuracy(m, x, labels), std::invalid_argument);
    CHECK_THROWS_AS(top1_accuracy(m, Activation<Real>::zeros(0, kInput), {}), std::invalid_argument);
}

TEST_CASE("gap of a model against itself is zero") {
    auto m = build_classifier<Real>(arch::kDeskCnn, 5, kInput, 4, 1);
    LabeledBatch val;
    val.images = random_images(30, 4);
    for (int i = 0; i < 30; ++i) val.local_ids.push_back(i % 5);
    auto copy = m;
    CHECK(accuracy_gap(m, copy, val) == 0.0);
    auto other = build_classifier<Real>(arch::kDeskCnn, 5, kInput, 4, 2);
    CHECK(accuracy_gap(m, other, val) == doctest::Approx(top1_accuracy(m, val) - top1_accuracy(other, val)));
}

TEST_CASE("predictions are independent of chunking") {
    auto m = build_classifier<Real>(arch::kDeskCnn, 5, kInput, 4, 1);
    const auto x = random_images(37, 5);
    CHECK(predict_labels(m, x, 5) == predict_labels(m, x, 256));
}

TEST_CASE("embedding export and round trip") {
    auto m = build_classifier<Real>(arch::kDeskCnn, 5, kInput, 4, 1);
    auto d = build_delegator<Real>(kInput, 8, {8, 8, 4}, 2);
    LabeledBatch b;
    b.images = random_images(12, 6);
    for (int i = 0; i < 12; ++i) b.local_ids.push_back(i % 5);
    auto table = embed_real(m, b, 10);
    CHECK(table.rows() == 10);
    CHECK(table.features.cols() == m.feature_dim());
    Rng rng(1);
    const auto pseudo = embed_pseudo(m, d, m, 7, rng);
    CHECK(pseudo.rows() == 7);
    for (const auto& s : pseudo.sources) CHECK(s == "pseudo");
    for (int l : pseudo.labels) CHECK((l >= 0 && l < 5));
    table.append(pseudo);
    CHECK(table.rows() == 17);
    for (int i = 0; i < 17; ++i) CHECK(table.sources[i] == (i < 10 ? "real" : "pseudo"));

    const auto path = temp_dir() / "emb.csv";
    write_embeddings(path, table);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header.rfind("feature_0,feature_1,", 0) == 0);
    CHECK(header.substr(header.size() - 13) == ",label,source");
    const auto back = read_embeddings(path);
    CHECK(back.labels == table.labels);
    CHECK(back.sources == table.sources);
    CHECK((back.features - table.features).cwiseAbs().maxCoeff() <= 1e-6f * (1 + table.features.cwiseAbs().maxCoeff()));

    CHECK_THROWS_AS(embed_real(m, b, 13), std::invalid_argument);
    CHECK_THROWS_AS(embed_real(m, b, 0), std::invalid_argument);
}

TEST_CASE("centroid alignment") {
    EmbeddingTable t;
    t.features.resize(8, 3);
    t.features << 1, 0, 0,  0.9f, 0.1f, 0,   // class 0 real, pseudo
        0, 1, 0,  0.1f, 0.9f, 0,             // class 1
        0, 0, 1,  0.7f, 0.7f, 0,             // class 2: pseudo orthogonal to its real rows
        1, 1, 1,  1, 1, 1;                   // class 3: no pseudo row
    t.labels = {0, 0, 1, 1, 2, 2, 3, 3};
    t.sources = {"real", "pseudo", "real", "pseudo", "real", "pseudo", "real", "real"};
    const auto a = centroid_alignment(t);
    CHECK(a.classes == 4);
    CHECK(a.aligned == 2);
    CHECK(a.fraction == 0.5);
    CHECK(std::isnan(a.matched[3]));
    CHECK(a.matched[0] > a.max_mismatched[0]);
    CHECK(a.matched[2] == doctest::Approx(0.0));

    // centroids average normalized rows, so row scale does not matter
    auto scaled = t;
    scaled.features.row(1) *= 50;
    scaled.features.row(3) *= 0.01f;
    const auto b = centroid_alignment(scaled);
    CHECK(b.aligned == a.aligned);
    CHECK(b.matched[0] == doctest::Approx(a.matched[0]));
}

TEST_CASE("label coverage") {
    CHECK(label_coverage({0, 0, 0}, 5) == doctest::Approx(0.2));
    CHECK(label_coverage({0, 1, 2, 3, 4, 4}, 5) == 1.0);
    CHECK(label_coverage({}, 5) == 0.0);
    CHECK_THROWS_AS(label_coverage({0}, 0), std::invalid_argument);
}

TEST_CASE("report average and validation") {
    auto r = sample_report();
    CHECK(r.per_task_top1.size() == 3);
    CHECK(r.seen_classes == std::vector<int>{5, 8, 10});
    CHECK(std::abs(r.average_top1 - (91.25 + 70.5 + 61.0 / 3.0) / 3.0) < 1e-9);
    CHECK_NOTHROW(r.validate());
    auto bad = r;
    bad.per_task_top1[1] = 101;
    CHECK_THROWS(bad.validate());
    bad = r;
    bad.average_top1 += 1e-6;
    CHECK_THROWS(bad.validate());
}

TEST_CASE("config hash detects tampering") {
    auto r = sample_report();
    CHECK(r.config_hash.size() == 16);
    CHECK(snapshot_hash(r.config) == r.config_hash);
    auto tampered = r;
    tampered.config["cil.epochs"] = "13";
    CHECK(snapshot_hash(tampered.config) != r.config_hash);
    CHECK_THROWS(tampered.validate());
    CHECK_THROWS_AS(snapshot_hash({{"a=b", "c"}}), std::invalid_argument);
    CHECK_THROWS_AS(snapshot_hash({{"a", "b\nc=d"}}), std::invalid_argument);
}

TEST_CASE("report JSON round trip") {
    const auto r = sample_report();
    const auto path = temp_dir() / "report.json";
    save_report(path, r);
    const auto back = load_report(path);
    CHECK(same_results(r, back));
    CHECK(back.per_task_top1 == r.per_task_top1);
    CHECK(back.average_top1 == r.average_top1);
    CHECK(back.timing_seconds == r.timing_seconds);
    CHECK(*back.teacher_student_gap == 1.75);

    auto slower = r;
    slower.timing_seconds["cil_task1"] = 99;
    CHECK(same_results(r, slower));
    auto changed = r;
    changed.per_task_top1[2] += 1e-12;
    CHECK_FALSE(same_results(r, changed));
    CHECK(report_to_json(r, false).find("timing_seconds") == std::string::npos);

    auto no_gap = r;
    no_gap.teacher_student_gap.reset();
    CHECK_FALSE(report_from_json(report_to_json(no_gap)).teacher_student_gap.has_value());

    CHECK_THROWS_AS(report_from_json("{\"name\": 3"), std::runtime_error);
    CHECK_THROWS_AS(report_from_json("{\"name\": \"x\"}"), std::runtime_error);
    CHECK_THROWS_AS(load_report(temp_dir() / "missing.json"), std::runtime_error);
}
