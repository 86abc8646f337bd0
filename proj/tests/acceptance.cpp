// Acceptance run: one PASS/FAIL line per criterion. Long criteria train on the desk
// dataset under <work>/ (default ./acceptance_work).
//
//   acceptance [--work DIR] [--only NAME[,NAME...]] [--expect-fail NAME[,NAME...]]
//
// Exit status is zero when the failing criteria are exactly the --expect-fail set.

#include "skd/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

using namespace skd;
namespace fs = std::filesystem;

namespace {

using D = double;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

Matrix<D> randn(int r, int c, std::uint64_t seed) {
    Rng rng(seed);
    Matrix<D> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

Matrix<D> fd_gradient(const Matrix<D>& at, const std::function<D(const Matrix<D>&)>& f, D step = 1e-5) {
    Matrix<D> g(at.rows(), at.cols());
    Matrix<D> p = at;
    for (Eigen::Index i = 0; i < at.size(); ++i) {
        const D s = p.data()[i];
        p.data()[i] = s + step;
        const D up = f(p);
        p.data()[i] = s - step;
        const D down = f(p);
        p.data()[i] = s;
        g.data()[i] = (up - down) / (2 * step);
    }
    return g;
}

D rel_error(const Matrix<D>& a, const Matrix<D>& b) {
    return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-300});
}

// oracle for psi: explicit per-row loop
D psi_oracle(const Matrix<D>& a, const Matrix<D>& b) {
    D s = 0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        D dot = 0, na = 0, nb = 0;
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            dot += a(i, j) * b(i, j);
            na += a(i, j) * a(i, j);
            nb += b(i, j) * b(i, j);
        }
        s += 1 - dot / std::sqrt(na * nb);
    }
    return s / static_cast<D>(a.rows());
}

Matrix<D> softmax_rows(const Matrix<D>& l) {
    Matrix<D> p(l.rows(), l.cols());
    for (Eigen::Index i = 0; i < l.rows(); ++i) {
        const D m = l.row(i).maxCoeff();
        D z = 0;
        for (Eigen::Index j = 0; j < l.cols(); ++j) z += std::exp(l(i, j) - m);
        for (Eigen::Index j = 0; j < l.cols(); ++j) p(i, j) = std::exp(l(i, j) - m) / z;
    }
    return p;
}

// ---------------------------------------------------------------------------

Outcome loss_identities() {
    std::vector<std::string> bad;
    auto expect = [&](bool ok, const std::string& what) {
        if (!ok) bad.push_back(what);
    };

    // L_exp = -L_imi on random models and inputs
    for (std::uint64_t s = 1; s <= 5; ++s) {
        auto teacher = build_classifier<D>(arch::kDeskCnn, 5, {1, 16, 16}, 4, s);
        auto student = clone_reinit(teacher, s + 100);
        Activation<D> x(randn(6, 256, s + 200), {1, 16, 16});
        const D li = imitate_loss(x, teacher, student);
        expect(explore_adversarial_loss(x, teacher, student) == -li, "L_exp != -L_imi");
        expect(li >= 0 && li <= 2, "L_imi outside [0,2]");
    }

    // diversity bounds
    for (int k : {2, 5, 10, 100}) {
        const Matrix<D> uniform = Matrix<D>::Constant(7, k, 1.0 / k);
        const D lo = diversity_loss(uniform);
        expect(std::abs(lo + std::log(static_cast<D>(k))) < 1e-12, "L_div uniform != -log K");
        Matrix<D> collapsed = Matrix<D>::Zero(7, k);
        collapsed.col(k - 1).setOnes();
        expect(diversity_loss(collapsed) == 0.0, "L_div collapsed != 0");
        Matrix<D> cycle = Matrix<D>::Zero(k, k);
        for (int i = 0; i < k; ++i) cycle(i, (i * 3 + 1) % k) = 1;
        if (std::gcd(3, k) == 1) expect(std::abs(diversity_loss(cycle) + std::log(static_cast<D>(k))) < 1e-12, "L_div balanced one-hot");
        for (std::uint64_t s = 0; s < 20; ++s) {
            const D v = diversity_loss(softmax_rows(3.0 * randn(9, k, 300 + s)));
            expect(v >= -std::log(static_cast<D>(k)) - 1e-12 && v <= 0, "L_div outside [-log K, 0]");
        }
    }

    // R_feature zero iff statistics match
    for (std::uint64_t s = 0; s < 10; ++s) {
        std::vector<Moments<D>> ref;
        for (int l = 0; l < 3; ++l)
            ref.emplace_back(randn(8, 1, 400 + 10 * s + l), randn(8, 1, 500 + 10 * s + l).cwiseAbs());
        expect(bn_statistic_regularizer(ref, ref) == 0.0, "R_feature(match) != 0");
        auto moved = ref;
        const int l = static_cast<int>(s % 3);
        if (s % 2) moved[l].first(static_cast<int>(s % 8)) += 1e-6;
        else moved[l].second(static_cast<int>(s % 8)) += 1e-6;
        expect(bn_statistic_regularizer(moved, ref) > 0.0, "R_feature(mismatch) == 0");
    }

    // psi on identical / orthogonal / antipodal rows
    for (std::uint64_t s = 0; s < 10; ++s) {
        const Matrix<D> a = randn(8, 16, 600 + s);
        Matrix<D> orth = randn(8, 16, 700 + s);
        for (Eigen::Index i = 0; i < 8; ++i)
            orth.row(i) -= orth.row(i).dot(a.row(i)) / a.row(i).squaredNorm() * a.row(i);
        expect(std::abs(feature_cosine_discrepancy(a, a)) < 1e-12, "psi(a,a) != 0");
        expect(std::abs(feature_cosine_discrepancy(a, (3.0 * a).eval())) < 1e-12, "psi(a,3a) != 0");
        expect(std::abs(feature_cosine_discrepancy(a, orth) - 1) < 1e-12, "psi(orthogonal) != 1");
        expect(std::abs(feature_cosine_discrepancy(a, (-0.5 * a).eval()) - 2) < 1e-12, "psi(antipodal) != 2");
        const Matrix<D> b = randn(8, 16, 800 + s);
        const D v = feature_cosine_discrepancy(a, b);
        expect(v >= 0 && v <= 2 && std::abs(v - psi_oracle(a, b)) < 1e-12, "psi random");
    }

    std::set<std::string> u(bad.begin(), bad.end());
    std::string detail = u.empty() ? "all identities hold" : "";
    for (const auto& b : u) detail += b + "; ";
    return {u.empty(), detail};
}

Outcome gradient_checks() {
    D worst_psi = 0, worst_div = 0, worst_rf = 0;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const Matrix<D> a = randn(8, 16, 1000 + s), b = randn(8, 16, 1100 + s);
        const auto g = feature_cosine_discrepancy_grad(a, b);
        worst_psi = std::max({worst_psi,
                              rel_error(g.grad_a, fd_gradient(a, [&](const Matrix<D>& v) { return psi_oracle(v, b); })),
                              rel_error(g.grad_b, fd_gradient(b, [&](const Matrix<D>& v) { return psi_oracle(a, v); }))});

        const Matrix<D> p = softmax_rows(randn(8, 16, 1200 + s));
        const auto gd = diversity_loss_grad(p);
        const auto entropy_form = [](const Matrix<D>& v) {
            D t = 0;
            for (Eigen::Index k = 0; k < v.cols(); ++k) {
                const D w = v.col(k).mean();
                t += w * std::log(w);
            }
            return t;
        };
        worst_div = std::max(worst_div, rel_error(gd.grad, fd_gradient(p, entropy_form)));

        Matrix<D> m = randn(8, 16, 1300 + s);
        for (int r = 1; r < 8; r += 2) m.row(r) = m.row(r).cwiseAbs();
        std::vector<Moments<D>> ref;
        for (int l = 0; l < 4; ++l) ref.emplace_back(randn(16, 1, 1400 + 10 * s + l), randn(16, 1, 1500 + 10 * s + l).cwiseAbs());
        auto moments = [&](const Matrix<D>& v) {
            std::vector<Moments<D>> o;
            for (int l = 0; l < 4; ++l) o.emplace_back(v.row(2 * l).transpose(), v.row(2 * l + 1).transpose());
            return o;
        };
        const auto gr = bn_statistic_regularizer_grad(moments(m), ref);
        Matrix<D> analytic(8, 16);
        for (int l = 0; l < 4; ++l) {
            analytic.row(2 * l) = gr.d_mean[l].transpose();
            analytic.row(2 * l + 1) = gr.d_std[l].transpose();
        }
        const auto rf_oracle = [&](const Matrix<D>& v) {
            D t = 0;
            const auto o = moments(v);
            for (int l = 0; l < 4; ++l) t += (o[l].first - ref[l].first).norm() + (o[l].second - ref[l].second).norm();
            return t;
        };
        worst_rf = std::max(worst_rf, rel_error(analytic, fd_gradient(m, rf_oracle)));
    }
    const D worst = std::max({worst_psi, worst_div, worst_rf});
    return {worst < 1e-4, "max rel error psi " + fmt("%.2e", worst_psi) + ", L_div " + fmt("%.2e", worst_div) +
                              ", R_feature " + fmt("%.2e", worst_rf) + " (tol 1e-4)"};
}

Outcome gamma_grid() {
    D worst = 0;
    int cases = 0;
    for (D beta : {0.5, 1.0, 5.0, 20.0}) {
        for (int n : {1, 2, 5, 10}) {
            for (int base : {1, 5, 50}) {
                for (int group : {1, 5, 10}) {
                    GammaSchedule g{beta, n, {}};
                    for (int t = 0; t < n; ++t) g.class_counts.push_back(group + (t == 0 ? base : 0));
                    for (int t = 1; t <= n; ++t) {
                        long double seen = base;
                        for (int i = 1; i <= t; ++i) seen += group;
                        const long double want = static_cast<long double>(beta) / (static_cast<long double>(n) * seen);
                        worst = std::max(worst, static_cast<D>(std::fabs(adaptive_gamma(g, t) - want)));
                        ++cases;
                    }
                }
            }
        }
    }
    // CIFAR-100 protocol: 50 base classes, ten groups of 5
    const auto tasks = build_task_sequence(100, 10, 1993);
    const GammaSchedule cifar{5.0, 10, gamma_class_counts(tasks)};
    const D first = adaptive_gamma(cifar, 1);
    const D err110 = std::abs(first - 1.0 / 110.0);
    const bool ok = worst <= 1e-12 && err110 <= 1e-12;
    return {ok, std::to_string(cases) + " grid points, max abs error " + fmt("%.1e", worst) +
                    "; beta=5 N=10 sum=55 -> " + fmt("%.17g", first) + " (1/110 error " + fmt("%.1e", err110) + ")"};
}

// ---------------------------------------------------------------------------
// desk experiments

struct Desk {
    fs::path work;
    std::ofstream log_file;

    ExperimentConfig base_config(const std::string& name, const fs::path& out) {
        auto c = ExperimentConfig::desk();
        c.name = name;
        c.data_root = work / "data";
        c.out_dir = out;
        c.seed = 1;
        return c;
    }

    CommandOptions options(AccessAudit* audit = nullptr) {
        CommandOptions o;
        o.audit = audit;
        o.log = [this](const std::string& m) { log_file << m << std::endl; };
        return o;
    }

    void ensure_data() {
        if (fs::exists(work / "data" / "dataset.txt")) return;
        make_desk_dataset(work / "data", DeskDatasetOptions{});
    }
};

bool same_bytes(const fs::path& a, const fs::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    return fa && fb &&
           std::string(std::istreambuf_iterator<char>(fa), {}) == std::string(std::istreambuf_iterator<char>(fb), {});
}

}  // namespace

int main(int argc, char** argv) {
    fs::path work = "acceptance_work";
    std::set<std::string> only, expect_fail;
    auto names = [](const char* list, std::set<std::string>& into) {
        std::stringstream ss(list);
        std::string n;
        while (std::getline(ss, n, ',')) into.insert(n);
    };
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--work" && i + 1 < argc) {
            work = argv[++i];
        } else if (a == "--only" && i + 1 < argc) {
            names(argv[++i], only);
        } else if (a == "--expect-fail" && i + 1 < argc) {
            names(argv[++i], expect_fail);
        } else {
            std::cerr << "usage: acceptance [--work DIR] [--only NAME,...] [--expect-fail NAME,...]\n";
            return 2;
        }
    }
    fs::create_directories(work);
    Desk desk{work, std::ofstream(work / "acceptance.log")};

    int unexpected = 0;
    auto report = [&](const std::string& name, const std::function<Outcome()>& f) {
        if (!only.empty() && !only.count(name)) return;
        Outcome o;
        try {
            o = f();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const bool expected = expect_fail.count(name) > 0;
        unexpected += o.pass == expected;
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail
                  << (expected ? (o.pass ? "  [expected to fail, now passes]" : "  [known failure]") : "")
                  << std::endl;
    };

    report("loss-identities", loss_identities);
    report("gradient-checks", gradient_checks);
    report("gamma-schedule", gamma_grid);

    const std::set<std::string> desk_names{"self-distillation-gap", "ablation-direction", "embedding-alignment",
                                           "cil-ordering", "exemplar-free-audit", "determinism"};
    bool need_desk = only.empty();
    for (const auto& n : only) need_desk |= desk_names.count(n) > 0;
    if (!need_desk) return unexpected ? 1 : 0;
    desk.ensure_data();

    // stage 1 against a teacher trained on all ten classes
    std::optional<DistillOutcome> full, no_rf, no_cat;
    auto teacher_cfg = desk.base_config("teacher10", work / "teacher10");
    teacher_cfg.pretrain_all_classes = true;
    auto distill = [&](const std::string& name, auto tweak) {
        auto c = desk.base_config(name, work / name);
        c.pretrain_all_classes = true;
        c.base_checkpoint = teacher_cfg.base_checkpoint_path();
        tweak(c);
        return cmd_distill(c, desk.options());
    };
    auto stage1 = [&]() {
        if (full) return;
        cmd_pretrain(teacher_cfg, desk.options());
        full = distill("distill-full", [](ExperimentConfig&) {});
    };

    report("self-distillation-gap", [&]() -> Outcome {
        stage1();
        const auto& m = full->report.metrics;
        const D gap = *full->report.teacher_student_gap;
        return {gap <= 5.0, "teacher " + fmt("%.2f", m.at("teacher_top1")) + "%, student with teacher head " +
                                fmt("%.2f", m.at("student_top1")) + "%, gap " + fmt("%.2f", gap) + " (<= 5)"};
    });

    report("ablation-direction", [&]() -> Outcome {
        stage1();
        no_rf = distill("distill-no-rfeature", [](ExperimentConfig& c) { c.flags.no_rfeature = true; });
        no_cat = distill("distill-no-cat", [](ExperimentConfig& c) { c.flags.no_cat = true; });
        const D acc_cat = no_cat->report.metrics.at("student_top1");
        const D acc_full = full->report.metrics.at("student_top1");
        const D acc_rf = no_rf->report.metrics.at("student_top1");
        const D cov_full = full->report.metrics.at("label_coverage");
        const D cov_cat = no_cat->report.metrics.at("label_coverage");
        const bool rf_ok = acc_rf < acc_full;
        const bool cat_ok = cov_cat < cov_full;
        return {rf_ok && cat_ok, "student top-1 full " + fmt("%.2f", acc_full) + " vs no_rfeature " + fmt("%.2f", acc_rf) +
                                     (rf_ok ? " (lower)" : " (NOT lower)") + "; pseudo-label coverage full " +
                                     fmt("%.3f", cov_full) + " vs no_cat " + fmt("%.3f", cov_cat) +
                                     (cat_ok ? " (lower)" : " (NOT lower)") + "; no_cat student top-1 " +
                                     fmt("%.2f", acc_cat)};
    });

    report("embedding-alignment", [&]() -> Outcome {
        stage1();
        const D frac = full->report.metrics.at("centroid_alignment");
        return {frac >= 0.7, "matched centroid closest for " + fmt("%.0f", 100 * frac) + "% of classes (>= 70%)"};
    });

    // incremental sequence: base 5 classes + 2 tasks
    std::optional<SequenceResult> seq_full;
    AccessAudit audit;
    auto base_cfg = desk.base_config("base5", work / "base5");
    auto run_cfg = [&](const std::string& name) {
        auto c = desk.base_config(name, work / name);
        c.base_checkpoint = base_cfg.base_checkpoint_path();
        return c;
    };
    auto sequence = [&]() {
        if (seq_full) return;
        cmd_pretrain(base_cfg, desk.options());
        seq_full = cmd_run(run_cfg("cil-full"), desk.options(&audit));
    };

    report("cil-ordering", [&]() -> Outcome {
        sequence();
        auto c = run_cfg("cil-no-skd");
        c.flags.no_skd = true;
        const auto no_skd = cmd_run(c, desk.options());
        c = run_cfg("cil-no-skd-no-alw");
        c.flags.no_skd = true;
        c.flags.no_alw = true;
        const auto none = cmd_run(c, desk.options());
        const D a = seq_full->report.average_top1, b = no_skd.report.average_top1, n = none.report.average_top1;
        const bool ok = seq_full->report.complete && a >= b + 10 && b > n;
        return {ok, "average top-1 full " + fmt("%.2f", a) + ", no_skd " + fmt("%.2f", b) + ", no_skd+no_alw " +
                        fmt("%.2f", n) + " (need full >= no_skd + 10 and no_skd > no_skd+no_alw)"};
    });

    report("exemplar-free-audit", [&]() -> Outcome {
        sequence();
        const auto data = load_experiment_data(run_cfg("cil-full"));
        long old_reads = 0, new_reads = 0;
        for (int n = 1; n <= data.tasks.num_incremental(); ++n) {
            const auto phase = "train-task-" + std::to_string(n);
            const auto old = data.tasks.seen_classes(n - 1);
            old_reads += static_cast<long>(audit.reads_of(old, Split::Train, phase).size() +
                                           audit.reads_of(old, Split::Val, phase).size());
            new_reads += static_cast<long>(audit.reads_of(data.tasks.task(n), Split::Train, phase).size());
        }
        return {old_reads == 0 && new_reads > 0,
                std::to_string(old_reads) + " reads of old-task data during incremental training, " +
                    std::to_string(new_reads) + " reads of new-task data, " + std::to_string(audit.entries().size()) +
                    " audited reads in total"};
    });

    report("determinism", [&]() -> Outcome {
        sequence();
        auto c = run_cfg("cil-full");
        c.out_dir = work / "cil-full-repeat";
        cmd_run(c, desk.options());
        bool ckpt_equal = true;
        for (const auto& f : seq_full->report.checkpoints)
            ckpt_equal &= same_bytes(work / "cil-full" / f, work / "cil-full-repeat" / f);
        auto a = load_report(work / "cil-full" / "report.json");
        auto b = load_report(work / "cil-full-repeat" / "report.json");
        // the output directory is the only config difference
        std::vector<std::string> diff;
        for (const auto& [k, v] : a.config)
            if (!b.config.count(k) || b.config.at(k) != v) diff.push_back(k);
        if (diff != std::vector<std::string>{"run.out_dir"})
            return {false, "config snapshots differ in more than run.out_dir"};
        b.config = a.config;
        b.config_hash = a.config_hash;
        const bool same = same_results(a, b);
        return {same && ckpt_equal, std::string(same ? "reports identical" : "reports differ") +
                                        (ckpt_equal ? ", checkpoints bitwise identical" : ", checkpoints differ")};
    });

    return unexpected ? 1 : 0;
}
