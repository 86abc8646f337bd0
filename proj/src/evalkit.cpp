#include "skd/evalkit.hpp"

#include "skd/losses.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace skd {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<int> predict_labels(ClassifierModel<Real>& model, const Activation<Real>& images,
                                int chunk) {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(images.batch()));
    for (int first = 0; first < images.batch(); first += chunk) {
        const int n = std::min(chunk, images.batch() - first);
        Activation<Real> part(images.values.middleRows(first, n), images.shape);
        const auto pred = argmax_rows(model.predict(part));
        out.insert(out.end(), pred.begin(), pred.end());
    }
    return out;
}

double top1_accuracy(ClassifierModel<Real>& model, const Activation<Real>& images,
                     const std::vector<int>& labels) {
    if (images.batch() == 0) throw std::invalid_argument("top1: empty evaluation set");
    if (static_cast<std::size_t>(images.batch()) != labels.size())
        throw std::invalid_argument("top1: label count does not match rows");
    const auto pred = predict_labels(model, images);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= model.num_classes())
            throw std::invalid_argument("top1: label " + std::to_string(labels[i]) +
                                        " outside the model head");
        hits += pred[i] == labels[i];
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(labels.size());
}

double top1_accuracy(ClassifierModel<Real>& model, const LabeledBatch& batch) {
    return top1_accuracy(model, batch.images, batch.local_ids);
}

double accuracy_gap(ClassifierModel<Real>& teacher, ClassifierModel<Real>& student_with_teacher_head,
                    const LabeledBatch& val) {
    return top1_accuracy(teacher, val) - top1_accuracy(student_with_teacher_head, val);
}

// ---------------------------------------------------------------------------
// Embeddings

void EmbeddingTable::append(const EmbeddingTable& other) {
    if (other.rows() == 0) return;
    if (rows() > 0 && features.cols() != other.features.cols())
        throw std::invalid_argument("embedding widths differ");
    Matrix<Real> merged(rows() + other.rows(), other.features.cols());
    if (rows() > 0) merged.topRows(rows()) = features;
    merged.bottomRows(other.rows()) = other.features;
    features = std::move(merged);
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
    sources.insert(sources.end(), other.sources.begin(), other.sources.end());
}

EmbeddingTable embed_real(ClassifierModel<Real>& model, const LabeledBatch& batch, int count) {
    if (count < 1) throw std::invalid_argument("embedding count must be >= 1");
    if (count > batch.size())
        throw std::invalid_argument("requested " + std::to_string(count) + " embeddings from " +
                                    std::to_string(batch.size()) + " samples");
    EmbeddingTable t;
    t.features.resize(count, model.feature_dim());
    for (int first = 0; first < count; first += 256) {
        const int n = std::min(256, count - first);
        Activation<Real> part(batch.images.values.middleRows(first, n), batch.images.shape);
        t.features.middleRows(first, n) = model.features(part, Mode::Eval).values;
    }
    t.labels.assign(batch.local_ids.begin(), batch.local_ids.begin() + count);
    t.sources.assign(static_cast<std::size_t>(count), "real");
    return t;
}

EmbeddingTable embed_pseudo(ClassifierModel<Real>& model, Delegator<Real>& delegator,
                            ClassifierModel<Real>& teacher, int count, Rng& rng,
                            Mode generation_mode) {
    if (count < 1) throw std::invalid_argument("embedding count must be >= 1");
    EmbeddingTable t;
    t.features.resize(count, model.feature_dim());
    for (int first = 0; first < count; first += 256) {
        const int n = std::min(256, count - first);
        Matrix<Real> z(n, delegator.latent_dim());
        for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = static_cast<Real>(rng.normal());
        const auto x = delegator.forward(z, generation_mode);
        const auto lab = argmax_rows(teacher.predict(x));
        t.labels.insert(t.labels.end(), lab.begin(), lab.end());
        t.features.middleRows(first, n) = model.features(x, Mode::Eval).values;
    }
    t.sources.assign(static_cast<std::size_t>(count), "pseudo");
    return t;
}

void write_embeddings(const fs::path& path, const EmbeddingTable& table) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const auto d = table.features.cols();
    for (Eigen::Index k = 0; k < d; ++k) out << "feature_" << k << ',';
    out << "label,source\n";
    out.precision(9);
    for (int i = 0; i < table.rows(); ++i) {
        for (Eigen::Index k = 0; k < d; ++k) out << table.features(i, k) << ',';
        out << table.labels[static_cast<std::size_t>(i)] << ','
            << table.sources[static_cast<std::size_t>(i)] << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

EmbeddingTable read_embeddings(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty embedding file " + path.string());
    int d = 0;
    {
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (tok.rfind("feature_", 0) == 0) ++d;
    }
    std::vector<std::vector<Real>> rows;
    EmbeddingTable t;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::vector<Real> f;
        for (int k = 0; k < d; ++k) {
            if (!std::getline(ss, tok, ',')) throw std::runtime_error("short embedding row");
            f.push_back(std::stof(tok));
        }
        if (!std::getline(ss, tok, ',')) throw std::runtime_error("missing label");
        t.labels.push_back(std::stoi(tok));
        if (!std::getline(ss, tok, ',')) throw std::runtime_error("missing source");
        t.sources.push_back(tok);
        rows.push_back(std::move(f));
    }
    t.features.resize(static_cast<Eigen::Index>(rows.size()), d);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (int k = 0; k < d; ++k) t.features(static_cast<Eigen::Index>(i), k) = rows[i][k];
    return t;
}

CentroidAlignment centroid_alignment(const EmbeddingTable& table) {
    int k_max = -1;
    for (int l : table.labels) k_max = std::max(k_max, l);
    const int K = k_max + 1;
    const auto d = table.features.cols();
    Matrix<double> real = Matrix<double>::Zero(K, d), pseudo = Matrix<double>::Zero(K, d);
    std::vector<int> nr(static_cast<std::size_t>(K)), np(static_cast<std::size_t>(K));
    for (int i = 0; i < table.rows(); ++i) {
        const auto f = table.features.row(i).cast<double>();
        const double n = f.norm();
        if (!(n > 0)) continue;
        const int l = table.labels[static_cast<std::size_t>(i)];
        if (table.sources[static_cast<std::size_t>(i)] == "real") {
            real.row(l) += f / n;
            ++nr[static_cast<std::size_t>(l)];
        } else {
            pseudo.row(l) += f / n;
            ++np[static_cast<std::size_t>(l)];
        }
    }
    auto cosine = [](const auto& a, const auto& b) {
        const double na = a.norm(), nb = b.norm();
        return na > 0 && nb > 0 ? a.dot(b) / (na * nb) : -1.0;
    };
    CentroidAlignment out;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (int c = 0; c < K; ++c) {
        if (nr[static_cast<std::size_t>(c)] == 0) continue;
        ++out.classes;
        double matched = nan, worst = -std::numeric_limits<double>::infinity();
        if (np[static_cast<std::size_t>(c)] > 0) matched = cosine(real.row(c), pseudo.row(c));
        for (int k = 0; k < K; ++k)
            if (k != c && np[static_cast<std::size_t>(k)] > 0)
                worst = std::max(worst, cosine(real.row(c), pseudo.row(k)));
        out.matched.push_back(matched);
        out.max_mismatched.push_back(worst);
        if (!std::isnan(matched) && matched > worst) ++out.aligned;
    }
    out.fraction = out.classes > 0 ? static_cast<double>(out.aligned) / out.classes : 0.0;
    return out;
}

double label_coverage(const std::vector<int>& labels, int class_count) {
    if (class_count < 1) throw std::invalid_argument("class count must be >= 1");
    const std::set<int> distinct(labels.begin(), labels.end());
    return static_cast<double>(distinct.size()) / class_count;
}

// ---------------------------------------------------------------------------
// Report

std::string snapshot_hash(const ConfigSnapshot& snapshot) {
    Fnv1a h;
    for (const auto& [k, v] : snapshot) {
        if (k.empty() || k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
            throw std::invalid_argument("config entry '" + k + "' cannot be written as one key=value line");
        h.update(k);
        h.update("=");
        h.update(v);
        h.update("\n");
    }
    return hex_digest(h.digest());
}

void RunReport::add_task_point(double top1, int seen) {
    per_task_top1.push_back(top1);
    seen_classes.push_back(seen);
    double s = 0;
    for (double v : per_task_top1) s += v;
    average_top1 = s / static_cast<double>(per_task_top1.size());
}

void RunReport::validate() const {
    for (double v : per_task_top1)
        if (!(v >= 0.0 && v <= 100.0)) throw std::runtime_error("accuracy outside [0, 100]");
    if (!per_task_top1.empty()) {
        double s = 0;
        for (double v : per_task_top1) s += v;
        if (std::abs(s / static_cast<double>(per_task_top1.size()) - average_top1) > 1e-9)
            throw std::runtime_error("average does not match the recorded points");
    }
    if (!config.empty() && snapshot_hash(config) != config_hash)
        throw std::runtime_error("config hash does not match the snapshot");
}

namespace {

json to_json_value(const RunReport& r, bool with_timing) {
    json j;
    j["name"] = r.name;
    j["seed"] = r.seed;
    j["config"] = r.config;
    j["config_hash"] = r.config_hash;
    j["per_task_top1"] = r.per_task_top1;
    j["seen_classes"] = r.seen_classes;
    j["average_top1"] = r.average_top1;
    j["teacher_student_gap"] = r.teacher_student_gap ? json(*r.teacher_student_gap) : json(nullptr);
    j["metrics"] = r.metrics;
    j["trace_files"] = r.trace_files;
    j["checkpoints"] = r.checkpoints;
    if (with_timing) j["timing_seconds"] = r.timing_seconds;
    j["complete"] = r.complete;
    j["abort_reason"] = r.abort_reason;
    return j;
}

}  // namespace

std::string report_to_json(const RunReport& report, bool with_timing) {
    return to_json_value(report, with_timing).dump(2);
}

RunReport report_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("malformed report: ") + e.what());
    }
    RunReport r;
    try {
        r.name = j.at("name").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.config = j.at("config").get<ConfigSnapshot>();
        r.config_hash = j.at("config_hash").get<std::string>();
        r.per_task_top1 = j.at("per_task_top1").get<std::vector<double>>();
        r.seen_classes = j.at("seen_classes").get<std::vector<int>>();
        r.average_top1 = j.at("average_top1").get<double>();
        if (!j.at("teacher_student_gap").is_null())
            r.teacher_student_gap = j.at("teacher_student_gap").get<double>();
        r.metrics = j.value("metrics", std::map<std::string, double>{});
        r.trace_files = j.value("trace_files", std::vector<std::string>{});
        r.checkpoints = j.value("checkpoints", std::vector<std::string>{});
        r.timing_seconds = j.value("timing_seconds", std::map<std::string, double>{});
        r.complete = j.at("complete").get<bool>();
        r.abort_reason = j.value("abort_reason", std::string{});
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("malformed report: ") + e.what());
    }
    return r;
}

void save_report(const fs::path& path, const RunReport& report) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << report_to_json(report) << '\n';
}

RunReport load_report(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open report " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return report_from_json(ss.str());
}

bool same_results(const RunReport& a, const RunReport& b) {
    return to_json_value(a, false) == to_json_value(b, false);
}

}  // namespace skd
