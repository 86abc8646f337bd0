#include "skd/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace skd {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* what) {
    throw std::invalid_argument("config key '" + key + "': cannot parse '" + value + "' as " + what);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, value, "an integer");
    return out;
}

double parse_real(const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) bad_value(key, value, "a number");
        return d;
    } catch (const std::logic_error&) {
        bad_value(key, value, "a number");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    bad_value(key, value, "a boolean");
}

// shortest text that reads back to the same double
std::string format_real(double d) {
    char buf[32];
    for (int p = 1; p <= 17; ++p) {
        std::snprintf(buf, sizeof buf, "%.*g", p, d);
        if (std::stod(buf) == d) break;
    }
    return buf;
}

std::string format_bool(bool b) { return b ? "true" : "false"; }

const char* mode_text(Mode m) {
    switch (m) {
        case Mode::Train: return "train";
        case Mode::BatchStats: return "batch_stats";
        case Mode::Eval: return "eval";
    }
    return "eval";
}

Mode parse_mode(const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    if (v == "train") return Mode::Train;
    if (v == "batch_stats") return Mode::BatchStats;
    if (v == "eval") return Mode::Eval;
    bad_value(key, value, "one of train|batch_stats|eval");
}

struct Entry {
    std::string key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
};

template <typename T>
Entry int_entry(std::string key, T ExperimentConfig::*section, int T::*field) {
    return {std::move(key),
            [=](const ExperimentConfig& c) { return std::to_string(c.*section.*field); },
            [=](ExperimentConfig& c, const std::string& k, const std::string& v) {
                c.*section.*field = parse_integer<int>(k, v);
            }};
}

template <typename T>
Entry real_entry(std::string key, T ExperimentConfig::*section, double T::*field) {
    return {std::move(key),
            [=](const ExperimentConfig& c) { return format_real(c.*section.*field); },
            [=](ExperimentConfig& c, const std::string& k, const std::string& v) {
                c.*section.*field = parse_real(k, v);
            }};
}

template <typename T>
Entry bool_entry(std::string key, T ExperimentConfig::*section, bool T::*field) {
    return {std::move(key),
            [=](const ExperimentConfig& c) { return format_bool(c.*section.*field); },
            [=](ExperimentConfig& c, const std::string& k, const std::string& v) {
                c.*section.*field = parse_bool(k, v);
            }};
}

template <typename T>
Entry list_entry(std::string key, T ExperimentConfig::*section, std::vector<int> T::*field) {
    return {std::move(key),
            [=](const ExperimentConfig& c) { return format_int_list(c.*section.*field); },
            [=](ExperimentConfig& c, const std::string&, const std::string& v) {
                c.*section.*field = parse_int_list(v);
            }};
}

const std::vector<Entry>& registry() {
    using C = ExperimentConfig;
    static const std::vector<Entry> entries = [] {
        std::vector<Entry> e;
        e.push_back({"run.name", [](const C& c) { return c.name; },
                     [](C& c, const std::string&, const std::string& v) { c.name = trim(v); }});
        e.push_back({"run.seed", [](const C& c) { return std::to_string(c.seed); },
                     [](C& c, const std::string& k, const std::string& v) {
                         c.seed = parse_integer<std::uint64_t>(k, v);
                     }});
        e.push_back({"run.out_dir", [](const C& c) { return c.out_dir.string(); },
                     [](C& c, const std::string&, const std::string& v) { c.out_dir = trim(v); }});
        e.push_back({"data.root", [](const C& c) { return c.data_root.string(); },
                     [](C& c, const std::string&, const std::string& v) { c.data_root = trim(v); }});
        e.push_back({"data.class_order_seed", [](const C& c) { return std::to_string(c.class_order_seed); },
                     [](C& c, const std::string& k, const std::string& v) {
                         c.class_order_seed = parse_integer<std::uint64_t>(k, v);
                     }});
        e.push_back({"data.num_incremental", [](const C& c) { return std::to_string(c.num_incremental); },
                     [](C& c, const std::string& k, const std::string& v) {
                         c.num_incremental = parse_integer<int>(k, v);
                     }});
        e.push_back({"model.arch", [](const C& c) { return c.arch; },
                     [](C& c, const std::string&, const std::string& v) { c.arch = trim(v); }});
        e.push_back({"model.width", [](const C& c) { return std::to_string(c.width); },
                     [](C& c, const std::string& k, const std::string& v) { c.width = parse_integer<int>(k, v); }});
        e.push_back({"model.base_checkpoint", [](const C& c) { return c.base_checkpoint.string(); },
                     [](C& c, const std::string&, const std::string& v) { c.base_checkpoint = trim(v); }});

        e.push_back({"pretrain.all_classes", [](const C& c) { return format_bool(c.pretrain_all_classes); },
                     [](C& c, const std::string& k, const std::string& v) {
                         c.pretrain_all_classes = parse_bool(k, v);
                     }});
        e.push_back(int_entry("pretrain.epochs", &C::pretrain, &SupervisedConfig::epochs));
        e.push_back(real_entry("pretrain.lr", &C::pretrain, &SupervisedConfig::lr));
        e.push_back(real_entry("pretrain.momentum", &C::pretrain, &SupervisedConfig::momentum));
        e.push_back(real_entry("pretrain.weight_decay", &C::pretrain, &SupervisedConfig::weight_decay));
        e.push_back(list_entry("pretrain.lr_drops", &C::pretrain, &SupervisedConfig::lr_drops));
        e.push_back(real_entry("pretrain.lr_drop_factor", &C::pretrain, &SupervisedConfig::lr_drop_factor));
        e.push_back(int_entry("pretrain.batch_size", &C::pretrain, &SupervisedConfig::batch_size));

        e.push_back(int_entry("skd.epochs", &C::skd, &SkdTrainConfig::epochs));
        e.push_back(int_entry("skd.steps_per_epoch", &C::skd, &SkdTrainConfig::steps_per_epoch));
        e.push_back(int_entry("skd.imitate_steps_per_explore", &C::skd, &SkdTrainConfig::imitate_steps_per_explore));
        e.push_back(real_entry("skd.imitate_lr", &C::skd, &SkdTrainConfig::imitate_lr));
        e.push_back(real_entry("skd.imitate_momentum", &C::skd, &SkdTrainConfig::imitate_momentum));
        e.push_back(real_entry("skd.imitate_weight_decay", &C::skd, &SkdTrainConfig::imitate_weight_decay));
        e.push_back(real_entry("skd.explore_lr", &C::skd, &SkdTrainConfig::explore_lr));
        e.push_back(int_entry("skd.lr_drop_every", &C::skd, &SkdTrainConfig::lr_drop_every));
        e.push_back(real_entry("skd.lr_drop_factor", &C::skd, &SkdTrainConfig::lr_drop_factor));
        e.push_back(int_entry("skd.pseudo_batch_size", &C::skd, &SkdTrainConfig::pseudo_batch_size));
        e.push_back(int_entry("skd.latent_dim", &C::skd, &SkdTrainConfig::latent_dim));
        e.push_back(list_entry("skd.delegator_widths", &C::skd, &SkdTrainConfig::delegator_widths));
        e.push_back({"skd.lambda_exp", [](const C& c) { return format_real(c.skd.explore_weights.lambda_exp); },
                     [](C& c, const std::string& k, const std::string& v) {
                         c.skd.explore_weights.lambda_exp = parse_real(k, v);
                     }});
        e.push_back({"skd.rfeature_source",
                     [](const C& c) {
                         return std::string(c.skd.rfeature_source == StatisticsSource::Teacher ? "teacher" : "student");
                     },
                     [](C& c, const std::string& k, const std::string& v) {
                         const auto t = trim(v);
                         if (t == "teacher") c.skd.rfeature_source = StatisticsSource::Teacher;
                         else if (t == "student") c.skd.rfeature_source = StatisticsSource::Student;
                         else bad_value(k, v, "one of teacher|student");
                     }});
        e.push_back(bool_entry("skd.student_uses_batch_stats", &C::skd, &SkdTrainConfig::student_uses_batch_stats));
        e.push_back(int_entry("skd.divergence_patience", &C::skd, &SkdTrainConfig::divergence_patience));
        e.push_back(int_entry("skd.checkpoint_every", &C::skd, &SkdTrainConfig::checkpoint_every));

        e.push_back(int_entry("cil.epochs", &C::cil, &CilTrainConfig::epochs));
        e.push_back(real_entry("cil.lr", &C::cil, &CilTrainConfig::lr));
        e.push_back(real_entry("cil.momentum", &C::cil, &CilTrainConfig::momentum));
        e.push_back(real_entry("cil.weight_decay", &C::cil, &CilTrainConfig::weight_decay));
        e.push_back(list_entry("cil.lr_drops", &C::cil, &CilTrainConfig::lr_drops));
        e.push_back(real_entry("cil.lr_drop_factor", &C::cil, &CilTrainConfig::lr_drop_factor));
        e.push_back(int_entry("cil.batch_size_real", &C::cil, &CilTrainConfig::batch_size_real));
        e.push_back({"cil.beta", [](const C& c) { return format_real(c.cil.gamma_schedule.beta); },
                     [](C& c, const std::string& k, const std::string& v) {
                         c.cil.gamma_schedule.beta = parse_real(k, v);
                     }});
        e.push_back(real_entry("cil.fixed_gamma", &C::cil, &CilTrainConfig::fixed_gamma));
        e.push_back({"cil.pseudo_generation_mode", [](const C& c) { return std::string(mode_text(c.cil.pseudo_generation_mode)); },
                     [](C& c, const std::string& k, const std::string& v) {
                         c.cil.pseudo_generation_mode = parse_mode(k, v);
                     }});
        e.push_back(int_entry("cil.divergence_patience", &C::cil, &CilTrainConfig::divergence_patience));

        e.push_back(bool_entry("flags.no_skd", &C::flags, &AblationFlags::no_skd));
        e.push_back(bool_entry("flags.no_alw", &C::flags, &AblationFlags::no_alw));
        e.push_back(bool_entry("flags.no_cat", &C::flags, &AblationFlags::no_cat));
        e.push_back(bool_entry("flags.no_div", &C::flags, &AblationFlags::no_div));
        e.push_back(bool_entry("flags.no_rfeature", &C::flags, &AblationFlags::no_rfeature));
        e.push_back(bool_entry("flags.no_helper_bn", &C::flags, &AblationFlags::no_helper_bn));
        e.push_back(bool_entry("flags.explore_updates_delegator_only", &C::flags,
                               &AblationFlags::explore_updates_delegator_only));
        return e;
    }();
    return entries;
}

const Entry& find_entry(const std::string& key) {
    for (const auto& e : registry())
        if (e.key == key) return e;
    throw std::invalid_argument("unknown config key '" + key + "'");
}

std::pair<std::string, std::string> split_assignment(const std::string& line) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("expected key=value, got '" + line + "'");
    auto key = trim(line.substr(0, eq));
    if (key.empty()) throw std::invalid_argument("empty key in '" + line + "'");
    return {std::move(key), trim(line.substr(eq + 1))};
}

}  // namespace

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    const std::string t = trim(text);
    if (t.empty()) return out;
    std::stringstream ss(t);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_integer<int>("list", item));
    return out;
}

std::string format_int_list(const std::vector<int>& values) {
    std::string s;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(values[i]);
    }
    return s;
}

ExperimentConfig ExperimentConfig::cifar100() {
    ExperimentConfig c;
    c.pretrain.epochs = 160;
    c.pretrain.lr_drops = {80, 120};
    c.pretrain.batch_size = 128;
    return c;
}

ExperimentConfig ExperimentConfig::desk() {
    ExperimentConfig c;
    c.name = "desk";
    c.out_dir = "runs/desk";
    c.data_root = "data/desk";
    c.arch = arch::kDeskCnn;
    c.width = 16;
    c.num_incremental = 2;

    c.pretrain.epochs = 15;
    c.pretrain.lr = 0.05;
    c.pretrain.lr_drops = {10, 13};
    c.pretrain.batch_size = 64;

    c.skd.epochs = 30;
    c.skd.steps_per_epoch = 10;
    c.skd.imitate_lr = 0.4;
    c.skd.lr_drop_every = 1000;
    c.skd.pseudo_batch_size = 64;
    c.skd.latent_dim = 64;
    c.skd.delegator_widths = {32, 32, 16};

    c.cil.epochs = 10;
    c.cil.lr = 0.01;
    c.cil.lr_drops = {5, 7};
    c.cil.batch_size_real = 64;
    return c;
}

ExperimentConfig ExperimentConfig::preset(const std::string& name) {
    if (name == "cifar100") return cifar100();
    if (name == "desk") return desk();
    throw std::invalid_argument("unknown preset '" + name + "' (expected cifar100 or desk)");
}

const std::vector<std::string>& ExperimentConfig::keys() {
    static const std::vector<std::string> k = [] {
        std::vector<std::string> out;
        for (const auto& e : registry()) out.push_back(e.key);
        return out;
    }();
    return k;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    find_entry(key).set(*this, key, value);
}

std::string ExperimentConfig::get(const std::string& key) const { return find_entry(key).get(*this); }

void ExperimentConfig::apply_override(const std::string& assignment) {
    const auto [k, v] = split_assignment(assignment);
    set(k, v);
}

ExperimentConfig parse_config_text(const std::string& text, ExperimentConfig base) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    bool any = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        if (trim(line).empty()) continue;
        try {
            const auto [k, v] = split_assignment(line);
            if (k == "preset") {
                if (any) throw std::invalid_argument("preset must precede every other key");
                base = ExperimentConfig::preset(v);
            } else {
                base.set(k, v);
            }
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("line " + std::to_string(lineno) + ": " + e.what());
        }
        any = true;
    }
    return base;
}

void ExperimentConfig::load_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        *this = parse_config_text(ss.str(), *this);
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(path.string() + ": " + e.what());
    }
}

std::string ExperimentConfig::to_text() const {
    std::string out;
    std::string section;
    for (const auto& e : registry()) {
        const auto s = e.key.substr(0, e.key.find('.'));
        if (s != section) {
            if (!section.empty()) out += '\n';
            out += "# " + s + "\n";
            section = s;
        }
        out += e.key + " = " + e.get(*this) + "\n";
    }
    return out;
}

void ExperimentConfig::save_file(const fs::path& path) const {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << to_text();
}

ConfigSnapshot ExperimentConfig::snapshot() const {
    ConfigSnapshot s;
    for (const auto& e : registry()) s[e.key] = e.get(*this);
    return s;
}

std::uint64_t ExperimentConfig::model_seed() const { return Rng::derive(seed, "model-init").next(); }

fs::path ExperimentConfig::base_checkpoint_path() const {
    return base_checkpoint.empty() ? out_dir / "base.ckpt" : base_checkpoint;
}

SupervisedConfig ExperimentConfig::effective_pretrain() const {
    SupervisedConfig p = pretrain;
    p.seed = Rng::derive(seed, "pretrain").next();
    return p;
}

SkdTrainConfig ExperimentConfig::effective_skd() const {
    SkdTrainConfig s = skd;
    s.seed = Rng::derive(seed, "skd").next();
    s.explore_weights.use_cat = !flags.no_cat;
    s.explore_weights.use_div = !flags.no_div;
    s.explore_weights.use_rfeature = !flags.no_rfeature;
    s.helper_bn = !flags.no_helper_bn;
    s.explore_updates_delegator_only = flags.explore_updates_delegator_only;
    return s;
}

CilTrainConfig ExperimentConfig::effective_cil() const {
    CilTrainConfig c = cil;
    c.seed = Rng::derive(seed, "cil").next();
    c.adaptive_gamma = !flags.no_alw;
    c.use_pseudo = !flags.no_skd;
    return c;
}

void ExperimentConfig::validate() const {
    if (name.empty()) throw std::invalid_argument("run.name must not be empty");
    if (name.find_first_of("/\\\n") != std::string::npos)
        throw std::invalid_argument("run.name must not contain path separators");
    if (arch != arch::kDeskCnn && arch != arch::kResNet32 && arch != arch::kResNet18)
        throw std::invalid_argument("unknown model.arch '" + arch + "'");
    if (width < 0) throw std::invalid_argument("model.width must be >= 0");
    if (num_incremental < 0) throw std::invalid_argument("data.num_incremental must be >= 0");
    effective_pretrain().validate();
    effective_skd().validate();
    effective_cil().validate();
}

}  // namespace skd
