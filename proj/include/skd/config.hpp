#pragma once

// Experiment configuration: flat "section.key = value" text, overridable key by key.

#include "skd/cil.hpp"
#include "skd/delegate.hpp"
#include "skd/evalkit.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace skd {

struct AblationFlags {
    bool no_skd = false;
    bool no_alw = false;
    bool no_cat = false;
    bool no_div = false;
    bool no_rfeature = false;
    bool no_helper_bn = false;
    bool explore_updates_delegator_only = false;
};

struct ExperimentConfig {
    std::string name = "full";
    std::uint64_t seed = 0;  ///< model initialization, shuffling, latent draws
    std::filesystem::path out_dir = "runs/skd";
    std::filesystem::path data_root;
    std::filesystem::path base_checkpoint;  ///< empty: <out_dir>/base.ckpt

    std::string arch = arch::kResNet32;
    int width = 0;
    int num_incremental = 5;
    std::uint64_t class_order_seed = 1993;
    /// Pretrain on every class in class order instead of the base task only.
    bool pretrain_all_classes = false;

    SupervisedConfig pretrain;
    SkdTrainConfig skd;
    CilTrainConfig cil;
    AblationFlags flags;

    /// Full-scale hyperparameters (CIFAR-100 protocol).
    static ExperimentConfig cifar100();
    /// Small CNN on the bundled 10-class digit dataset, sized for a single CPU.
    static ExperimentConfig desk();
    /// "cifar100" or "desk".
    static ExperimentConfig preset(const std::string& name);

    /// Assigns one dotted key; throws std::invalid_argument on an unknown key or a
    /// malformed value.
    void set(const std::string& key, const std::string& value);
    [[nodiscard]] std::string get(const std::string& key) const;
    /// "key=value" override.
    void apply_override(const std::string& assignment);
    /// Reads a config file. Blank lines and '#' comments are ignored; a "preset" key
    /// must come first and resets every value.
    void load_file(const std::filesystem::path& path);
    void save_file(const std::filesystem::path& path) const;

    [[nodiscard]] ConfigSnapshot snapshot() const;
    [[nodiscard]] std::string to_text() const;
    void validate() const;

    /// Stage configs with flags and derived seeds applied.
    [[nodiscard]] SkdTrainConfig effective_skd() const;
    [[nodiscard]] CilTrainConfig effective_cil() const;
    [[nodiscard]] SupervisedConfig effective_pretrain() const;
    [[nodiscard]] bool use_skd() const { return !flags.no_skd; }
    [[nodiscard]] std::uint64_t model_seed() const;
    [[nodiscard]] std::filesystem::path base_checkpoint_path() const;

    /// Every key in output order.
    static const std::vector<std::string>& keys();
};

ExperimentConfig parse_config_text(const std::string& text, ExperimentConfig base = ExperimentConfig::cifar100());

/// "a,b,c" lists of integers.
std::vector<int> parse_int_list(const std::string& text);
std::string format_int_list(const std::vector<int>& values);

}  // namespace skd
