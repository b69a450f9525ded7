#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "remap/aggregate.hpp"
#include "remap/entropy.hpp"
#include "remap/eval.hpp"
#include "remap/synth.hpp"
#include "remap/train.hpp"

namespace remap {

/// Every pipeline setting in one place. Read from an INI file with
/// `[section]` headers and `key = value` lines; `section.key=value`
/// overrides apply on top.
struct RunConfig {
    std::uint64_t seed = 0;
    /// 0 means default_workers().
    std::size_t workers = 0;

    int grid_scale = 3;
    Method method = Method::Remap;
    std::vector<int> layers{1, 2};
    Eigen::Index d_out = 0;
    std::optional<double> regularizer;
    AlphaInit alpha_init = AlphaInit::Entropy;

    KlConfig kl;
    std::size_t pair_budget = 2000;
    TrainConfig train;
    PQTrainConfig pq;
    EvalOptions eval;
    std::size_t search_topk = 10;
    SynthConfig synth;

    /// Worker count after applying the 0 = default rule.
    std::size_t effective_workers() const;

    /// Sub-configs with the run-wide seed and worker count filled in.
    TrainConfig train_config() const;
    PQTrainConfig pq_config() const;
    EvalOptions eval_options() const;
    PairSamplingConfig sampling_config() const;
    SynthConfig synth_config() const;

    /// Effective settings as a flat {"section.key": value} object.
    nlohmann::json to_json() const;
    /// SHA-256 of to_json().dump(); identical settings give identical hashes.
    std::string hash() const;
};

/// Every accepted "section.key" name.
std::vector<std::string> config_keys();

/// Loads `path` (if any), applies `overrides` ("section.key=value"), then
/// validates. Throws ConfigError listing every unknown key, unparsable value
/// and invalid setting at once.
RunConfig load_run_config(const std::optional<std::filesystem::path>& path, std::span<const std::string> overrides);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace remap
