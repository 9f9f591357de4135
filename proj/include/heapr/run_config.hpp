#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "heapr/bench.hpp"
#include "heapr/corpus.hpp"
#include "heapr/trainer.hpp"

namespace heapr {

inline constexpr int kConfigSchema = 1;

// Malformed config file, unknown key or bad value.
struct ConfigError : ArgumentError {
    using ArgumentError::ArgumentError;
};

struct RunConfig {
    MoEConfig model;
    CorpusSpec corpus;
    TrainConfig train;

    Method method = Method::heapr;
    RankMode mode = RankMode::global;
    double ratio = 0.25;
    std::vector<double> ratios{0.0, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8};
    // Each seed re-initialises and retrains the model (model.seed = train.seed = seed) on the
    // same corpus. model.seed and train.seed are not config keys.
    std::vector<std::uint64_t> seeds{0};
    bool deterministic = true;
    std::string output_dir = "runs/default";

    std::size_t calib_sequences = 128;  // taken from the front of the calib split
    std::size_t calib_batch_size = 16;
    std::vector<std::size_t> calib_sizes;  // optional calibration-size sweep
    std::size_t channel_floor = 1;
    bool disjoint_stage2 = false;  // stage 2 scores on the second half of the calibration sequences
    bool traffic_weighting = false;  // heapr scores times |T_i| / tokens
    double camera_alpha = 1.0;
    std::string eval_split = "test";  // perplexity split of sweep / compare: test | calib

    std::size_t oracle_max_keys = 0;  // 0 = every atomic expert
    bool oracle_freeze_routing = true;

    // Throws ConfigError.
    void validate() const;
};

// Parses an INI document. Unknown sections or keys are errors.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

// "section.key=value"
void apply_override(RunConfig& cfg, const std::string& assignment);

// Every key as "section.key = value", sorted; the input of config_hash.
std::string canonical_config(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

// The INI document that parses back to `cfg`.
std::string render_run_config(const RunConfig& cfg);

// cfg.output_dir, placed under $HEAPR_OUTPUT_ROOT when that is set and the dir is relative.
std::filesystem::path resolve_output_dir(const RunConfig& cfg);

// cfg with model and training seeds set to `seed`.
RunConfig with_seed(const RunConfig& cfg, std::uint64_t seed);

}  // namespace heapr
