#pragma once

#include <compare>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "heapr/moe_model.hpp"

namespace heapr {

// One channel (row j of w_up / w_gate, column j of w_down) of one expert.
struct AtomicExpertKey {
    std::size_t layer = 0;
    std::size_t expert = 0;
    std::size_t channel = 0;

    auto operator<=>(const AtomicExpertKey&) const = default;
};

std::string to_string(const AtomicExpertKey& key);

// Mean outer product of the sample-wise loss gradient w.r.t. one expert's output,
// over the calibration tokens routed to that expert.
struct GradCovariance {
    std::size_t layer = 0;
    std::size_t expert = 0;
    Matrix g;
    std::size_t token_count = 0;
};

// Ordered layer-major, one entry per (layer, expert) of the model.
using CovarianceSet = std::vector<GradCovariance>;

const GradCovariance& find_covariance(const CovarianceSet& covs, std::size_t layer, std::size_t expert);

struct ImportanceEntry {
    double score = 0.0;
    std::size_t token_count = 0;

    bool operator==(const ImportanceEntry&) const = default;
};

struct ImportanceTable {
    std::string method = "heapr";
    // Scores are only comparable within a layer; global ranking refuses such tables.
    bool layerwise_only = false;
    std::map<AtomicExpertKey, ImportanceEntry> entries;

    bool operator==(const ImportanceTable&) const = default;
};

enum class RankMode { global, layerwise };

std::string to_string(RankMode mode);
RankMode rank_mode_from_string(const std::string& s);

struct ScoredKey {
    AtomicExpertKey key;
    double score = 0.0;

    bool operator==(const ScoredKey&) const = default;
};

using ExpertId = std::pair<std::size_t, std::size_t>;  // (layer, expert)

struct PruneManifest {
    double ratio = 0.0;
    RankMode mode = RankMode::global;
    std::string method = "heapr";
    std::size_t channel_floor = 1;
    std::size_t total_atomic_experts = 0;
    std::size_t quota = 0;
    std::vector<ScoredKey> pruned;   // in pruning order
    std::vector<ScoredKey> skipped;  // passed over because the channel floor bound
    std::map<ExpertId, std::size_t> remaining_channels;

    bool operator==(const PruneManifest&) const = default;
};

// Splits sequences into consecutive calibration batches of `batch_size` sequences.
std::vector<Batch> make_batches(const Batch& sequences, std::size_t batch_size);

// Stage 1: one forward and one backward pass per batch. Throws ArgumentError on an
// empty calibration set.
CovarianceSet estimate_covariances(const MoEModel& model, const std::vector<Batch>& calib,
                                   PassCounter* passes = nullptr);

// Which covariance matrix each atomic expert was scored against, recorded once per
// (key, batch).
struct ScoreLog {
    std::vector<std::pair<AtomicExpertKey, const Matrix*>> uses;
};

// Stage 2: one forward pass per batch; mean over routed tokens of 1/2 e_k^T G_i e_k.
// Channels of never-routed experts score 0.
ImportanceTable compute_importances(const MoEModel& model, const std::vector<Batch>& calib,
                                    const CovarianceSet& covs, PassCounter* passes = nullptr,
                                    ScoreLog* log = nullptr);

// Scales each score by |T_i| / tokens, turning the per-routed-token mean into a share of the
// mean loss over all `tokens` calibration tokens. Off by default.
ImportanceTable traffic_weighted(const ImportanceTable& table, std::size_t tokens);

// Number of atomic experts a ratio removes out of `n`.
std::size_t prune_quota(double ratio, std::size_t n);

// Ascending score order (ties by key) across the whole model, lowest floor(r * N) pruned.
PruneManifest rank_global(const ImportanceTable& table, double ratio, std::size_t channel_floor = 1);

// Same procedure with the order and quota applied independently per layer.
PruneManifest rank_layerwise(const ImportanceTable& table, double ratio, std::size_t channel_floor = 1);

PruneManifest rank(const ImportanceTable& table, double ratio, RankMode mode, std::size_t channel_floor = 1);

// Deletes the manifest's channels. Keys index the model's current channels.
MoEModel apply_prune(const MoEModel& model, const PruneManifest& manifest);

struct PipelineOptions {
    double ratio = 0.0;
    RankMode mode = RankMode::global;
    std::size_t channel_floor = 1;
    // Stage 2 reuses the stage 1 batches unless this is set.
    const std::vector<Batch>* stage2_calib = nullptr;
};

struct PassReport {
    std::size_t batches = 0;
    std::size_t forward = 0;
    std::size_t backward = 0;
};

struct PipelineResult {
    MoEModel pruned;
    ImportanceTable table;
    PruneManifest manifest;
    CovarianceSet covariances;
    PassReport passes;
};

PipelineResult heapr_pipeline(const MoEModel& model, const std::vector<Batch>& calib,
                              const PipelineOptions& opts);

}  // namespace heapr
