#pragma once

#include <cstdint>

#include "heapr/heapr.hpp"

namespace heapr {

struct CameraConfig {
    double alpha = 1.0;
};

// Decoding-time energy per channel: mean over routed tokens of
// (|phi_j| + alpha * |phi_j|) * ||w_down[:, j]||. The two magnitude terms are identical as
// published; both are kept so alpha has its documented effect. Flagged layerwise-only.
ImportanceTable camera_energy(const MoEModel& model, const std::vector<Batch>& calib,
                              const CameraConfig& cfg = {});

// Uniform (0, 1) scores, drawn in key order.
ImportanceTable random_importance(const MoEModel& model, std::uint64_t seed);

// ||w_up[j]|| * ||w_gate[j]|| * ||w_down[:, j]||; data-free.
ImportanceTable magnitude_importance(const MoEModel& model);

// Per-expert score sums, ascending (ties by expert id).
std::vector<std::pair<ExpertId, double>> expert_aggregates(const ImportanceTable& table);

// Drops whole experts, lowest aggregate first, while the dropped channel total stays within
// floor(r * N). Channel floor is 0: dropped experts leave the router.
PruneManifest expert_drop_manifest(const ImportanceTable& table, double ratio);

}  // namespace heapr
