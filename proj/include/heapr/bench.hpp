#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "heapr/baselines.hpp"
#include "heapr/corpus.hpp"
#include "heapr/heapr.hpp"

namespace heapr {

// exp(mean token NLL) over every predicted position of `split`.
double perplexity(const MoEModel& model, const Batch& split);

inline constexpr const char* kFlopsConvention =
    "multiply-add = 2 FLOPs; router 2*E*d_model per token; routed expert with c channels "
    "3*(2*d_model*c) + 2*c; output head 2*V*d_model per token; embedding lookup, softmax, "
    "gating sums and residual adds not counted";

// Closed-form FLOPs of running `model` on `data`, using the routing each token actually takes.
FlopCounter count_flops(const MoEModel& model, const Batch& data);

// Per-token FLOPs of one routed expert with `channels` channels.
std::uint64_t expert_flops(std::size_t d_model, std::size_t channels);

struct FlopsReport {
    std::size_t tokens = 0;
    double moe_per_token_original = 0.0;
    double moe_per_token_pruned = 0.0;
    double total_per_token_original = 0.0;
    double total_per_token_pruned = 0.0;
    double moe_saving_fraction = 0.0;
    double saving_fraction = 0.0;  // on total model FLOPs
    double atomic_fraction_removed = 0.0;
    double parameter_fraction_removed = 0.0;  // whole model
    std::string convention = kFlopsConvention;
};

FlopsReport flops_report(const MoEModel& original, const MoEModel& pruned, const Batch& data);

enum class Method { heapr, camera, random, magnitude, expert_drop };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct ScoringOptions {
    std::uint64_t seed = 0;  // random baseline
    CameraConfig camera;
    // HEAPr stage 2 data when it should differ from the stage 1 batches.
    const std::vector<Batch>* stage2_calib = nullptr;
    // HEAPr tables only: weight scores by expert traffic (see traffic_weighted).
    bool traffic_weighted = false;
};

// Importance table used by `method`; expert_drop aggregates the HEAPr table.
ImportanceTable score_method(Method method, const MoEModel& model, const std::vector<Batch>& calib,
                             const ScoringOptions& opts = {});

PruneManifest manifest_for(Method method, const ImportanceTable& table, double ratio, RankMode mode,
                           std::size_t channel_floor);

struct SweepRow {
    double ratio = 0.0;
    std::string method;
    std::string mode;
    std::uint64_t seed = 0;
    double perplexity = 0.0;
    double flops_saving = 0.0;
};

struct SweepConfig {
    Method method = Method::heapr;
    RankMode mode = RankMode::global;
    std::vector<double> ratios{0.0, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8};
    std::uint64_t seed = 0;
    std::size_t channel_floor = 1;
    ScoringOptions scoring;
};

// Every ratio prunes the unpruned model afresh from one importance table. Ratios must be
// ascending in [0, 1).
std::vector<SweepRow> run_sweep(const MoEModel& model, const std::vector<Batch>& calib, const Batch& eval,
                                const SweepConfig& cfg);

// Same, with a table scored beforehand.
std::vector<SweepRow> run_sweep_with_table(const MoEModel& model, const ImportanceTable& table,
                                           const Batch& eval, const SweepConfig& cfg);

// Columns: ratio,method,mode,seed,perplexity,flops_saving
void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out);

}  // namespace heapr
