#pragma once

#include <cstdint>
#include <vector>

#include "heapr/heapr.hpp"

namespace heapr {

struct FDConfig {
    double h = 1e-3;
    double tolerance = 1e-5;
};

// Token-weighted mean NLL over all calibration batches.
double mean_loss(const MoEModel& model, const std::vector<Batch>& calib);

struct DeltaOptions {
    // Replay the unablated model's routing in every layer. false routes each layer on its
    // (ablated) input, which is how a model returned by apply_prune runs.
    bool freeze_routing = true;
};

// Mean calibration loss with channel `key` zeroed minus the baseline mean loss.
double true_loss_delta(const MoEModel& model, const std::vector<Batch>& calib, const AtomicExpertKey& key,
                       const DeltaOptions& opts = {});

// Same, with every key in `keys` zeroed at once.
double joint_loss_delta(const MoEModel& model, const std::vector<Batch>& calib,
                        const std::vector<AtomicExpertKey>& keys, const DeltaOptions& opts = {});

// Maximum |d^2 F / d theta_a d theta_b| over `num_pairs` sampled coordinate pairs by central
// differences, where theta_k = (w_up[j], w_gate[j], w_down[:, j]) of channel k and F is the
// sum of the expert outputs that own the two keys. Both keys must be in one layer. For
// key_a == key_b the pairs are distinct coordinates drawn so at least one of them is a
// w_gate entry or they come from different projections (the up-up and down-down blocks are
// identically zero because the output is linear in each of those rows).
double fd_cross_hessian(const MoEModel& model, std::span<const double> x, const AtomicExpertKey& key_a,
                        const AtomicExpertKey& key_b, const FDConfig& fd = {}, std::size_t num_pairs = 32,
                        std::uint64_t seed = 0);

struct SharedGradientReport {
    // Max |FD sensitivity - captured dl/dE_i| over sampled (layer, token, expert, channel, dim),
    // in per-token loss units.
    double max_fd_deviation = 0.0;
    // Max spread of the FD sensitivities across channels of one expert.
    double max_channel_spread = 0.0;
    // Max difference between the stored gradients handed to different channels; 0 by construction.
    double stored_copy_deviation = 0.0;
    std::size_t samples = 0;

    double max_deviation() const noexcept;
};

SharedGradientReport shared_gradient_check(const MoEModel& model, const Batch& batch, const FDConfig& fd = {1e-4, 1e-5},
                                           std::size_t num_samples = 6, std::size_t channels_per_sample = 3,
                                           std::uint64_t seed = 0);

// Relative Frobenius error between the empirical Fisher of a softmax NLL over logits and its
// analytic Hessian diag(p) - p p^T at seeded random logits. num_samples == 0 uses the exact
// expectation over labels.
double fisher_hessian_softmax_check(std::size_t dim, std::size_t num_samples, std::uint64_t seed);

Matrix softmax_nll_hessian(std::span<const double> logits);

// d e_k / d theta_k, d_model x 3 d_model, columns ordered (w_up row, w_gate row, w_down column).
Matrix atomic_expert_jacobian(const ExpertWeights& w, std::size_t channel, std::span<const double> x);

struct ConstrainedMinimumResult {
    bool feasible = false;
    double cost = 0.0;        // 1/2 delta^T (J^T M J) delta at the least-norm feasible delta
    double quad_value = 0.0;  // 1/2 e^T M e
    double residual = 0.0;    // ||J delta + e||
    Vector delta;
};

// min 1/2 delta^T J^T (g g^T) J delta  s.t.  J delta = -e
ConstrainedMinimumResult constrained_minimum_solve(const Matrix& jacobian, std::span<const double> g, std::span<const double> e);

// Builds J, g and e_k for one next-token sample (a two-token sequence). g is the gradient of
// the sample's loss w.r.t. the owning expert's output, or 0 when that expert is not routed.
ConstrainedMinimumResult constrained_minimum_check(const MoEModel& model, const Sequence& sample, const AtomicExpertKey& key);

struct ObsRow {
    AtomicExpertKey key;
    double predicted = 0.0;
    double measured = 0.0;
};

struct ObsReport {
    std::vector<ObsRow> rows;
    double spearman = 0.0;
    // Bottom decile by predicted score.
    std::size_t decile_count = 0;
    double decile_mean_abs_error = 0.0;
    double decile_max_abs_error = 0.0;
    double decile_sum_measured = 0.0;
    double decile_joint_measured = 0.0;  // all bottom-decile keys ablated together
};

struct ObsOptions {
    std::size_t max_keys = 0;  // 0 = every key; otherwise a seeded sample
    std::uint64_t seed = 0;
    DeltaOptions delta;
    bool joint_decile = true;
};

ObsReport obs_prediction_report(const MoEModel& model, const std::vector<Batch>& calib,
                                const ImportanceTable& table, const ObsOptions& opts = {});

// Average-rank Spearman correlation.
double spearman(std::span<const double> a, std::span<const double> b);

// The table's scores permuted across keys.
ImportanceTable shuffled_table(const ImportanceTable& table, std::uint64_t seed);

}  // namespace heapr
