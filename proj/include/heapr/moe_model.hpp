#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "heapr/core_math.hpp"

namespace heapr {

using TokenId = std::uint32_t;
using Sequence = std::vector<TokenId>;
using Batch = std::vector<Sequence>;

// How router logits become gate values for the selected experts.
enum class GateMode {
    renormalized_softmax,  // softmax over all experts, top-k, selected gates rescaled to sum 1
    softmax,               // softmax over all experts, top-k, no rescaling
    raw_logits,            // top-k of the raw logits used directly as gates
};

std::string to_string(GateMode mode);
GateMode gate_mode_from_string(const std::string& s);

struct MoEConfig {
    std::size_t d_model = 32;
    std::size_t d_inter = 16;
    std::size_t num_experts = 8;
    std::size_t kappa = 2;
    std::size_t num_layers = 2;
    std::size_t vocab = 64;
    std::size_t seq_len = 64;
    std::uint64_t seed = 0;
    GateMode gate_mode = GateMode::renormalized_softmax;

    // Throws ArgumentError.
    void validate() const;

    bool operator==(const MoEConfig&) const = default;
};

// One gated feed-forward expert. Rows of w_up / w_gate and columns of w_down are the
// atomic experts; after pruning the channel count differs between experts.
struct ExpertWeights {
    Matrix w_up;    // channels x d_model
    Matrix w_gate;  // channels x d_model
    Matrix w_down;  // d_model x channels

    std::size_t channels() const noexcept { return w_up.rows(); }
    // An expert pruned down to zero channels no longer takes part in routing.
    bool removed() const noexcept { return channels() == 0; }

    bool operator==(const ExpertWeights&) const = default;
};

struct RouterWeights {
    Matrix w_router;  // num_experts x d_model

    bool operator==(const RouterWeights&) const = default;
};

struct MoELayer {
    RouterWeights router;
    std::vector<ExpertWeights> experts;

    bool operator==(const MoELayer&) const = default;
};

struct MoEModel {
    MoEConfig config;
    Matrix token_embedding;  // vocab x d_model
    std::vector<MoELayer> layers;
    Matrix output_head;  // vocab x d_model

    std::size_t atomic_expert_count() const;
    std::size_t parameter_count() const;
    std::size_t moe_parameter_count() const;

    bool operator==(const MoEModel&) const = default;
};

// Every weight matrix in a fixed order (embedding, per layer router then experts
// up/gate/down, head). Gradient containers share the model's layout.
std::vector<Matrix*> parameter_matrices(MoEModel& model);
std::vector<const Matrix*> parameter_matrices(const MoEModel& model);

// Same shapes as `model`, all zeros.
MoEModel zeros_like(const MoEModel& model);

MoEModel init_model(const MoEConfig& config);

// Multiply-add counter wired through the forward pass (one multiply-add = 2 FLOPs).
struct FlopCounter {
    std::uint64_t router = 0;
    std::uint64_t experts = 0;
    std::uint64_t head = 0;

    std::uint64_t moe() const noexcept { return router + experts; }
    std::uint64_t total() const noexcept { return router + experts + head; }
};

// Counts whole-batch traversals of the network.
struct PassCounter {
    std::size_t forward = 0;
    std::size_t backward = 0;
};

struct ExpertOutput {
    Vector y;    // E_i(x)
    Vector phi;  // SiLU(W_gate x) * (W_up x)
};

ExpertOutput expert_forward(const ExpertWeights& w, std::span<const double> x);

// Output of channel j alone: w_down[:, j] * SiLU(w_gate[j] . x) * (w_up[j] . x).
Vector atomic_expert_forward(const ExpertWeights& w, std::size_t j, std::span<const double> x);

struct RoutedExpert {
    std::size_t expert = 0;
    double gate = 0.0;
    Vector gate_pre;  // W_gate x
    Vector up_pre;    // W_up x
    Vector phi;
    Vector output;  // E_i(x) before gate scaling
};

struct TokenRoute {
    Vector input;
    Vector router_logits;
    Vector router_probs;
    std::vector<RoutedExpert> routed;
    bool frozen = false;  // routing copied from another trace; no router gradient
};

struct LayerTrace {
    std::vector<TokenRoute> tokens;
};

// Additive perturbation of one channel's contribution to one routed expert output.
struct ChannelBump {
    std::size_t layer = 0;
    std::size_t token = 0;
    std::size_t expert = 0;
    std::size_t channel = 0;
    Vector delta;
};

struct LayerForwardOptions {
    const LayerTrace* frozen_routing = nullptr;
    std::span<const ChannelBump> bumps;  // only entries whose layer matches are used
    std::size_t layer_index = 0;
    FlopCounter* flops = nullptr;
};

// Tokens are rows of x. Returns the MoE output rows (without residual).
Matrix moe_layer_forward(const MoELayer& layer, const MoEConfig& config, const Matrix& x,
                         LayerTrace* trace, const LayerForwardOptions& opts = {});

struct ForwardTrace {
    std::vector<TokenId> inputs;   // flattened predicting positions
    std::vector<TokenId> targets;
    std::vector<LayerTrace> layers;
    Matrix final_hidden;            // tokens x d_model
    Matrix probs;                   // tokens x vocab
    std::vector<double> token_nll;
    double loss = 0.0;

    std::size_t token_count() const noexcept { return inputs.size(); }
};

struct ForwardOptions {
    const ForwardTrace* frozen_routing = nullptr;
    std::span<const ChannelBump> bumps;
    FlopCounter* flops = nullptr;
    PassCounter* passes = nullptr;
    bool record_trace = true;
};

// Flattens next-token prediction pairs; throws DataError on bad ids or short sequences.
void flatten_batch(const Batch& batch, std::size_t vocab, std::vector<TokenId>& inputs,
                   std::vector<TokenId>& targets);

struct ForwardResult {
    double loss = 0.0;
    ForwardTrace trace;
};

// Mean next-token NLL over every predicted position of the batch.
ForwardResult lm_forward(const MoEModel& model, const Batch& batch, const ForwardOptions& opts = {});

// d loss / d E_i(x) for each routed (token, expert); indices align with
// trace.layers[l].tokens[t].routed[r].
struct ExpertOutputGrads {
    std::vector<std::vector<std::vector<Vector>>> grads;  // [layer][token][routed]
};

struct BackwardResult {
    ExpertOutputGrads expert_grads;
    MoEModel param_grads;
};

// Exact reverse-mode gradients of the mean batch loss. Throws ConsistencyError when the
// trace was not produced from `batch`.
BackwardResult lm_backward(const MoEModel& model, const Batch& batch, const ForwardTrace& trace,
                           PassCounter* passes = nullptr);

}  // namespace heapr
