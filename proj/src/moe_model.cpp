#include "heapr/moe_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "heapr/rng.hpp"

namespace heapr {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void fill_uniform(Matrix& m, SeededRng& rng, double bound) {
    for (double& v : m.data()) v = rng.uniform(-bound, bound);
}

// m += u v^T
void add_outer(Matrix& m, std::span<const double> u, std::span<const double> v) {
    for (std::size_t r = 0; r < u.size(); ++r) {
        const double ur = u[r];
        if (ur == 0.0) continue;
        auto row = m.row(r);
        for (std::size_t c = 0; c < v.size(); ++c) row[c] += ur * v[c];
    }
}

void add_into(std::span<double> dst, std::span<const double> src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

struct ExpertActivations {
    Vector gate_pre;
    Vector up_pre;
    Vector phi;
    Vector output;
};

ExpertActivations run_expert(const ExpertWeights& w, std::span<const double> x,
                             const ChannelBump* bump, FlopCounter* flops) {
    if (x.size() != w.w_up.cols()) {
        throw DimensionError("expert input has width " + std::to_string(x.size()) +
                             ", expected " + std::to_string(w.w_up.cols()));
    }
    ExpertActivations a;
    a.gate_pre = matvec(w.w_gate, x);
    a.up_pre = matvec(w.w_up, x);
    const std::size_t c = w.channels();
    a.phi.resize(c);
    for (std::size_t j = 0; j < c; ++j) a.phi[j] = silu(a.gate_pre[j]) * a.up_pre[j];
    if (bump == nullptr) {
        a.output = matvec(w.w_down, a.phi);
    } else {
        // Column-wise sum of atomic expert outputs with the bump added to one channel.
        const std::size_t d = w.w_down.rows();
        a.output.assign(d, 0.0);
        for (std::size_t j = 0; j < c; ++j) {
            for (std::size_t r = 0; r < d; ++r) {
                double contrib = w.w_down(r, j) * a.phi[j];
                if (j == bump->channel) contrib += bump->delta[r];
                a.output[r] += contrib;
            }
        }
    }
    if (flops != nullptr) {
        const std::uint64_t d = w.w_up.cols();
        flops->experts += 3 * (2 * d * c) + 2 * c;
    }
    return a;
}

const ChannelBump* find_bump(std::span<const ChannelBump> bumps, std::size_t layer, std::size_t token,
                             std::size_t expert) {
    for (const auto& b : bumps) {
        if (b.layer == layer && b.token == token && b.expert == expert) return &b;
    }
    return nullptr;
}

}  // namespace

std::string to_string(GateMode mode) {
    switch (mode) {
        case GateMode::renormalized_softmax: return "renormalized_softmax";
        case GateMode::softmax: return "softmax";
        case GateMode::raw_logits: return "raw_logits";
    }
    return "unknown";
}

GateMode gate_mode_from_string(const std::string& s) {
    if (s == "renormalized_softmax") return GateMode::renormalized_softmax;
    if (s == "softmax") return GateMode::softmax;
    if (s == "raw_logits") return GateMode::raw_logits;
    throw ArgumentError("unknown gate mode '" + s + "'");
}

void MoEConfig::validate() const {
    if (d_model < 1 || d_inter < 1 || num_experts < 1 || num_layers < 1 || vocab < 1) {
        throw ArgumentError("model dimensions must all be >= 1");
    }
    if (kappa < 1 || kappa > num_experts) {
        throw ArgumentError("kappa=" + std::to_string(kappa) + " must lie in [1, " +
                            std::to_string(num_experts) + "]");
    }
    if (seq_len < 2) throw ArgumentError("seq_len must be >= 2");
}

std::size_t MoEModel::atomic_expert_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers)
        for (const auto& e : layer.experts) n += e.channels();
    return n;
}

std::size_t MoEModel::parameter_count() const {
    std::size_t n = 0;
    for (const Matrix* m : parameter_matrices(*this)) n += m->size();
    return n;
}

std::size_t MoEModel::moe_parameter_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers) {
        n += layer.router.w_router.size();
        for (const auto& e : layer.experts) n += e.w_up.size() + e.w_gate.size() + e.w_down.size();
    }
    return n;
}

std::vector<Matrix*> parameter_matrices(MoEModel& model) {
    std::vector<Matrix*> out{&model.token_embedding};
    for (auto& layer : model.layers) {
        out.push_back(&layer.router.w_router);
        for (auto& e : layer.experts) {
            out.push_back(&e.w_up);
            out.push_back(&e.w_gate);
            out.push_back(&e.w_down);
        }
    }
    out.push_back(&model.output_head);
    return out;
}

std::vector<const Matrix*> parameter_matrices(const MoEModel& model) {
    auto mut = parameter_matrices(const_cast<MoEModel&>(model));
    return {mut.begin(), mut.end()};
}

MoEModel zeros_like(const MoEModel& model) {
    MoEModel z = model;
    for (Matrix* m : parameter_matrices(z)) std::fill(m->data().begin(), m->data().end(), 0.0);
    return z;
}

MoEModel init_model(const MoEConfig& config) {
    config.validate();
    SeededRng rng(config.seed);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    const double inv_sqrt_i = 1.0 / std::sqrt(static_cast<double>(config.d_inter));

    MoEModel m;
    m.config = config;
    // A lookup has fan-in 1.
    m.token_embedding = Matrix(config.vocab, config.d_model);
    fill_uniform(m.token_embedding, rng, 1.0);
    m.layers.resize(config.num_layers);
    for (auto& layer : m.layers) {
        layer.router.w_router = Matrix(config.num_experts, config.d_model);
        fill_uniform(layer.router.w_router, rng, inv_sqrt_d);
        layer.experts.resize(config.num_experts);
        for (auto& e : layer.experts) {
            e.w_up = Matrix(config.d_inter, config.d_model);
            e.w_gate = Matrix(config.d_inter, config.d_model);
            e.w_down = Matrix(config.d_model, config.d_inter);
            fill_uniform(e.w_up, rng, inv_sqrt_d);
            fill_uniform(e.w_gate, rng, inv_sqrt_d);
            fill_uniform(e.w_down, rng, inv_sqrt_i);
        }
    }
    m.output_head = Matrix(config.vocab, config.d_model);
    fill_uniform(m.output_head, rng, inv_sqrt_d);
    return m;
}

ExpertOutput expert_forward(const ExpertWeights& w, std::span<const double> x) {
    auto a = run_expert(w, x, nullptr, nullptr);
    return {std::move(a.output), std::move(a.phi)};
}

Vector atomic_expert_forward(const ExpertWeights& w, std::size_t j, std::span<const double> x) {
    if (j >= w.channels()) {
        throw ArgumentError("channel " + std::to_string(j) + " out of range for expert with " +
                            std::to_string(w.channels()) + " channels");
    }
    if (x.size() != w.w_up.cols()) throw DimensionError("atomic expert input width mismatch");
    const double phi = silu(dot(w.w_gate.row(j), x)) * dot(w.w_up.row(j), x);
    Vector y(w.w_down.rows());
    for (std::size_t r = 0; r < y.size(); ++r) y[r] = w.w_down(r, j) * phi;
    return y;
}

Matrix moe_layer_forward(const MoELayer& layer, const MoEConfig& config, const Matrix& x,
                         LayerTrace* trace, const LayerForwardOptions& opts) {
    const std::size_t d = config.d_model;
    const std::size_t num_experts = layer.experts.size();
    if (x.cols() != d) {
        throw DimensionError("layer input width " + std::to_string(x.cols()) + ", expected " +
                             std::to_string(d));
    }
    if (opts.frozen_routing != nullptr && opts.frozen_routing->tokens.size() != x.rows()) {
        throw ConsistencyError("frozen routing token count does not match layer input");
    }
    std::size_t active = 0;
    for (const auto& e : layer.experts) active += e.removed() ? 0 : 1;
    const std::size_t k = std::min(config.kappa, active);

    Matrix y(x.rows(), d);
    if (trace != nullptr) trace->tokens.assign(x.rows(), {});

    for (std::size_t t = 0; t < x.rows(); ++t) {
        auto xt = x.row(t);
        Vector logits = matvec(layer.router.w_router, xt);
        if (opts.flops != nullptr) opts.flops->router += 2 * num_experts * d;
        for (std::size_t i = 0; i < num_experts; ++i)
            if (layer.experts[i].removed()) logits[i] = kNegInf;

        std::vector<std::pair<std::size_t, double>> selected;  // (expert, gate)
        Vector probs(num_experts, 0.0);
        bool frozen = false;
        if (opts.frozen_routing != nullptr) {
            frozen = true;
            const auto& ft = opts.frozen_routing->tokens[t];
            probs = ft.router_probs;
            for (const auto& r : ft.routed) selected.emplace_back(r.expert, r.gate);
        } else if (k > 0) {
            probs = softmax(logits);
            const auto top = topk(logits, k);
            double mass = 0.0;
            for (const auto& [i, z] : top) mass += probs[i];
            for (const auto& [i, z] : top) {
                double g = 0.0;
                switch (config.gate_mode) {
                    case GateMode::renormalized_softmax: g = probs[i] / mass; break;
                    case GateMode::softmax: g = probs[i]; break;
                    case GateMode::raw_logits: g = z; break;
                }
                selected.emplace_back(i, g);
            }
        }

        TokenRoute* route = nullptr;
        if (trace != nullptr) {
            route = &trace->tokens[t];
            route->input.assign(xt.begin(), xt.end());
            route->router_logits = logits;
            route->router_probs = probs;
            route->frozen = frozen;
            route->routed.reserve(selected.size());
        }
        auto yt = y.row(t);
        for (const auto& [i, g] : selected) {
            if (i >= num_experts || layer.experts[i].removed()) {
                throw ConsistencyError("routing selects unavailable expert " + std::to_string(i));
            }
            const ChannelBump* bump = find_bump(opts.bumps, opts.layer_index, t, i);
            auto act = run_expert(layer.experts[i], xt, bump, opts.flops);
            for (std::size_t r = 0; r < d; ++r) yt[r] += g * act.output[r];
            if (route != nullptr) {
                route->routed.push_back({i, g, std::move(act.gate_pre), std::move(act.up_pre),
                                         std::move(act.phi), std::move(act.output)});
            }
        }
    }
    return y;
}

void flatten_batch(const Batch& batch, std::size_t vocab, std::vector<TokenId>& inputs,
                   std::vector<TokenId>& targets) {
    inputs.clear();
    targets.clear();
    for (const auto& seq : batch) {
        if (seq.size() < 2) throw DataError("sequence shorter than 2 tokens");
        for (TokenId id : seq) {
            if (id >= vocab) {
                throw DataError("token id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(vocab));
            }
        }
        for (std::size_t p = 0; p + 1 < seq.size(); ++p) {
            inputs.push_back(seq[p]);
            targets.push_back(seq[p + 1]);
        }
    }
    if (inputs.empty()) throw DataError("empty batch");
}

ForwardResult lm_forward(const MoEModel& model, const Batch& batch, const ForwardOptions& opts) {
    const auto& cfg = model.config;
    ForwardResult res;
    ForwardTrace& tr = res.trace;
    flatten_batch(batch, cfg.vocab, tr.inputs, tr.targets);
    const std::size_t n = tr.inputs.size();
    const std::size_t d = cfg.d_model;
    if (opts.frozen_routing != nullptr &&
        (opts.frozen_routing->inputs != tr.inputs || opts.frozen_routing->layers.size() != model.layers.size())) {
        throw ConsistencyError("frozen routing trace was recorded on a different batch");
    }

    Matrix h(n, d);
    for (std::size_t t = 0; t < n; ++t) {
        auto src = model.token_embedding.row(tr.inputs[t]);
        std::copy(src.begin(), src.end(), h.row(t).begin());
    }
    if (opts.record_trace) tr.layers.resize(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        LayerForwardOptions lo;
        lo.frozen_routing = opts.frozen_routing ? &opts.frozen_routing->layers[l] : nullptr;
        lo.bumps = opts.bumps;
        lo.layer_index = l;
        lo.flops = opts.flops;
        Matrix y = moe_layer_forward(model.layers[l], cfg, h, opts.record_trace ? &tr.layers[l] : nullptr, lo);
        for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += y.data()[i];
    }

    tr.probs = Matrix(n, cfg.vocab);
    tr.token_nll.resize(n);
    double total = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        Vector logits = matvec(model.output_head, h.row(t));
        Vector p = softmax(logits);
        std::copy(p.begin(), p.end(), tr.probs.row(t).begin());
        // log-softmax directly so a tiny probability does not underflow to log(0)
        const double m = *std::max_element(logits.begin(), logits.end());
        double s = 0.0;
        for (double z : logits) s += std::exp(z - m);
        tr.token_nll[t] = -(logits[tr.targets[t]] - m - std::log(s));
        total += tr.token_nll[t];
    }
    if (opts.flops != nullptr) opts.flops->head += 2 * n * cfg.vocab * d;
    if (opts.passes != nullptr) ++opts.passes->forward;
    tr.final_hidden = std::move(h);
    tr.loss = total / static_cast<double>(n);
    res.loss = tr.loss;
    return res;
}

BackwardResult lm_backward(const MoEModel& model, const Batch& batch, const ForwardTrace& trace,
                           PassCounter* passes) {
    const auto& cfg = model.config;
    std::vector<TokenId> inputs, targets;
    flatten_batch(batch, cfg.vocab, inputs, targets);
    if (inputs != trace.inputs || targets != trace.targets) {
        throw ConsistencyError("trace does not belong to this batch");
    }
    if (trace.layers.size() != model.layers.size()) {
        throw ConsistencyError("trace has no per-layer record (forward ran without record_trace?)");
    }
    const std::size_t n = inputs.size();
    const std::size_t d = cfg.d_model;
    const double inv_n = 1.0 / static_cast<double>(n);

    BackwardResult res;
    res.param_grads = zeros_like(model);
    MoEModel& g = res.param_grads;
    res.expert_grads.grads.resize(model.layers.size());

    Matrix dh(n, d);
    Vector dlogits(cfg.vocab);
    for (std::size_t t = 0; t < n; ++t) {
        auto p = trace.probs.row(t);
        for (std::size_t v = 0; v < cfg.vocab; ++v) dlogits[v] = p[v] * inv_n;
        dlogits[targets[t]] -= inv_n;
        add_outer(g.output_head, dlogits, trace.final_hidden.row(t));
        Vector dx = matvec_transposed(model.output_head, dlogits);
        std::copy(dx.begin(), dx.end(), dh.row(t).begin());
    }

    for (std::size_t l = model.layers.size(); l-- > 0;) {
        const MoELayer& layer = model.layers[l];
        MoELayer& gl = g.layers[l];
        const LayerTrace& lt = trace.layers[l];
        if (lt.tokens.size() != n) throw ConsistencyError("trace layer token count mismatch");
        auto& eg = res.expert_grads.grads[l];
        eg.assign(n, {});
        Matrix dx = dh;  // residual path

        for (std::size_t t = 0; t < n; ++t) {
            const TokenRoute& route = lt.tokens[t];
            auto dy = dh.row(t);
            auto dxt = dx.row(t);
            Vector dgate(route.routed.size());
            eg[t].reserve(route.routed.size());
            for (std::size_t r = 0; r < route.routed.size(); ++r) {
                const RoutedExpert& re = route.routed[r];
                const ExpertWeights& w = layer.experts[re.expert];
                ExpertWeights& gw = gl.experts[re.expert];

                Vector g_e(d);
                for (std::size_t i = 0; i < d; ++i) g_e[i] = re.gate * dy[i];
                dgate[r] = dot(dy, re.output);

                const std::size_t c = w.channels();
                Vector dphi = matvec_transposed(w.w_down, g_e);
                add_outer(gw.w_down, g_e, re.phi);
                Vector da(c), db(c);
                for (std::size_t j = 0; j < c; ++j) {
                    da[j] = dphi[j] * re.up_pre[j] * silu_grad(re.gate_pre[j]);
                    db[j] = dphi[j] * silu(re.gate_pre[j]);
                }
                add_outer(gw.w_gate, da, route.input);
                add_outer(gw.w_up, db, route.input);
                add_into(dxt, matvec_transposed(w.w_gate, da));
                add_into(dxt, matvec_transposed(w.w_up, db));
                eg[t].push_back(std::move(g_e));
            }
            if (route.frozen || route.routed.empty()) continue;

            Vector dz(layer.experts.size(), 0.0);
            switch (cfg.gate_mode) {
                case GateMode::renormalized_softmax: {
                    double s = 0.0;
                    for (std::size_t r = 0; r < route.routed.size(); ++r) s += route.routed[r].gate * dgate[r];
                    for (std::size_t r = 0; r < route.routed.size(); ++r)
                        dz[route.routed[r].expert] = route.routed[r].gate * (dgate[r] - s);
                    break;
                }
                case GateMode::softmax: {
                    double s = 0.0;
                    for (std::size_t r = 0; r < route.routed.size(); ++r)
                        s += route.router_probs[route.routed[r].expert] * dgate[r];
                    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] = -route.router_probs[i] * s;
                    for (std::size_t r = 0; r < route.routed.size(); ++r) {
                        const std::size_t i = route.routed[r].expert;
                        dz[i] += route.router_probs[i] * dgate[r];
                    }
                    break;
                }
                case GateMode::raw_logits:
                    for (std::size_t r = 0; r < route.routed.size(); ++r) dz[route.routed[r].expert] = dgate[r];
                    break;
            }
            add_outer(gl.router.w_router, dz, route.input);
            add_into(dxt, matvec_transposed(layer.router.w_router, dz));
        }
        dh = std::move(dx);
    }

    for (std::size_t t = 0; t < n; ++t) add_into(g.token_embedding.row(inputs[t]), dh.row(t));
    if (passes != nullptr) ++passes->backward;
    return res;
}

}  // namespace heapr
