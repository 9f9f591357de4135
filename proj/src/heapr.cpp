#include "heapr/heapr.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace heapr {

namespace {

void check_ratio(double ratio) {
    if (!(ratio >= 0.0 && ratio < 1.0)) {
        throw ArgumentError("pruning ratio " + std::to_string(ratio) + " outside [0, 1)");
    }
}

std::map<ExpertId, std::size_t> channel_counts(const ImportanceTable& table) {
    std::map<ExpertId, std::size_t> counts;
    for (const auto& [key, entry] : table.entries) ++counts[{key.layer, key.expert}];
    return counts;
}

std::vector<ScoredKey> sorted_ascending(const ImportanceTable& table, const std::size_t* layer_filter) {
    std::vector<ScoredKey> keys;
    for (const auto& [key, entry] : table.entries) {
        if (layer_filter != nullptr && key.layer != *layer_filter) continue;
        keys.push_back({key, entry.score});
    }
    // map iteration is already key-ordered, so a stable sort on score keeps key order on ties
    std::stable_sort(keys.begin(), keys.end(),
                     [](const ScoredKey& a, const ScoredKey& b) { return a.score < b.score; });
    return keys;
}

// Walks `order`, pruning until `quota` keys are taken, skipping any whose expert would
// drop below the floor.
void take_quota(const std::vector<ScoredKey>& order, std::size_t quota, std::size_t floor,
                PruneManifest& m) {
    std::size_t taken = 0;
    for (const auto& sk : order) {
        if (taken == quota) break;
        auto& remaining = m.remaining_channels.at({sk.key.layer, sk.key.expert});
        if (remaining <= floor) {
            m.skipped.push_back(sk);
            continue;
        }
        --remaining;
        m.pruned.push_back(sk);
        ++taken;
    }
}

}  // namespace

std::string to_string(const AtomicExpertKey& key) {
    return "(" + std::to_string(key.layer) + "," + std::to_string(key.expert) + "," +
           std::to_string(key.channel) + ")";
}

std::string to_string(RankMode mode) { return mode == RankMode::global ? "global" : "layerwise"; }

RankMode rank_mode_from_string(const std::string& s) {
    if (s == "global") return RankMode::global;
    if (s == "layerwise") return RankMode::layerwise;
    throw ArgumentError("unknown ranking mode '" + s + "'");
}

const GradCovariance& find_covariance(const CovarianceSet& covs, std::size_t layer, std::size_t expert) {
    for (const auto& c : covs)
        if (c.layer == layer && c.expert == expert) return c;
    throw ConsistencyError("no covariance for layer " + std::to_string(layer) + " expert " +
                           std::to_string(expert));
}

std::vector<Batch> make_batches(const Batch& sequences, std::size_t batch_size) {
    if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
    std::vector<Batch> out;
    for (std::size_t i = 0; i < sequences.size(); i += batch_size) {
        const auto end = std::min(sequences.size(), i + batch_size);
        out.emplace_back(sequences.begin() + static_cast<std::ptrdiff_t>(i),
                         sequences.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

CovarianceSet estimate_covariances(const MoEModel& model, const std::vector<Batch>& calib,
                                   PassCounter* passes) {
    if (calib.empty()) throw ArgumentError("calibration set is empty");
    const auto& cfg = model.config;
    CovarianceSet covs;
    for (std::size_t l = 0; l < model.layers.size(); ++l)
        for (std::size_t e = 0; e < model.layers[l].experts.size(); ++e)
            covs.push_back({l, e, Matrix(cfg.d_model, cfg.d_model), 0});
    auto slot = [&](std::size_t l, std::size_t e) -> GradCovariance& {
        return covs[l * cfg.num_experts + e];
    };

    ForwardOptions fwd_opts;
    fwd_opts.passes = passes;
    for (const Batch& batch : calib) {
        auto fwd = lm_forward(model, batch, fwd_opts);
        auto bwd = lm_backward(model, batch, fwd.trace, passes);
        // Captured gradients are of the batch-mean loss; rescale to the per-token loss.
        const double scale = static_cast<double>(fwd.trace.token_count());
        for (std::size_t l = 0; l < model.layers.size(); ++l) {
            const auto& tokens = fwd.trace.layers[l].tokens;
            for (std::size_t t = 0; t < tokens.size(); ++t) {
                for (std::size_t r = 0; r < tokens[t].routed.size(); ++r) {
                    GradCovariance& c = slot(l, tokens[t].routed[r].expert);
                    outer_accumulate_inplace(c.g, bwd.expert_grads.grads[l][t][r], scale * scale);
                    ++c.token_count;
                }
            }
        }
    }
    for (auto& c : covs) {
        if (c.token_count == 0) continue;
        const double inv = 1.0 / static_cast<double>(c.token_count);
        for (double& v : c.g.data()) v *= inv;
    }
    return covs;
}

ImportanceTable compute_importances(const MoEModel& model, const std::vector<Batch>& calib,
                                    const CovarianceSet& covs, PassCounter* passes, ScoreLog* log) {
    if (calib.empty()) throw ArgumentError("calibration set is empty");
    const auto& cfg = model.config;
    std::size_t num_slots = 0;
    for (const auto& layer : model.layers) num_slots += layer.experts.size();
    if (covs.size() != num_slots) {
        throw ConsistencyError("covariance set has " + std::to_string(covs.size()) +
                               " entries, model has " + std::to_string(num_slots) + " experts");
    }
    std::vector<std::vector<const Matrix*>> cov_of(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        for (std::size_t e = 0; e < model.layers[l].experts.size(); ++e) {
            const auto& c = find_covariance(covs, l, e);
            if (c.g.rows() != cfg.d_model || c.g.cols() != cfg.d_model) {
                throw ConsistencyError("covariance shape does not match d_model");
            }
            cov_of[l].push_back(&c.g);
        }
    }

    // sums[l][e][j], counts[l][e]
    std::vector<std::vector<Vector>> sums(model.layers.size());
    std::vector<std::vector<std::size_t>> counts(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        for (const auto& e : model.layers[l].experts) sums[l].emplace_back(e.channels(), 0.0);
        counts[l].assign(model.layers[l].experts.size(), 0);
    }

    Vector e_k(cfg.d_model);
    ForwardOptions fwd_opts;
    fwd_opts.passes = passes;
    for (const Batch& batch : calib) {
        auto fwd = lm_forward(model, batch, fwd_opts);
        std::set<ExpertId> logged;
        for (std::size_t l = 0; l < model.layers.size(); ++l) {
            for (const auto& tok : fwd.trace.layers[l].tokens) {
                for (const auto& re : tok.routed) {
                    const ExpertWeights& w = model.layers[l].experts[re.expert];
                    const Matrix& g = *cov_of[l][re.expert];
                    ++counts[l][re.expert];
                    for (std::size_t j = 0; j < w.channels(); ++j) {
                        for (std::size_t r = 0; r < cfg.d_model; ++r) e_k[r] = w.w_down(r, j) * re.phi[j];
                        sums[l][re.expert][j] += quad_form(g, e_k);
                    }
                    if (log != nullptr && logged.insert({l, re.expert}).second) {
                        for (std::size_t j = 0; j < w.channels(); ++j)
                            log->uses.emplace_back(AtomicExpertKey{l, re.expert, j}, &g);
                    }
                }
            }
        }
    }

    ImportanceTable table;
    table.method = "heapr";
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        for (std::size_t e = 0; e < model.layers[l].experts.size(); ++e) {
            const std::size_t n = counts[l][e];
            for (std::size_t j = 0; j < sums[l][e].size(); ++j) {
                const double s = n == 0 ? 0.0 : sums[l][e][j] / static_cast<double>(n);
                table.entries[{l, e, j}] = {s, n};
            }
        }
    }
    return table;
}

ImportanceTable traffic_weighted(const ImportanceTable& table, std::size_t tokens) {
    if (tokens == 0) throw ArgumentError("traffic weighting needs a positive token count");
    ImportanceTable out = table;
    for (auto& [key, e] : out.entries) {
        if (e.token_count > tokens) throw ArgumentError("token count of an expert exceeds the total");
        e.score *= static_cast<double>(e.token_count) / static_cast<double>(tokens);
    }
    return out;
}

std::size_t prune_quota(double ratio, std::size_t n) {
    check_ratio(ratio);
    // the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}

PruneManifest rank_global(const ImportanceTable& table, double ratio, std::size_t channel_floor) {
    check_ratio(ratio);
    if (table.layerwise_only) {
        throw ArgumentError("importance table '" + table.method +
                            "' is only comparable within a layer; use layerwise ranking");
    }
    PruneManifest m;
    m.ratio = ratio;
    m.mode = RankMode::global;
    m.method = table.method;
    m.channel_floor = channel_floor;
    m.total_atomic_experts = table.entries.size();
    m.remaining_channels = channel_counts(table);
    m.quota = prune_quota(ratio, table.entries.size());
    take_quota(sorted_ascending(table, nullptr), m.quota, channel_floor, m);
    return m;
}

PruneManifest rank_layerwise(const ImportanceTable& table, double ratio, std::size_t channel_floor) {
    check_ratio(ratio);
    PruneManifest m;
    m.ratio = ratio;
    m.mode = RankMode::layerwise;
    m.method = table.method;
    m.channel_floor = channel_floor;
    m.total_atomic_experts = table.entries.size();
    m.remaining_channels = channel_counts(table);
    std::set<std::size_t> layers;
    for (const auto& [key, entry] : table.entries) layers.insert(key.layer);
    for (std::size_t l : layers) {
        const auto order = sorted_ascending(table, &l);
        const std::size_t q = prune_quota(ratio, order.size());
        m.quota += q;
        take_quota(order, q, channel_floor, m);
    }
    return m;
}

PruneManifest rank(const ImportanceTable& table, double ratio, RankMode mode, std::size_t channel_floor) {
    return mode == RankMode::global ? rank_global(table, ratio, channel_floor)
                                    : rank_layerwise(table, ratio, channel_floor);
}

MoEModel apply_prune(const MoEModel& model, const PruneManifest& manifest) {
    std::map<ExpertId, std::vector<std::size_t>> by_expert;
    for (const auto& sk : manifest.pruned) {
        const auto& k = sk.key;
        if (k.layer >= model.layers.size() || k.expert >= model.layers[k.layer].experts.size() ||
            k.channel >= model.layers[k.layer].experts[k.expert].channels()) {
            throw ConsistencyError("manifest key " + to_string(k) + " is out of bounds for this model");
        }
        by_expert[{k.layer, k.expert}].push_back(k.channel);
    }
    MoEModel out = model;
    for (auto& [id, channels] : by_expert) {
        std::sort(channels.begin(), channels.end());
        if (std::adjacent_find(channels.begin(), channels.end()) != channels.end()) {
            throw ConsistencyError("manifest prunes a channel twice");
        }
        ExpertWeights& w = out.layers[id.first].experts[id.second];
        w.w_up = w.w_up.without_rows(channels);
        w.w_gate = w.w_gate.without_rows(channels);
        w.w_down = w.w_down.without_cols(channels);
    }
    return out;
}

PipelineResult heapr_pipeline(const MoEModel& model, const std::vector<Batch>& calib,
                              const PipelineOptions& opts) {
    check_ratio(opts.ratio);
    PipelineResult res;
    PassCounter counter;
    res.covariances = estimate_covariances(model, calib, &counter);
    const auto& stage2 = opts.stage2_calib != nullptr ? *opts.stage2_calib : calib;
    res.table = compute_importances(model, stage2, res.covariances, &counter);
    res.manifest = rank(res.table, opts.ratio, opts.mode, opts.channel_floor);
    res.pruned = apply_prune(model, res.manifest);
    res.passes = {calib.size(), counter.forward, counter.backward};
    return res;
}

}  // namespace heapr
