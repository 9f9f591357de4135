#include "heapr/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "heapr/rng.hpp"

namespace heapr {

ImportanceTable camera_energy(const MoEModel& model, const std::vector<Batch>& calib, const CameraConfig& cfg) {
    if (cfg.alpha < 0.0) throw ArgumentError("camera alpha must be >= 0");
    std::vector<std::vector<Vector>> sums(model.layers.size());
    std::vector<std::vector<std::size_t>> counts(model.layers.size());
    std::vector<std::vector<Vector>> down_norms(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        for (const auto& e : model.layers[l].experts) {
            sums[l].emplace_back(e.channels(), 0.0);
            Vector norms(e.channels());
            for (std::size_t j = 0; j < e.channels(); ++j) norms[j] = norm2(e.w_down.column(j));
            down_norms[l].push_back(std::move(norms));
        }
        counts[l].assign(model.layers[l].experts.size(), 0);
    }

    for (const Batch& batch : calib) {
        auto fwd = lm_forward(model, batch);
        for (std::size_t l = 0; l < model.layers.size(); ++l) {
            for (const auto& tok : fwd.trace.layers[l].tokens) {
                for (const auto& re : tok.routed) {
                    ++counts[l][re.expert];
                    auto& s = sums[l][re.expert];
                    const auto& dn = down_norms[l][re.expert];
                    for (std::size_t j = 0; j < s.size(); ++j) {
                        const double phi_norm = std::abs(re.phi[j]);
                        s[j] += (phi_norm + cfg.alpha * phi_norm) * dn[j];
                    }
                }
            }
        }
    }

    ImportanceTable t;
    t.method = "camera";
    t.layerwise_only = true;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        for (std::size_t e = 0; e < sums[l].size(); ++e) {
            const auto n = counts[l][e];
            for (std::size_t j = 0; j < sums[l][e].size(); ++j)
                t.entries[{l, e, j}] = {n == 0 ? 0.0 : sums[l][e][j] / static_cast<double>(n), n};
        }
    }
    return t;
}

ImportanceTable random_importance(const MoEModel& model, std::uint64_t seed) {
    SeededRng rng(seed);
    ImportanceTable t;
    t.method = "random";
    for (std::size_t l = 0; l < model.layers.size(); ++l)
        for (std::size_t e = 0; e < model.layers[l].experts.size(); ++e)
            for (std::size_t j = 0; j < model.layers[l].experts[e].channels(); ++j)
                t.entries[{l, e, j}] = {rng.uniform(), 0};
    return t;
}

ImportanceTable magnitude_importance(const MoEModel& model) {
    ImportanceTable t;
    t.method = "magnitude";
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        for (std::size_t e = 0; e < model.layers[l].experts.size(); ++e) {
            const auto& w = model.layers[l].experts[e];
            for (std::size_t j = 0; j < w.channels(); ++j) {
                const double s = norm2(w.w_up.row(j)) * norm2(w.w_gate.row(j)) * norm2(w.w_down.column(j));
                t.entries[{l, e, j}] = {s, 0};
            }
        }
    }
    return t;
}

std::vector<std::pair<ExpertId, double>> expert_aggregates(const ImportanceTable& table) {
    std::map<ExpertId, double> agg;
    for (const auto& [k, e] : table.entries) agg[{k.layer, k.expert}] += e.score;
    std::vector<std::pair<ExpertId, double>> out(agg.begin(), agg.end());
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
    return out;
}

PruneManifest expert_drop_manifest(const ImportanceTable& table, double ratio) {
    PruneManifest m;
    m.ratio = ratio;
    m.mode = RankMode::global;
    m.method = table.method + "+expert_drop";
    m.channel_floor = 0;
    m.total_atomic_experts = table.entries.size();
    m.quota = prune_quota(ratio, table.entries.size());
    for (const auto& [k, e] : table.entries) ++m.remaining_channels[{k.layer, k.expert}];

    std::size_t dropped = 0;
    for (const auto& [id, aggregate] : expert_aggregates(table)) {
        const std::size_t c = m.remaining_channels.at(id);
        if (dropped + c > m.quota) break;
        for (auto it = table.entries.lower_bound({id.first, id.second, 0});
             it != table.entries.end() && it->first.layer == id.first && it->first.expert == id.second; ++it) {
            m.pruned.push_back({it->first, it->second.score});
        }
        m.remaining_channels[id] = 0;
        dropped += c;
    }
    return m;
}

}  // namespace heapr
