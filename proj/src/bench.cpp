#include "heapr/bench.hpp"

#include <cmath>
#include <ostream>

#include "heapr/report_io.hpp"

namespace heapr {

double perplexity(const MoEModel& model, const Batch& split) {
    if (split.empty()) throw ArgumentError("perplexity: split is empty");
    ForwardOptions opts;
    opts.record_trace = false;
    return std::exp(lm_forward(model, split, opts).loss);
}

std::uint64_t expert_flops(std::size_t d_model, std::size_t channels) {
    return 3 * (2 * static_cast<std::uint64_t>(d_model) * channels) + 2 * static_cast<std::uint64_t>(channels);
}

FlopCounter count_flops(const MoEModel& model, const Batch& data) {
    const auto& cfg = model.config;
    const auto trace = lm_forward(model, data).trace;
    const std::uint64_t n = trace.token_count();
    FlopCounter c;
    c.head = n * 2 * cfg.vocab * cfg.d_model;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const auto& layer = model.layers[l];
        c.router += n * 2 * layer.experts.size() * cfg.d_model;
        for (const auto& tok : trace.layers[l].tokens)
            for (const auto& re : tok.routed) c.experts += expert_flops(cfg.d_model, layer.experts[re.expert].channels());
    }
    return c;
}

FlopsReport flops_report(const MoEModel& original, const MoEModel& pruned, const Batch& data) {
    const FlopCounter a = count_flops(original, data);
    const FlopCounter b = count_flops(pruned, data);
    std::vector<TokenId> in, tgt;
    flatten_batch(data, original.config.vocab, in, tgt);
    FlopsReport r;
    r.tokens = in.size();
    const double n = static_cast<double>(r.tokens);
    r.moe_per_token_original = static_cast<double>(a.moe()) / n;
    r.moe_per_token_pruned = static_cast<double>(b.moe()) / n;
    r.total_per_token_original = static_cast<double>(a.total()) / n;
    r.total_per_token_pruned = static_cast<double>(b.total()) / n;
    r.moe_saving_fraction = 1.0 - static_cast<double>(b.moe()) / static_cast<double>(a.moe());
    r.saving_fraction = 1.0 - static_cast<double>(b.total()) / static_cast<double>(a.total());
    r.atomic_fraction_removed = 1.0 - static_cast<double>(pruned.atomic_expert_count()) /
                                          static_cast<double>(original.atomic_expert_count());
    r.parameter_fraction_removed =
        1.0 - static_cast<double>(pruned.parameter_count()) / static_cast<double>(original.parameter_count());
    return r;
}

std::string to_string(Method m) {
    switch (m) {
        case Method::heapr: return "heapr";
        case Method::camera: return "camera";
        case Method::random: return "random";
        case Method::magnitude: return "magnitude";
        case Method::expert_drop: return "expert_drop";
    }
    return "unknown";
}

Method method_from_string(const std::string& s) {
    for (Method m : {Method::heapr, Method::camera, Method::random, Method::magnitude, Method::expert_drop})
        if (to_string(m) == s) return m;
    throw ArgumentError("unknown method '" + s + "'");
}

ImportanceTable score_method(Method method, const MoEModel& model, const std::vector<Batch>& calib,
                             const ScoringOptions& opts) {
    switch (method) {
        case Method::heapr:
        case Method::expert_drop: {
            const auto& stage2 = opts.stage2_calib ? *opts.stage2_calib : calib;
            ImportanceTable t = compute_importances(model, stage2, estimate_covariances(model, calib));
            if (!opts.traffic_weighted) return t;
            std::size_t tokens = 0;
            for (const auto& b : stage2)
                for (const auto& s : b) tokens += s.size() - 1;
            return traffic_weighted(t, tokens);
        }
        case Method::camera: return camera_energy(model, calib, opts.camera);
        case Method::random: return random_importance(model, opts.seed);
        case Method::magnitude: return magnitude_importance(model);
    }
    throw ArgumentError("unknown method");
}

PruneManifest manifest_for(Method method, const ImportanceTable& table, double ratio, RankMode mode,
                           std::size_t channel_floor) {
    if (method == Method::expert_drop) return expert_drop_manifest(table, ratio);
    return rank(table, ratio, mode, channel_floor);
}

std::vector<SweepRow> run_sweep_with_table(const MoEModel& model, const ImportanceTable& table,
                                           const Batch& eval, const SweepConfig& cfg) {
    for (std::size_t i = 0; i < cfg.ratios.size(); ++i) {
        const double r = cfg.ratios[i];
        if (!(r >= 0.0 && r < 1.0)) throw ArgumentError("sweep ratios must lie in [0, 1)");
        if (i > 0 && !(r > cfg.ratios[i - 1])) throw ArgumentError("sweep ratios must be ascending");
    }
    std::vector<SweepRow> rows;
    for (double r : cfg.ratios) {
        const auto manifest = manifest_for(cfg.method, table, r, cfg.mode, cfg.channel_floor);
        const MoEModel pruned = apply_prune(model, manifest);
        const auto flops = flops_report(model, pruned, eval);
        rows.push_back({r, to_string(cfg.method), to_string(cfg.mode), cfg.seed, perplexity(pruned, eval),
                        flops.saving_fraction});
    }
    return rows;
}

std::vector<SweepRow> run_sweep(const MoEModel& model, const std::vector<Batch>& calib, const Batch& eval,
                                const SweepConfig& cfg) {
    return run_sweep_with_table(model, score_method(cfg.method, model, calib, cfg.scoring), eval, cfg);
}

void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out) {
    out << "ratio,method,mode,seed,perplexity,flops_saving\n";
    for (const auto& r : rows) {
        out << format_double(r.ratio) << ',' << r.method << ',' << r.mode << ',' << r.seed << ','
            << format_double(r.perplexity) << ',' << format_double(r.flops_saving) << '\n';
    }
}

}  // namespace heapr
