#include "heapr/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "heapr/rng.hpp"

namespace heapr {

namespace {

void check_key(const MoEModel& model, const AtomicExpertKey& k) {
    if (k.layer >= model.layers.size() || k.expert >= model.layers[k.layer].experts.size() ||
        k.channel >= model.layers[k.layer].experts[k.expert].channels()) {
        throw ArgumentError("atomic expert key " + to_string(k) + " out of bounds");
    }
}

MoEModel ablated(const MoEModel& model, const std::vector<AtomicExpertKey>& keys) {
    MoEModel m = model;
    for (const auto& k : keys) {
        check_key(model, k);
        Matrix& down = m.layers[k.layer].experts[k.expert].w_down;
        for (std::size_t r = 0; r < down.rows(); ++r) down(r, k.channel) = 0.0;
    }
    return m;
}

double weighted_loss(const MoEModel& model, const std::vector<Batch>& calib,
                     const std::vector<ForwardTrace>* frozen) {
    if (calib.empty()) throw ArgumentError("calibration set is empty");
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t b = 0; b < calib.size(); ++b) {
        ForwardOptions opts;
        opts.record_trace = false;
        opts.frozen_routing = frozen != nullptr ? &(*frozen)[b] : nullptr;
        auto fwd = lm_forward(model, calib[b], opts);
        total += fwd.loss * static_cast<double>(fwd.trace.token_count());
        n += fwd.trace.token_count();
    }
    return total / static_cast<double>(n);
}

std::vector<ForwardTrace> baseline_traces(const MoEModel& model, const std::vector<Batch>& calib) {
    std::vector<ForwardTrace> out;
    for (const auto& b : calib) out.push_back(lm_forward(model, b).trace);
    return out;
}

// Parameter p of channel j: [0, d) w_up row, [d, 2d) w_gate row, [2d, 3d) w_down column.
double& param_ref(ExpertWeights& w, std::size_t j, std::size_t p) {
    const std::size_t d = w.w_up.cols();
    const std::size_t group = p / d, idx = p % d;
    if (group == 0) return w.w_up(j, idx);
    if (group == 1) return w.w_gate(j, idx);
    return w.w_down(idx, j);
}

}  // namespace

double mean_loss(const MoEModel& model, const std::vector<Batch>& calib) {
    return weighted_loss(model, calib, nullptr);
}

double joint_loss_delta(const MoEModel& model, const std::vector<Batch>& calib,
                        const std::vector<AtomicExpertKey>& keys, const DeltaOptions& opts) {
    const MoEModel m = ablated(model, keys);
    if (opts.freeze_routing) {
        const auto traces = baseline_traces(model, calib);
        return weighted_loss(m, calib, &traces) - weighted_loss(model, calib, &traces);
    }
    return weighted_loss(m, calib, nullptr) - weighted_loss(model, calib, nullptr);
}

double true_loss_delta(const MoEModel& model, const std::vector<Batch>& calib, const AtomicExpertKey& key,
                       const DeltaOptions& opts) {
    return joint_loss_delta(model, calib, {key}, opts);
}

double fd_cross_hessian(const MoEModel& model, std::span<const double> x, const AtomicExpertKey& key_a,
                        const AtomicExpertKey& key_b, const FDConfig& fd, std::size_t num_pairs,
                        std::uint64_t seed) {
    check_key(model, key_a);
    check_key(model, key_b);
    if (key_a.layer != key_b.layer) throw ArgumentError("fd_cross_hessian: keys must share a layer");
    const std::size_t d = model.config.d_model;
    if (x.size() != d) throw DimensionError("fd_cross_hessian: input width mismatch");
    if (!(fd.h > 0.0)) throw ArgumentError("finite-difference step must be > 0");

    const auto& layer = model.layers[key_a.layer];
    const bool same_expert = key_a.expert == key_b.expert;
    const bool same_key = key_a == key_b;
    const std::size_t np = 3 * d;

    SeededRng rng(seed);
    double worst = 0.0;
    for (std::size_t s = 0; s < num_pairs; ++s) {
        std::size_t p = 0, q = 0;
        if (same_key) {
            do {
                p = rng.below(np);
                q = rng.below(np);
            } while (p == q || (p / d == q / d && p / d != 1));
        } else {
            p = rng.below(np);
            q = rng.below(np);
        }

        auto eval = [&](double sp, double sq) {
            ExpertWeights wa = layer.experts[key_a.expert];
            ExpertWeights wb = same_expert ? ExpertWeights{} : layer.experts[key_b.expert];
            ExpertWeights& tb = same_expert ? wa : wb;
            param_ref(wa, key_a.channel, p) += sp;
            param_ref(tb, key_b.channel, q) += sq;
            Vector y = expert_forward(wa, x).y;
            if (!same_expert) {
                const Vector yb = expert_forward(wb, x).y;
                for (std::size_t i = 0; i < d; ++i) y[i] += yb[i];
            }
            return y;
        };
        const double h = fd.h;
        const Vector fpp = eval(h, h), fpm = eval(h, -h), fmp = eval(-h, h), fmm = eval(-h, -h);
        for (std::size_t i = 0; i < d; ++i) {
            const double mixed = (fpp[i] - fpm[i] - fmp[i] + fmm[i]) / (4.0 * h * h);
            worst = std::max(worst, std::abs(mixed));
        }
    }
    return worst;
}

double SharedGradientReport::max_deviation() const noexcept {
    return std::max({max_fd_deviation, max_channel_spread, stored_copy_deviation});
}

SharedGradientReport shared_gradient_check(const MoEModel& model, const Batch& batch, const FDConfig& fd,
                                           std::size_t num_samples, std::size_t channels_per_sample,
                                           std::uint64_t seed) {
    if (!(fd.h > 0.0)) throw ArgumentError("finite-difference step must be > 0");
    auto fwd = lm_forward(model, batch);
    auto bwd = lm_backward(model, batch, fwd.trace);
    const double n = static_cast<double>(fwd.trace.token_count());
    const std::size_t d = model.config.d_model;

    struct Site {
        std::size_t layer, token, routed;
    };
    std::vector<Site> sites;
    for (std::size_t l = 0; l < fwd.trace.layers.size(); ++l)
        for (std::size_t t = 0; t < fwd.trace.layers[l].tokens.size(); ++t)
            for (std::size_t r = 0; r < fwd.trace.layers[l].tokens[t].routed.size(); ++r) sites.push_back({l, t, r});
    SeededRng rng(seed);
    rng.shuffle(sites.begin(), sites.end());
    if (sites.size() > num_samples) sites.resize(num_samples);

    // Positions never see each other, so only the site's own sequence has to be re-run.
    std::vector<std::size_t> seq_of, pos_of;
    for (std::size_t q = 0; q < batch.size(); ++q)
        for (std::size_t p = 0; p + 1 < batch[q].size(); ++p) {
            seq_of.push_back(q);
            pos_of.push_back(p);
        }

    SharedGradientReport rep;
    for (const Site& s : sites) {
        const auto& re = fwd.trace.layers[s.layer].tokens[s.token].routed[s.routed];
        const Batch own{batch[seq_of[s.token]]};
        const double n_own = static_cast<double>(own.front().size() - 1);
        const std::size_t c = model.layers[s.layer].experts[re.expert].channels();
        Vector captured = bwd.expert_grads.grads[s.layer][s.token][s.routed];
        for (double& v : captured) v *= n;

        // Every channel of the expert is handed the same stored vector.
        const std::vector<Vector> per_channel(c, bwd.expert_grads.grads[s.layer][s.token][s.routed]);
        for (const auto& copy : per_channel)
            for (std::size_t m = 0; m < d; ++m)
                rep.stored_copy_deviation =
                    std::max(rep.stored_copy_deviation, std::abs(copy[m] - per_channel.front()[m]));

        std::vector<std::size_t> channels(c);
        std::iota(channels.begin(), channels.end(), 0);
        rng.shuffle(channels.begin(), channels.end());
        channels.resize(std::min(c, channels_per_sample));

        Vector lo(d, std::numeric_limits<double>::infinity());
        Vector hi(d, -std::numeric_limits<double>::infinity());
        for (std::size_t j : channels) {
            for (std::size_t m = 0; m < d; ++m) {
                auto loss_with = [&](double step) {
                    ChannelBump bump{s.layer, pos_of[s.token], re.expert, j, Vector(d, 0.0)};
                    bump.delta[m] = step;
                    ForwardOptions opts;
                    opts.record_trace = false;
                    opts.bumps = std::span<const ChannelBump>(&bump, 1);
                    return lm_forward(model, own, opts).loss;
                };
                const double sens = (loss_with(fd.h) - loss_with(-fd.h)) / (2.0 * fd.h) * n_own;
                rep.max_fd_deviation = std::max(rep.max_fd_deviation, std::abs(sens - captured[m]));
                lo[m] = std::min(lo[m], sens);
                hi[m] = std::max(hi[m], sens);
            }
        }
        for (std::size_t m = 0; m < d; ++m) rep.max_channel_spread = std::max(rep.max_channel_spread, hi[m] - lo[m]);
        ++rep.samples;
    }
    return rep;
}

Matrix softmax_nll_hessian(std::span<const double> logits) {
    const Vector p = softmax(logits);
    Matrix h(p.size(), p.size());
    for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = 0; j < p.size(); ++j) h(i, j) = (i == j ? p[i] : 0.0) - p[i] * p[j];
    return h;
}

double fisher_hessian_softmax_check(std::size_t dim, std::size_t num_samples, std::uint64_t seed) {
    if (dim < 2) throw ArgumentError("fisher check needs dim >= 2");
    SeededRng rng(seed);
    Vector z(dim);
    for (double& v : z) v = rng.normal();
    const Vector p = softmax(z);
    const Matrix hess = softmax_nll_hessian(z);

    Matrix fisher(dim, dim);
    Vector g(dim);
    auto grad_for = [&](std::size_t y) {
        for (std::size_t i = 0; i < dim; ++i) g[i] = p[i] - (i == y ? 1.0 : 0.0);
    };
    if (num_samples == 0) {
        for (std::size_t y = 0; y < dim; ++y) {
            grad_for(y);
            outer_accumulate_inplace(fisher, g, p[y]);
        }
    } else {
        Vector cdf(dim);
        std::partial_sum(p.begin(), p.end(), cdf.begin());
        for (std::size_t s = 0; s < num_samples; ++s) {
            const double u = rng.uniform() * cdf.back();
            const auto y = static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
            grad_for(std::min(y, dim - 1));
            outer_accumulate_inplace(fisher, g);
        }
        for (double& v : fisher.data()) v /= static_cast<double>(num_samples);
    }
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < hess.size(); ++i) {
        num += (fisher.data()[i] - hess.data()[i]) * (fisher.data()[i] - hess.data()[i]);
        den += hess.data()[i] * hess.data()[i];
    }
    return std::sqrt(num / den);
}

Matrix atomic_expert_jacobian(const ExpertWeights& w, std::size_t channel, std::span<const double> x) {
    if (channel >= w.channels()) throw ArgumentError("channel out of range");
    const std::size_t d = w.w_up.cols();
    if (x.size() != d) throw DimensionError("jacobian input width mismatch");
    const double a = dot(w.w_gate.row(channel), x);
    const double b = dot(w.w_up.row(channel), x);
    const double phi = silu(a) * b;
    Matrix jac(d, 3 * d);
    for (std::size_t r = 0; r < d; ++r) {
        const double wd = w.w_down(r, channel);
        for (std::size_t n = 0; n < d; ++n) {
            jac(r, n) = wd * silu(a) * x[n];
            jac(r, d + n) = wd * silu_grad(a) * b * x[n];
        }
        jac(r, 2 * d + r) = phi;
    }
    return jac;
}

ConstrainedMinimumResult constrained_minimum_solve(const Matrix& jacobian, std::span<const double> g, std::span<const double> e) {
    const std::size_t d = jacobian.rows();
    if (g.size() != d || e.size() != d) throw DimensionError("constrained_minimum_solve: shape mismatch");
    ConstrainedMinimumResult res;
    const double ge = dot(g, e);
    res.quad_value = 0.5 * ge * ge;
    const double e_norm = norm2(e);
    if (e_norm == 0.0) {
        res.feasible = true;
        res.delta.assign(jacobian.cols(), 0.0);
        return res;
    }
    // least-norm feasible point: delta = -J^T (J J^T)^{-1} e
    const Matrix jjt = matmul(jacobian, jacobian.transposed());
    Vector rhs(e.begin(), e.end());
    for (double& v : rhs) v = -v;
    Vector y;
    if (!solve_linear(jjt, rhs, y)) return res;
    res.delta = matvec_transposed(jacobian, y);
    Vector jd = matvec(jacobian, res.delta);
    for (std::size_t i = 0; i < d; ++i) jd[i] += e[i];
    res.residual = norm2(jd);
    res.feasible = res.residual <= 1e-8 * std::max(1.0, e_norm);
    if (!res.feasible) return res;
    // 1/2 delta^T J^T g g^T J delta, assembled from the parameter-space curvature
    const Vector jtg = matvec_transposed(jacobian, g);
    const double s = dot(jtg, res.delta);
    res.cost = 0.5 * s * s;
    return res;
}

ConstrainedMinimumResult constrained_minimum_check(const MoEModel& model, const Sequence& sample, const AtomicExpertKey& key) {
    check_key(model, key);
    if (sample.size() != 2) throw ArgumentError("constrained_minimum_check takes a single (token, next) sample");
    const Batch batch{sample};
    auto fwd = lm_forward(model, batch);
    auto bwd = lm_backward(model, batch, fwd.trace);
    const auto& tok = fwd.trace.layers[key.layer].tokens[0];
    const std::size_t d = model.config.d_model;
    Vector g(d, 0.0);
    for (std::size_t r = 0; r < tok.routed.size(); ++r)
        if (tok.routed[r].expert == key.expert) g = bwd.expert_grads.grads[key.layer][0][r];
    const auto& w = model.layers[key.layer].experts[key.expert];
    const Vector e = atomic_expert_forward(w, key.channel, tok.input);
    return constrained_minimum_solve(atomic_expert_jacobian(w, key.channel, tok.input), g, e);
}

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("spearman: length mismatch");
    const std::size_t n = a.size();
    if (n < 2) return 0.0;
    auto ranks = [n](std::span<const double> v) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
        Vector r(n);
        for (std::size_t i = 0; i < n;) {
            std::size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const Vector ra = ranks(a), rb = ranks(b);
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / static_cast<double>(n);
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / static_cast<double>(n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

ImportanceTable shuffled_table(const ImportanceTable& table, std::uint64_t seed) {
    std::vector<ImportanceEntry> values;
    for (const auto& [k, e] : table.entries) values.push_back(e);
    SeededRng rng(seed);
    rng.shuffle(values.begin(), values.end());
    ImportanceTable out = table;
    out.method = table.method + "+shuffled";
    std::size_t i = 0;
    for (auto& [k, e] : out.entries) e = values[i++];
    return out;
}

ObsReport obs_prediction_report(const MoEModel& model, const std::vector<Batch>& calib, const ImportanceTable& table,
                                const ObsOptions& opts) {
    std::vector<AtomicExpertKey> keys;
    for (const auto& [k, e] : table.entries) keys.push_back(k);
    if (opts.max_keys > 0 && keys.size() > opts.max_keys) {
        SeededRng rng(opts.seed);
        rng.shuffle(keys.begin(), keys.end());
        keys.resize(opts.max_keys);
        std::sort(keys.begin(), keys.end());
    }

    std::vector<ForwardTrace> traces;
    const std::vector<ForwardTrace>* frozen = nullptr;
    if (opts.delta.freeze_routing) {
        traces = baseline_traces(model, calib);
        frozen = &traces;
    }
    const double base = weighted_loss(model, calib, frozen);

    ObsReport rep;
    for (const auto& k : keys) {
        const double measured = weighted_loss(ablated(model, {k}), calib, frozen) - base;
        rep.rows.push_back({k, table.entries.at(k).score, measured});
    }
    Vector pred, meas;
    for (const auto& r : rep.rows) {
        pred.push_back(r.predicted);
        meas.push_back(r.measured);
    }
    rep.spearman = spearman(pred, meas);

    std::vector<ObsRow> order = rep.rows;
    std::stable_sort(order.begin(), order.end(),
                     [](const ObsRow& a, const ObsRow& b) { return a.predicted < b.predicted; });
    rep.decile_count = std::max<std::size_t>(1, order.size() / 10);
    if (order.empty()) rep.decile_count = 0;
    std::vector<AtomicExpertKey> decile_keys;
    for (std::size_t i = 0; i < rep.decile_count; ++i) {
        const double err = std::abs(order[i].predicted - order[i].measured);
        rep.decile_mean_abs_error += err;
        rep.decile_max_abs_error = std::max(rep.decile_max_abs_error, err);
        rep.decile_sum_measured += order[i].measured;
        decile_keys.push_back(order[i].key);
    }
    if (rep.decile_count > 0) rep.decile_mean_abs_error /= static_cast<double>(rep.decile_count);
    if (opts.joint_decile && !decile_keys.empty()) {
        rep.decile_joint_measured = weighted_loss(ablated(model, decile_keys), calib, frozen) - base;
    }
    return rep;
}

}  // namespace heapr
