#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "heapr/moe_model.hpp"
#include "test_util.hpp"

using namespace heapr;
using namespace heapr::testing;

namespace {

Matrix random_tokens(std::size_t n, std::size_t d, std::uint64_t seed) { return random_matrix(n, d, seed, 1.5); }

double stddev(const Matrix& m) {
    double mean = 0.0;
    for (double v : m.data()) mean += v;
    mean /= static_cast<double>(m.size());
    double s = 0.0;
    for (double v : m.data()) s += (v - mean) * (v - mean);
    return std::sqrt(s / static_cast<double>(m.size()));
}

}  // namespace

TEST(MoEConfig, Validation) {
    EXPECT_NO_THROW(tiny_config().validate());
    EXPECT_THROW(tiny_config(4, 3, 2, 3).validate(), ArgumentError);
    EXPECT_THROW(tiny_config(4, 3, 2, 0).validate(), ArgumentError);
    EXPECT_THROW(tiny_config(4, 0).validate(), ArgumentError);
    EXPECT_THROW(init_model(tiny_config(0)), ArgumentError);
}

TEST(InitModel, DeterministicGivenSeed) {
    EXPECT_EQ(init_model(tiny_config()), init_model(tiny_config()));
    EXPECT_NE(init_model(tiny_config()), init_model(tiny_config(4, 3, 2, 1, 1, 8, 8)));
}

TEST(InitModel, SingleChannelExpertsAreAtomic) {
    const MoEModel m = init_model(tiny_config(4, 1, 3));
    EXPECT_EQ(m.atomic_expert_count(), 3u);
    const Vector x = random_vector(4, 3);
    for (const auto& e : m.layers[0].experts) EXPECT_EQ(expert_forward(e, x).y, atomic_expert_forward(e, 0, x));
}

TEST(InitModel, UniformScaleMoment) {
    MoEConfig c = tiny_config(64, 64, 4, 2, 1, 16);
    const MoEModel m = init_model(c);
    // U(-a, a) has standard deviation a / sqrt(3); a = 1/sqrt(fan_in).
    const double want = 1.0 / std::sqrt(3.0 * 64.0);
    for (const auto& e : m.layers[0].experts) {
        EXPECT_NEAR(stddev(e.w_up), want, 0.2 * want);
        EXPECT_NEAR(stddev(e.w_gate), want, 0.2 * want);
        EXPECT_NEAR(stddev(e.w_down), want, 0.2 * want);
    }
    EXPECT_NEAR(stddev(m.layers[0].router.w_router), want, 0.2 * want);
}

TEST(ExpertForward, ZeroInputGivesZero) {
    const MoEModel m = init_model(tiny_config());
    const auto out = expert_forward(m.layers[0].experts[0], Vector(4, 0.0));
    for (double v : out.y) EXPECT_EQ(v, 0.0);
}

TEST(ExpertForward, ZeroDownProjection) {
    MoEModel m = init_model(tiny_config());
    ExpertWeights w = m.layers[0].experts[1];
    const Vector x = random_vector(4, 11);
    const auto before = expert_forward(w, x);
    w.w_down = Matrix(4, 3);
    const auto after = expert_forward(w, x);
    for (double v : after.y) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(after.phi, before.phi);
}

TEST(ExpertForward, ShapeMismatch) {
    const MoEModel m = init_model(tiny_config());
    EXPECT_THROW(expert_forward(m.layers[0].experts[0], Vector(5, 0.0)), DimensionError);
}

TEST(ExpertForward, MatchesStraightLineEvaluator) {
    const MoEModel m = init_model(tiny_config(6, 5, 3));
    for (std::uint64_t s = 0; s < 10; ++s) {
        const Vector x = random_vector(6, 200 + s, 2.0);
        for (const auto& e : m.layers[0].experts)
            EXPECT_LE(max_abs_diff(expert_forward(e, x).y, naive_expert(e, x)), 1e-12);
    }
}

TEST(AtomicExpert, SumOfChannelsIsExpertOutput) {
    const MoEModel m = init_model(tiny_config(4, 3, 2, 1, 2));
    for (std::uint64_t s = 0; s < 20; ++s) {
        const Vector x = random_vector(4, 300 + s, 3.0);
        for (const auto& layer : m.layers)
            for (const auto& e : layer.experts) {
                Vector sum(4, 0.0);
                for (std::size_t j = 0; j < e.channels(); ++j) {
                    const Vector a = atomic_expert_forward(e, j, x);
                    for (std::size_t r = 0; r < 4; ++r) sum[r] += a[r];
                }
                EXPECT_LE(max_abs_diff(sum, expert_forward(e, x).y), 1e-10);
            }
    }
}

TEST(AtomicExpert, ZeroColumnAndRange) {
    MoEModel m = init_model(tiny_config());
    ExpertWeights& w = m.layers[0].experts[0];
    for (std::size_t r = 0; r < 4; ++r) w.w_down(r, 1) = 0.0;
    for (double v : atomic_expert_forward(w, 1, random_vector(4, 5))) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(atomic_expert_forward(w, 3, random_vector(4, 5)), ArgumentError);
}

TEST(MoELayer, FullRoutingUsesWholeSoftmax) {
    const MoEConfig c = tiny_config(4, 3, 3, 3);
    const MoEModel m = init_model(c);
    const Matrix x = random_tokens(5, 4, 1);
    LayerTrace tr;
    moe_layer_forward(m.layers[0], c, x, &tr);
    for (const auto& tok : tr.tokens) {
        ASSERT_EQ(tok.routed.size(), 3u);
        const Vector p = softmax(tok.router_logits);
        for (const auto& r : tok.routed) EXPECT_NEAR(r.gate, p[r.expert], 1e-15);
    }
}

TEST(MoELayer, SingleExpertGetsUnitGate) {
    const MoEConfig c = tiny_config(4, 3, 3, 1);
    const MoEModel m = init_model(c);
    const Matrix x = random_tokens(5, 4, 2);
    LayerTrace tr;
    const Matrix y = moe_layer_forward(m.layers[0], c, x, &tr);
    for (std::size_t t = 0; t < 5; ++t) {
        ASSERT_EQ(tr.tokens[t].routed.size(), 1u);
        EXPECT_EQ(tr.tokens[t].routed[0].gate, 1.0);
        const auto e = expert_forward(m.layers[0].experts[tr.tokens[t].routed[0].expert], x.row(t));
        EXPECT_LE(max_abs_diff(y.row(t), e.y), 1e-15);
    }
}

TEST(MoELayer, MatchesIndependentEvaluator) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const MoEConfig c = tiny_config(6, 4, 4, 2, 1, 8, seed);
        const MoEModel m = init_model(c);
        const Matrix x = random_tokens(16, 6, 40 + seed);
        LayerTrace tr;
        const Matrix y = moe_layer_forward(m.layers[0], c, x, &tr);
        for (std::size_t t = 0; t < 16; ++t) {
            const Vector want = naive_moe(m.layers[0], 2, Vector(x.row(t).begin(), x.row(t).end()));
            EXPECT_LE(max_abs_diff(y.row(t), want), 1e-10);
            ASSERT_EQ(tr.tokens[t].routed.size(), 2u);
            double s = 0.0;
            for (const auto& r : tr.tokens[t].routed) s += r.gate;
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
    }
}

TEST(MoELayer, TraceRecordsPhiAndOutput) {
    const MoEConfig c = tiny_config(4, 3, 2, 2);
    const MoEModel m = init_model(c);
    const Matrix x = random_tokens(3, 4, 3);
    LayerTrace tr;
    moe_layer_forward(m.layers[0], c, x, &tr);
    for (std::size_t t = 0; t < 3; ++t)
        for (const auto& r : tr.tokens[t].routed) {
            const auto e = expert_forward(m.layers[0].experts[r.expert], x.row(t));
            EXPECT_EQ(r.phi, e.phi);
            EXPECT_EQ(r.output, e.y);
        }
}

TEST(LmForward, UntrainedLossNearLogVocab) {
    MoEConfig c;
    c.vocab = 64;
    c.seq_len = 32;
    // Uniform-random targets: the expected NLL is ln V plus the KL of the predictive
    // distribution from uniform, which stays small at initialisation.
    const MoEModel m = init_model(c);
    const double loss = lm_forward(m, random_batch(16, 32, 64, 9)).loss;
    EXPECT_NEAR(loss, std::log(64.0), 0.15 * std::log(64.0));
}

TEST(LmForward, RiggedHeadPredictsPerfectly) {
    MoEConfig c = tiny_config(4, 3, 2, 1, 1, 8);
    MoEModel m = init_model(c);
    for (auto& layer : m.layers)
        for (auto& e : layer.experts) e.w_down = Matrix(4, 3);
    m.token_embedding = Matrix(8, 4);
    m.token_embedding(2, 0) = 1.0;
    m.output_head = Matrix(8, 4);
    m.output_head(5, 0) = 100.0;
    EXPECT_LT(lm_forward(m, Batch{{2, 5}}).loss, 1e-40);
}

TEST(LmForward, BatchOrderDoesNotMatter) {
    const MoEModel m = init_model(tiny_config());
    Batch b = random_batch(7, 6, 8, 4);
    const double a = lm_forward(m, b).loss;
    std::reverse(b.begin(), b.end());
    std::rotate(b.begin(), b.begin() + 3, b.end());
    EXPECT_NEAR(lm_forward(m, b).loss, a, 1e-12);
}

TEST(LmForward, RejectsBadTokens) {
    const MoEModel m = init_model(tiny_config());
    EXPECT_THROW(lm_forward(m, Batch{{1, 8}}), DataError);
    EXPECT_THROW(lm_forward(m, Batch{{1}}), DataError);
    EXPECT_THROW(lm_forward(m, Batch{}), DataError);
}

TEST(LmForward, ExactlyKappaExpertsPerToken) {
    const MoEConfig c = tiny_config(6, 4, 5, 3, 2, 8);
    const MoEModel m = init_model(c);
    const auto r = lm_forward(m, random_batch(4, 6, 8, 1));
    for (const auto& lt : r.trace.layers)
        for (const auto& tok : lt.tokens) {
            EXPECT_EQ(tok.routed.size(), 3u);
            double s = 0.0;
            for (const auto& e : tok.routed) s += e.gate;
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
}

// Central differences on every parameter of a tiny model.
class BackwardFD : public ::testing::TestWithParam<std::size_t> {};

TEST_P(BackwardFD, EveryParameterMatchesFiniteDifferences) {
    const std::size_t kappa = GetParam();
    const MoEModel m = init_model(tiny_config(4, 3, 2, kappa, 1, 8, 21));
    const Batch b = random_batch(3, 6, 8, 22);
    const auto fwd = lm_forward(m, b);
    const auto bwd = lm_backward(m, b, fwd.trace);
    const auto grads = parameter_matrices(bwd.param_grads);

    MoEModel probe = m;
    auto params = parameter_matrices(probe);
    ASSERT_EQ(params.size(), grads.size());
    const double h = 1e-5;
    std::size_t checked = 0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < params[p]->size(); ++i) {
            double& w = params[p]->data()[i];
            const double w0 = w;
            w = w0 + h;
            const double lp = lm_forward(probe, b, {.record_trace = false}).loss;
            w = w0 - h;
            const double lm = lm_forward(probe, b, {.record_trace = false}).loss;
            w = w0;
            const double fd = (lp - lm) / (2 * h);
            const double an = grads[p]->data()[i];
            EXPECT_LE(std::abs(fd - an), 1e-5 * std::max({std::abs(fd), std::abs(an), 1e-4}))
                << "matrix " << p << " entry " << i;
            ++checked;
        }
    }
    EXPECT_EQ(checked, m.parameter_count());
}

INSTANTIATE_TEST_SUITE_P(Kappa, BackwardFD, ::testing::Values(1u, 2u));

TEST(Backward, UnroutedExpertHasNoEntries) {
    MoEModel m = init_model(tiny_config(4, 3, 3, 1));
    // A hugely negative router row keeps expert 2 out of every top-1.
    for (std::size_t c = 0; c < 4; ++c) m.layers[0].router.w_router(2, c) = 0.0;
    m.layers[0].router.w_router(0, 0) = 50.0;
    m.layers[0].router.w_router(1, 0) = -50.0;
    const Batch b = random_batch(4, 6, 8, 3);
    const auto fwd = lm_forward(m, b);
    const auto bwd = lm_backward(m, b, fwd.trace);
    const auto& lt = fwd.trace.layers[0];
    for (std::size_t t = 0; t < lt.tokens.size(); ++t) {
        ASSERT_EQ(bwd.expert_grads.grads[0][t].size(), lt.tokens[t].routed.size());
        for (const auto& r : lt.tokens[t].routed) EXPECT_NE(r.expert, 2u);
    }
    // No traffic, no gradient.
    for (double v : bwd.param_grads.layers[0].experts[2].w_up.data()) EXPECT_EQ(v, 0.0);
    for (double v : bwd.param_grads.layers[0].experts[2].w_down.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, CapturedGradientMatchesBumpDifferences) {
    // Captured gradients are of the batch-mean loss, including the path through later routers,
    // so the differences let routing respond (h is far too small to flip a top-k choice).
    const MoEModel m = init_model(tiny_config(4, 3, 3, 2, 2, 8, 5));
    const Batch b = random_batch(2, 6, 8, 6);
    const auto fwd = lm_forward(m, b);
    const auto bwd = lm_backward(m, b, fwd.trace);
    const double h = 1e-5;
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t t : {0u, 4u, 9u}) {
            const auto& routed = fwd.trace.layers[l].tokens[t].routed;
            for (std::size_t r = 0; r < routed.size(); ++r)
                for (std::size_t dim = 0; dim < 4; ++dim) {
                    ChannelBump bump{l, t, routed[r].expert, 0, Vector(4, 0.0)};
                    bump.delta[dim] = h;
                    ForwardOptions o;
                    o.bumps = std::span<const ChannelBump>(&bump, 1);
                    o.record_trace = false;
                    const double lp = lm_forward(m, b, o).loss;
                    bump.delta[dim] = -h;
                    const double lm = lm_forward(m, b, o).loss;
                    const double fd = (lp - lm) / (2 * h);
                    EXPECT_NEAR(bwd.expert_grads.grads[l][t][r][dim], fd, 1e-7 + 1e-6 * std::abs(fd));
                }
        }
}

TEST(Backward, GateFactorScalesCapturedGradient) {
    // One layer, two routed experts: both see the same d l / d y, so captured[r] / gate[r]
    // agrees across r. Doubling one gate under frozen routing doubles its ratio partner.
    const MoEModel m = init_model(tiny_config(4, 3, 2, 2, 1, 8, 13));
    const Batch b = random_batch(2, 6, 8, 14);
    auto fwd = lm_forward(m, b);
    ForwardTrace frozen = fwd.trace;
    for (auto& tok : frozen.layers[0].tokens) tok.routed[0].gate *= 2.0;
    ForwardOptions o;
    o.frozen_routing = &frozen;
    const auto refwd = lm_forward(m, b, o);
    const auto bwd = lm_backward(m, b, refwd.trace);
    for (std::size_t t = 0; t < refwd.trace.token_count(); ++t) {
        const auto& routed = refwd.trace.layers[0].tokens[t].routed;
        const auto& orig = fwd.trace.layers[0].tokens[t].routed;
        ASSERT_EQ(routed.size(), 2u);
        EXPECT_EQ(routed[0].gate, 2.0 * orig[0].gate);
        const auto& g0 = bwd.expert_grads.grads[0][t][0];
        const auto& g1 = bwd.expert_grads.grads[0][t][1];
        for (std::size_t dim = 0; dim < 4; ++dim)
            EXPECT_NEAR(g0[dim] * orig[1].gate, 2.0 * orig[0].gate * g1[dim], 1e-12 * (1 + std::abs(g0[dim])));
    }
}

TEST(Backward, RejectsForeignTrace) {
    const MoEModel m = init_model(tiny_config());
    const auto fwd = lm_forward(m, random_batch(2, 6, 8, 1));
    EXPECT_THROW(lm_backward(m, random_batch(2, 6, 8, 2), fwd.trace), ConsistencyError);
    const auto bare = lm_forward(m, random_batch(2, 6, 8, 1), {.record_trace = false});
    EXPECT_THROW(lm_backward(m, random_batch(2, 6, 8, 1), bare.trace), ConsistencyError);
}

TEST(FlopCounter, ForwardCountMatchesHandCount) {
    const MoEConfig c = tiny_config(4, 3, 2, 1, 1, 8);
    const MoEModel m = init_model(c);
    FlopCounter f;
    lm_forward(m, Batch{{1, 2, 3}}, {.flops = &f});
    // two predicting tokens, one routed expert each
    EXPECT_EQ(f.router, 2u * 2 * 2 * 4);
    EXPECT_EQ(f.experts, 2u * (3 * 2 * 4 * 3 + 2 * 3));
    EXPECT_EQ(f.head, 2u * 2 * 8 * 4);
}
