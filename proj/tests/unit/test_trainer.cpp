#include <gtest/gtest.h>

#include <vector>

#include <cmath>
#include <filesystem>

#include "heapr/checkpoint.hpp"
#include "heapr/corpus.hpp"
#include "heapr/trainer.hpp"
#include "test_util.hpp"

using namespace heapr;
using namespace heapr::testing;

namespace {

Corpus small_corpus() {
    CorpusSpec s;
    s.vocab = 16;
    s.seq_len = 12;
    s.num_sequences = 64;
    return generate_corpus(s);
}

}  // namespace

TEST(Trainer, LossFallsOverFirstHundredSteps) {
    const Corpus corpus = generate_corpus(CorpusSpec{});
    TrainConfig tc;
    tc.steps = 100;
    const TrainResult r = train(init_model(MoEConfig{}), corpus.train, tc);
    ASSERT_EQ(r.loss_history.size(), 100u);
    std::vector<double> windows;
    for (std::size_t w = 0; w < 10; ++w) {
        double s = 0.0;
        for (std::size_t i = 0; i < 10; ++i) s += r.loss_history[10 * w + i];
        windows.push_back(s / 10);
    }
    // minibatch noise can lift one window a hair once the curve flattens
    std::size_t rises = 0;
    for (std::size_t w = 1; w < 10; ++w) rises += windows[w] >= windows[w - 1];
    EXPECT_LE(rises, 1u);
    EXPECT_LT(windows.back(), windows.front() - 0.1);
}

TEST(Trainer, ZeroLearningRateIsNoOp) {
    const Corpus c = small_corpus();
    const MoEModel m = init_model(tiny_config(4, 3, 2, 1, 1, 16));
    TrainConfig tc;
    tc.steps = 5;
    tc.lr = 0.0;
    EXPECT_EQ(train(m, c.train, tc).model, m);
}

TEST(Trainer, Deterministic) {
    const Corpus c = small_corpus();
    const MoEModel m = init_model(tiny_config(4, 3, 2, 1, 1, 16));
    TrainConfig tc;
    tc.steps = 20;
    const TrainResult a = train(m, c.train, tc), b = train(m, c.train, tc);
    EXPECT_EQ(a.model, b.model);
    EXPECT_EQ(a.loss_history, b.loss_history);
    tc.seed = 1;
    EXPECT_NE(train(m, c.train, tc).model, a.model);
}

TEST(Trainer, FrozenEmbeddingStaysPut) {
    const Corpus c = small_corpus();
    const MoEModel m = init_model(tiny_config(4, 3, 2, 1, 1, 16));
    TrainConfig tc;
    tc.steps = 10;
    tc.train_embedding = false;
    const TrainResult r = train(m, c.train, tc);
    EXPECT_EQ(r.model.token_embedding, m.token_embedding);
    EXPECT_NE(r.model.output_head, m.output_head);
    tc.train_embedding = true;
    EXPECT_NE(train(m, c.train, tc).model.token_embedding, m.token_embedding);
}

TEST(Trainer, GradientThresholdStopsEarly) {
    const Corpus c = small_corpus();
    TrainConfig tc;
    tc.steps = 50;
    tc.grad_norm_threshold = 1e9;
    const TrainResult r = train(init_model(tiny_config(4, 3, 2, 1, 1, 16)), c.train, tc);
    EXPECT_TRUE(r.converged);
    EXPECT_EQ(r.steps_run, 1u);
}

TEST(Trainer, DivergenceKeepsLastGoodModel) {
    const Corpus c = small_corpus();
    TrainConfig tc;
    tc.steps = 200;
    tc.lr = 1e6;
    tc.warmup_steps = 0;
    tc.schedule = LrSchedule::constant;
    try {
        train(init_model(tiny_config(4, 3, 2, 1, 1, 16)), c.train, tc);
        FAIL() << "expected divergence";
    } catch (const TrainingError& e) {
        EXPECT_GT(e.step, 0u);
        const double loss = lm_forward(e.last_good, c.train).loss;
        EXPECT_TRUE(std::isfinite(loss));
    }
}

TEST(Trainer, LearningRateSchedule) {
    TrainConfig tc;
    tc.steps = 100;
    tc.warmup_steps = 10;
    tc.lr = 1.0;
    tc.min_lr_fraction = 0.1;
    EXPECT_NEAR(learning_rate_at(tc, 0), 0.1, 1e-12);
    EXPECT_NEAR(learning_rate_at(tc, 9), 1.0, 1e-12);
    EXPECT_NEAR(learning_rate_at(tc, 99), 0.1, 1e-3);
    for (std::size_t s = 10; s < 99; ++s) EXPECT_GE(learning_rate_at(tc, s), learning_rate_at(tc, s + 1));
    tc.schedule = LrSchedule::constant;
    tc.warmup_steps = 0;
    EXPECT_EQ(learning_rate_at(tc, 50), 1.0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    MoEModel m = init_model(tiny_config(5, 4, 3, 2, 2, 11));
    m.layers[1].experts[2].w_up(0, 0) = 0.1 + 0.2;  // not representable in short decimal
    m.layers[0].experts[0].w_down(1, 1) = -0.0;
    m.output_head(0, 0) = 5e-324;
    EXPECT_EQ(model_from_json(model_to_json(m)), m);
    const auto path = std::filesystem::temp_directory_path() / "heapr_ckpt_test.json";
    save_model(m, path);
    EXPECT_EQ(load_model(path), m);
    std::filesystem::remove(path);
}

TEST(Checkpoint, RaggedExpertsRoundTrip) {
    MoEModel m = init_model(tiny_config(4, 3, 2));
    auto& e = m.layers[0].experts[1];
    e.w_up = Matrix(1, 4, {1, 2, 3, 4});
    e.w_gate = Matrix(1, 4, {4, 3, 2, 1});
    e.w_down = Matrix(4, 1, {1, 1, 1, 1});
    EXPECT_EQ(model_from_json(model_to_json(m)), m);
}

TEST(Checkpoint, RejectsWrongVersionAndShape) {
    const MoEModel m = init_model(tiny_config());
    auto j = model_to_json(m);
    j["version"] = kCheckpointVersion + 1;
    EXPECT_ANY_THROW(model_from_json(j));
    EXPECT_ANY_THROW(load_model("/nonexistent/model.json"));
}
