#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "heapr/moe_model.hpp"

namespace heapr {

enum class LrSchedule { constant, cosine };

struct TrainConfig {
    std::size_t steps = 1500;
    std::size_t batch_size = 16;  // sequences per step
    double lr = 0.5;
    double momentum = 0.9;
    LrSchedule schedule = LrSchedule::cosine;
    std::size_t warmup_steps = 50;
    double min_lr_fraction = 0.05;
    // Stop early once the full parameter gradient norm of a step falls below this.
    double grad_norm_threshold = 0.0;
    std::uint64_t seed = 0;
    // false keeps the token embedding at its initial values. A trainable lookup table can
    // absorb most of what the MoE layers would learn at this scale.
    bool train_embedding = false;
};

struct TrainResult {
    MoEModel model;
    std::vector<double> loss_history;  // per step, before the update
    double final_loss = 0.0;
    double final_grad_norm = 0.0;
    std::size_t steps_run = 0;
    bool converged = false;  // gradient threshold reached before the step budget
};

// Loss went non-finite. Carries the model from the last step whose loss was finite.
struct TrainingError : Error {
    TrainingError(const std::string& what, MoEModel last_good, std::size_t step)
        : Error(what), last_good(std::move(last_good)), step(step) {}
    MoEModel last_good;
    std::size_t step;
};

double learning_rate_at(const TrainConfig& cfg, std::size_t step);

double gradient_norm(const MoEModel& grads);

// SGD with heavy-ball momentum on random minibatches drawn from `corpus`.
TrainResult train(MoEModel model, const Batch& corpus, const TrainConfig& cfg);

}  // namespace heapr
