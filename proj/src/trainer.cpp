#include "heapr/trainer.hpp"

#include <cmath>
#include <numbers>

#include "heapr/rng.hpp"

namespace heapr {

double learning_rate_at(const TrainConfig& cfg, std::size_t step) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
        return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    }
    if (cfg.schedule == LrSchedule::constant || cfg.steps <= cfg.warmup_steps) return cfg.lr;
    const double progress = static_cast<double>(step - cfg.warmup_steps) /
                            static_cast<double>(cfg.steps - cfg.warmup_steps);
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return cfg.lr * (cfg.min_lr_fraction + (1.0 - cfg.min_lr_fraction) * cosine);
}

double gradient_norm(const MoEModel& grads) {
    double s = 0.0;
    for (const Matrix* m : parameter_matrices(grads))
        for (double v : m->data()) s += v * v;
    return std::sqrt(s);
}

TrainResult train(MoEModel model, const Batch& corpus, const TrainConfig& cfg) {
    if (corpus.empty()) throw ArgumentError("training corpus is empty");
    if (cfg.batch_size < 1) throw ArgumentError("batch_size must be >= 1");

    SeededRng rng(cfg.seed);
    MoEModel velocity = zeros_like(model);
    MoEModel last_good = model;
    TrainResult out;
    out.loss_history.reserve(cfg.steps);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Batch batch;
        batch.reserve(cfg.batch_size);
        for (std::size_t b = 0; b < cfg.batch_size; ++b) batch.push_back(corpus[rng.below(corpus.size())]);

        auto fwd = lm_forward(model, batch);
        if (!std::isfinite(fwd.loss)) {
            throw TrainingError("loss became non-finite at step " + std::to_string(step),
                                std::move(last_good), step);
        }
        last_good = model;
        auto bwd = lm_backward(model, batch, fwd.trace);
        const double gnorm = gradient_norm(bwd.param_grads);
        out.loss_history.push_back(fwd.loss);
        out.final_loss = fwd.loss;
        out.final_grad_norm = gnorm;
        out.steps_run = step + 1;
        if (gnorm < cfg.grad_norm_threshold) {
            out.converged = true;
            break;
        }

        const double lr = learning_rate_at(cfg, step);
        auto params = parameter_matrices(model);
        auto vel = parameter_matrices(velocity);
        auto grads = parameter_matrices(bwd.param_grads);
        // parameter_matrices lists the token embedding first.
        for (std::size_t m = cfg.train_embedding ? 0 : 1; m < params.size(); ++m) {
            auto& p = params[m]->data();
            auto& v = vel[m]->data();
            const auto& gr = grads[m]->data();
            for (std::size_t i = 0; i < p.size(); ++i) {
                v[i] = cfg.momentum * v[i] + gr[i];
                p[i] -= lr * v[i];
            }
        }
    }
    out.model = std::move(model);
    return out;
}

}  // namespace heapr
