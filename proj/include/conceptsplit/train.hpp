#pragma once

#include <functional>
#include <vector>

#include "conceptsplit/dataset.hpp"
#include "conceptsplit/model.hpp"

namespace csplit {

// Plain Adam; moments are kept in double regardless of numeric mode, updated
// parameters are canonicalized like every other stored value.
class AdamOptimizer {
  public:
    AdamOptimizer(std::vector<Tensor*> params, double lr, double beta1 = 0.9,
                  double beta2 = 0.999, double eps = 1e-8);
    void step(const std::vector<Tensor>& grads);  // aligned with params

  private:
    std::vector<Tensor*> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    long long t_ = 0;
};

// Epsilon-prediction MSE for one latent/caption pair; built on-tape so the
// caller can backprop into whatever leaves require grad.
Tensor diffusion_loss(const DenoiserModel& model, const Tensor& z_t,
                      const PromptEncoding& prompt, int t,
                      const Tensor& noise_target, const Hooks& hooks = {});

struct TrainBaseOptions {
    long long steps = 2000;
    int batch = 4;
    double lr = 3e-4;
    uint64_t seed = 1;
    double cond_drop = 0.1;  // probability of training the null prompt (CFG)
    int holdout_size = 16;
    int threads = 0;
    int log_every = 100;
    std::function<void(long long step, double loss)> on_log;
};

struct TrainStats {
    double initial_holdout_loss = 0.0;
    double final_holdout_loss = 0.0;
    long long steps_run = 0;
};

// Base diffusion training on synthetic scenes. Deterministic given
// (options.seed, model); aborts with NumericError naming the step on NaN.
TrainStats train_base(DenoiserModel& model, const DatasetConfig& data_cfg,
                      const TrainBaseOptions& opts);

}  // namespace csplit
