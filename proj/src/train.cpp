#include "conceptsplit/train.hpp"

#include <cmath>

#include "conceptsplit/threading.hpp"

namespace csplit {

AdamOptimizer::AdamOptimizer(std::vector<Tensor*> params, double lr, double beta1,
                             double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (Tensor* p : params_) {
        m_.emplace_back(static_cast<size_t>(p->size()), 0.0);
        v_.emplace_back(static_cast<size_t>(p->size()), 0.0);
    }
}

void AdamOptimizer::step(const std::vector<Tensor>& grads) {
    if (grads.size() != params_.size())
        throw ContractError("optimizer step: got " + std::to_string(grads.size()) +
                            " gradients for " + std::to_string(params_.size()) +
                            " parameters");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t j = 0; j < params_.size(); ++j) {
        Tensor* p = params_[j];
        const Tensor& g = grads[j];
        if (g.shape() != p->shape())
            throw ShapeError("optimizer step: gradient " + shape_str(g.shape()) +
                             " for parameter " + shape_str(p->shape()));
        double* pd = p->data();
        const double* gd = g.data();
        std::vector<double>& m = m_[j];
        std::vector<double>& v = v_[j];
        for (int64_t i = 0; i < p->size(); ++i) {
            const size_t k = static_cast<size_t>(i);
            m[k] = beta1_ * m[k] + (1.0 - beta1_) * gd[i];
            v[k] = beta2_ * v[k] + (1.0 - beta2_) * gd[i] * gd[i];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            pd[i] = canon(pd[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

Tensor diffusion_loss(const DenoiserModel& model, const Tensor& z_t,
                      const PromptEncoding& prompt, int t,
                      const Tensor& noise_target, const Hooks& hooks) {
    ForwardResult fr = denoiser_forward(model, z_t, prompt, t, hooks);
    const int n = static_cast<int>(fr.noise.size());
    Tensor d = sub(reshape(fr.noise, {n}), noise_target.reshaped_view({n}));
    return mean(elementwise_mul(d, d));
}

namespace {

struct TrainSample {
    Scene scene;
    bool drop_prompt;
    int t;
    Tensor noise;
};

TrainSample make_sample(const DatasetConfig& data_cfg, const ModelConfig& cfg,
                        const Rng& base, uint64_t index, double cond_drop) {
    Rng r = base.fork(index);
    TrainSample s;
    const int count = 1 + static_cast<int>(r.below(3));
    s.scene = gen_scene(data_cfg, r.next_u64(), count);
    s.drop_prompt = r.uniform() < cond_drop;
    s.t = static_cast<int>(r.below(static_cast<uint64_t>(cfg.train_timesteps)));
    std::vector<double> nv(static_cast<size_t>(s.scene.canvas.size()));
    for (double& x : nv) x = r.normal();
    s.noise = Tensor::from_data(s.scene.canvas.shape(), std::move(nv));
    return s;
}

Tensor noised_latent(const Tensor& canvas, const Tensor& noise, double abar) {
    // canvas in [0,1] -> z0 in [-1,1]
    Tensor z0 = add(scalar_mul(canvas, 2.0), Tensor::full(canvas.shape(), -1.0));
    return add(scalar_mul(z0, std::sqrt(abar)),
               scalar_mul(noise, std::sqrt(1.0 - abar)));
}

constexpr uint64_t kHoldoutBase = 1000000000ull;

}  // namespace

TrainStats train_base(DenoiserModel& model, const DatasetConfig& data_cfg,
                      const TrainBaseOptions& opts) {
    if (opts.batch < 1) throw ConfigError("train: batch must be >= 1");
    if (data_cfg.h != model.cfg.latent_h || data_cfg.w != model.cfg.latent_w ||
        data_cfg.c != model.cfg.latent_c)
        throw ConfigError("train: dataset resolution does not match the model");

    NoiseSchedule sched(model.cfg.train_timesteps);
    Rng base(opts.seed);
    PromptEncoding null_prompt = model.embedder.encode_null();

    auto sample_loss = [&](const TrainSample& s) {
        Tensor z_t = noised_latent(s.scene.canvas, s.noise, sched.alpha_bar(s.t));
        PromptEncoding enc =
            s.drop_prompt ? null_prompt : model.embedder.encode(s.scene.caption);
        return diffusion_loss(model, z_t, enc, s.t, s.noise);
    };

    auto holdout_loss = [&] {
        std::vector<double> losses(static_cast<size_t>(opts.holdout_size));
        parallel_for(
            opts.holdout_size,
            [&](int i) {
                TrainSample s = make_sample(data_cfg, model.cfg, base,
                                            kHoldoutBase + static_cast<uint64_t>(i),
                                            0.0);
                losses[static_cast<size_t>(i)] = sample_loss(s).item();
            },
            opts.threads);
        double total = 0.0;
        for (double l : losses) total += l;
        return total / opts.holdout_size;
    };

    std::vector<Tensor*> params = model.parameters();
    model.set_trainable(true);
    AdamOptimizer opt(params, opts.lr);

    TrainStats stats;
    stats.initial_holdout_loss = holdout_loss();

    std::vector<std::vector<Tensor>> sample_grads(static_cast<size_t>(opts.batch));
    std::vector<double> sample_losses(static_cast<size_t>(opts.batch));

    // resumed runs continue the sample stream where the checkpoint stopped
    const long long start_step = model.train_steps_done;
    for (long long step = 0; step < opts.steps; ++step) {
        parallel_for(
            opts.batch,
            [&](int i) {
                TrainSample s = make_sample(
                    data_cfg, model.cfg, base,
                    static_cast<uint64_t>(start_step + step) * opts.batch +
                        static_cast<uint64_t>(i),
                    opts.cond_drop);
                Tape tape;
                TapeScope scope(tape);
                Tensor loss = sample_loss(s);
                sample_losses[static_cast<size_t>(i)] = loss.item();
                GradientMap g = backward(tape, loss);
                std::vector<Tensor>& out = sample_grads[static_cast<size_t>(i)];
                out.clear();
                for (Tensor* p : params) out.push_back(g.of(*p));
            },
            opts.threads);

        double loss_mean = 0.0;
        for (double l : sample_losses) loss_mean += l;
        loss_mean /= opts.batch;
        if (!std::isfinite(loss_mean)) {
            model.set_trainable(false);
            throw NumericError("training diverged (non-finite loss) at step " +
                                   std::to_string(step),
                               step);
        }

        // reduce in index order so results do not depend on the thread count
        std::vector<Tensor> total(params.size());
        for (int i = 0; i < opts.batch; ++i)
            for (size_t j = 0; j < params.size(); ++j)
                total[j] = total[j].defined()
                               ? add(total[j], sample_grads[static_cast<size_t>(i)][j])
                               : sample_grads[static_cast<size_t>(i)][j];
        for (Tensor& g : total) g = scalar_mul(g, 1.0 / opts.batch);
        opt.step(total);

        if (opts.on_log && (step % opts.log_every == 0 || step + 1 == opts.steps))
            opts.on_log(start_step + step, loss_mean);
    }

    model.set_trainable(false);
    stats.final_holdout_loss = opts.steps > 0 ? holdout_loss() : stats.initial_holdout_loss;
    stats.steps_run = opts.steps;
    model.train_steps_done += opts.steps;
    return stats;
}

}  // namespace csplit
