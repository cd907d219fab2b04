#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "conceptsplit/loda.hpp"
#include "conceptsplit/model.hpp"
#include "conceptsplit/train.hpp"
#include "conceptsplit/vocab.hpp"

using namespace csplit;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.latent_h = 8;
    cfg.latent_w = 8;
    cfg.latent_c = 2;
    cfg.model_dim = 16;
    cfg.blocks = 2;
    cfg.heads = 2;
    cfg.text_dim = 16;
    cfg.max_tokens = 8;
    cfg.ffn_dim = 32;
    cfg.train_timesteps = 40;
    return cfg;
}

Tensor rand_latent(Rng& rng, const ModelConfig& cfg) {
    std::vector<double> v(static_cast<size_t>(cfg.hw()) * cfg.latent_c);
    for (double& x : v) x = rng.normal();
    return Tensor::from_data({cfg.latent_h, cfg.latent_w, cfg.latent_c},
                             std::move(v));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(),
                       sizeof(double) * static_cast<size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("prompt encoding") {
    NumericModeGuard mode(NumericMode::verify);
    DenoiserModel model = DenoiserModel::init(tiny_config(), 3);
    const TextEmbedder& emb = model.embedder;

    SUBCASE("empty prompt is all pad rows") {
        PromptEncoding enc = emb.encode({});
        CHECK(enc.num_words == 0);
        for (int i = 0; i < emb.max_tokens; ++i) {
            for (int d = 0; d < model.cfg.text_dim; ++d)
                CHECK(enc.embedding.at(i * model.cfg.text_dim + d) ==
                      emb.table.at(kPadTokenId * model.cfg.text_dim + d));
        }
    }

    SUBCASE("words map to their embedding rows, rest pad") {
        PromptEncoding enc = emb.encode({"red", "square"});
        CHECK(enc.num_words == 2);
        const int red = emb.token_id("red");
        const int square = emb.token_id("square");
        for (int d = 0; d < model.cfg.text_dim; ++d) {
            CHECK(enc.embedding.at(d) == emb.table.at(red * model.cfg.text_dim + d));
            CHECK(enc.embedding.at(model.cfg.text_dim + d) ==
                  emb.table.at(square * model.cfg.text_dim + d));
            CHECK(enc.embedding.at(2 * model.cfg.text_dim + d) ==
                  emb.table.at(kPadTokenId * model.cfg.text_dim + d));
        }
    }

    SUBCASE("deterministic") {
        PromptEncoding a = emb.encode({"a", "blue", "circle"});
        PromptEncoding b = emb.encode({"a", "blue", "circle"});
        CHECK(bitwise_equal(a.embedding, b.embedding));
    }

    SUBCASE("out-of-vocabulary word is named") {
        CHECK_THROWS_WITH_AS(emb.encode({"zebra"}), doctest::Contains("zebra"),
                             ContractError);
    }

    SUBCASE("too-long prompt rejected") {
        std::vector<std::string> words(9, "a");
        CHECK_THROWS_AS(emb.encode(words), ContractError);
    }
}

TEST_CASE("denoiser forward") {
    NumericModeGuard mode(NumericMode::verify);
    DenoiserModel model = DenoiserModel::init(tiny_config(), 5);
    Rng rng(17);
    Tensor z = rand_latent(rng, model.cfg);
    PromptEncoding enc = model.embedder.encode({"a", "red", "square"});

    SUBCASE("output shape matches input; maps cover blocks x heads") {
        ForwardResult fr = denoiser_forward(model, z, enc, 10);
        CHECK(fr.noise.shape() == z.shape());
        CHECK(fr.attention.size() ==
              static_cast<size_t>(model.cfg.blocks * model.cfg.heads));
        for (const Tensor& m : fr.attention)
            CHECK(m.shape() == Shape{model.cfg.hw(), model.cfg.max_tokens});
    }

    SUBCASE("attention rows sum to one") {
        ForwardResult fr = denoiser_forward(model, z, enc, 10);
        for (const Tensor& m : fr.attention)
            for (int q = 0; q < m.dim(0); ++q) {
                double row = 0.0;
                for (int c = 0; c < m.dim(1); ++c) row += m.at(q * m.dim(1) + c);
                CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
            }
    }

    SUBCASE("deterministic forward") {
        ForwardResult a = denoiser_forward(model, z, enc, 3);
        ForwardResult b = denoiser_forward(model, z, enc, 3);
        CHECK(bitwise_equal(a.noise, b.noise));
    }

    SUBCASE("zero value hook changes nothing") {
        Hooks hooks;
        hooks.value_hook = [](int, const Tensor& v, const PromptEncoding&) {
            return add(v, Tensor::zeros(v.shape()));
        };
        ForwardResult base = denoiser_forward(model, z, enc, 3);
        ForwardResult hooked = denoiser_forward(model, z, enc, 3, hooks);
        for (int64_t i = 0; i < base.noise.size(); ++i)
            CHECK(hooked.noise.at(i) == base.noise.at(i));
    }

    SUBCASE("afg logit hook suppresses other tokens' cells") {
        AfgMaskSet ms;
        ms.h = model.cfg.latent_h;
        ms.w = model.cfg.latent_w;
        ms.token_indices = {1, 2};
        for (int k = 0; k < 2; ++k) {
            BinaryMask bm;
            bm.h = ms.h;
            bm.w = ms.w;
            bm.cells.assign(static_cast<size_t>(model.cfg.hw()), 0);
            // token 1 owns the top half, token 2 the bottom half
            for (int q = 0; q < model.cfg.hw(); ++q)
                bm.cells[static_cast<size_t>(q)] =
                    (k == 0) == (q < model.cfg.hw() / 2) ? 1 : 0;
            ms.masks.push_back(bm);
            ms.thresholds.push_back(0.0);
        }
        ForwardResult fr =
            denoiser_forward(model, z, enc, 3, afg_hooks(ms, 3.0, -1e8));
        for (const Tensor& m : fr.attention)
            for (int q = 0; q < model.cfg.hw(); ++q) {
                const int other = q < model.cfg.hw() / 2 ? 2 : 1;
                CHECK(m.at(q * model.cfg.max_tokens + other) < 1e-8);
            }
    }

    SUBCASE("hook targeting a token beyond the prompt fails") {
        AfgMaskSet ms;
        ms.h = model.cfg.latent_h;
        ms.w = model.cfg.latent_w;
        ms.token_indices = {model.cfg.max_tokens + 3};
        ms.masks.push_back(
            {ms.h, ms.w, std::vector<uint8_t>(static_cast<size_t>(model.cfg.hw()), 1)});
        ms.thresholds.push_back(0.0);
        CHECK_THROWS_AS(denoiser_forward(model, z, enc, 3, afg_hooks(ms, 3.0, -1e8)),
                        ContractError);
    }

    SUBCASE("timestep outside the schedule rejected") {
        CHECK_THROWS_AS(denoiser_forward(model, z, enc, -1), ContractError);
        CHECK_THROWS_AS(denoiser_forward(model, z, enc, 40), ContractError);
    }
}

TEST_CASE("noise schedule and ddim") {
    NumericModeGuard mode(NumericMode::verify);
    NoiseSchedule sched(200);

    SUBCASE("alpha_bar decreases from ~1 toward ~0") {
        CHECK(sched.alpha_bar(-1) == 1.0);
        CHECK(sched.alpha_bar(0) > 0.9);
        CHECK(sched.alpha_bar(199) < 0.01);
        for (int t = 1; t < 200; ++t)
            CHECK(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
    }

    SUBCASE("ddim timesteps are descending and in range") {
        std::vector<int> ts = sched.ddim_timesteps(50);
        CHECK(ts.size() == 50);
        CHECK(ts.front() == 199);
        for (size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
        CHECK(ts.back() >= 0);
    }

    Rng rng(23);
    Tensor z0 = Tensor::from_data({2, 2, 1}, {0.3, -0.5, 0.9, 0.1});
    std::vector<double> nv(4);
    for (double& x : nv) x = rng.normal();
    Tensor noise = Tensor::from_data({2, 2, 1}, nv);

    SUBCASE("true noise recovers the x0 estimate") {
        const int t = 120;
        const double ab = sched.alpha_bar(t);
        Tensor z_t = add(scalar_mul(z0, std::sqrt(ab)),
                         scalar_mul(noise, std::sqrt(1.0 - ab)));
        // stepping all the way to alpha_bar = 1 yields exactly the x0 estimate
        Tensor rec = ddim_step(z_t, noise, sched, t, -1);
        for (int i = 0; i < 4; ++i)
            CHECK(rec.at(i) == doctest::Approx(z0.at(i)).epsilon(1e-9));
    }

    SUBCASE("t_prev == t is the identity") {
        Tensor z_t = rand_latent(rng, tiny_config());
        Tensor out = ddim_step(z_t, rand_latent(rng, tiny_config()),
                               NoiseSchedule(40), 7, 7);
        CHECK(out.data() == z_t.data());
    }

    SUBCASE("x0-estimate level invertibility") {
        NoiseSchedule s40(40);
        const int t = 25;
        Tensor z_t = rand_latent(rng, tiny_config());
        Tensor eps = rand_latent(rng, tiny_config());
        const double ab = s40.alpha_bar(t);
        Tensor x0 = scalar_mul(add(z_t, scalar_mul(eps, -std::sqrt(1.0 - ab))),
                               1.0 / std::sqrt(ab));
        Tensor renoised = add(scalar_mul(x0, std::sqrt(ab)),
                              scalar_mul(eps, std::sqrt(1.0 - ab)));
        for (int64_t i = 0; i < z_t.size(); ++i)
            CHECK(renoised.at(i) == doctest::Approx(z_t.at(i)).epsilon(1e-9));
    }

    SUBCASE("t_prev > t rejected") {
        CHECK_THROWS_AS(ddim_step(z0, noise, sched, 5, 9), ContractError);
    }
}

TEST_CASE("sampler") {
    NumericModeGuard mode(NumericMode::verify);
    DenoiserModel model = DenoiserModel::init(tiny_config(), 9);
    PromptEncoding enc = model.embedder.encode({"a", "red", "square"});

    SamplerOptions opts;
    opts.steps = 6;
    opts.seed = 42;

    SUBCASE("guidance 0 equals the unconditional trajectory") {
        opts.guidance = 0.0;
        SampleResult guided = sample(model, enc, opts);
        SamplerOptions uncond_opts = opts;
        uncond_opts.guidance = 1.0;  // conditional-on-null == unconditional
        SampleResult uncond = sample(model, model.embedder.encode_null(), uncond_opts);
        CHECK(bitwise_equal(guided.latent, uncond.latent));
    }

    SUBCASE("guidance 1 equals the conditional trajectory") {
        opts.guidance = 1.0;
        SampleResult got = sample(model, enc, opts);
        // reference loop without CFG
        NoiseSchedule sched(model.cfg.train_timesteps);
        Rng rng(opts.seed);
        std::vector<double> v(static_cast<size_t>(model.cfg.hw()) * model.cfg.latent_c);
        for (double& x : v) x = rng.normal();
        Tensor z = Tensor::from_data(
            {model.cfg.latent_h, model.cfg.latent_w, model.cfg.latent_c}, v);
        std::vector<int> ts = sched.ddim_timesteps(opts.steps);
        for (size_t i = 0; i < ts.size(); ++i) {
            Tensor eps = denoiser_forward(model, z, enc, ts[i]).noise;
            z = ddim_step(z, eps, sched, ts[i],
                          i + 1 < ts.size() ? ts[i + 1] : -1);
        }
        CHECK(bitwise_equal(got.latent, z));
    }

    SUBCASE("fixed seed is bit-identical; attention history recorded") {
        opts.guidance = 7.5;
        opts.aggregate_tokens = {1, 2};
        SampleResult a = sample(model, enc, opts);
        SampleResult b = sample(model, enc, opts);
        CHECK(bitwise_equal(a.latent, b.latent));
        CHECK(a.attention.size() == 6);
        CHECK(a.attention[0].map.shape() == Shape{model.cfg.hw(), 2});
        for (size_t i = 0; i < a.attention.size(); ++i)
            CHECK(bitwise_equal(a.attention[i].map, b.attention[i].map));
    }
}

TEST_CASE("base training decreases held-out loss deterministically") {
    NumericModeGuard mode(NumericMode::fast);
    ModelConfig cfg = tiny_config();
    cfg.latent_h = 16;
    cfg.latent_w = 16;
    cfg.latent_c = 4;
    cfg.max_tokens = 12;  // three-object captions reach 11 words
    DatasetConfig data;

    DenoiserModel model = DenoiserModel::init(cfg, 11);
    TrainBaseOptions opts;
    opts.steps = 30;
    opts.batch = 2;
    opts.holdout_size = 4;
    opts.seed = 5;

    SUBCASE("zero steps leave the model unchanged") {
        DenoiserModel copy = DenoiserModel::init(cfg, 11);
        TrainBaseOptions none = opts;
        none.steps = 0;
        train_base(copy, data, none);
        DenoiserModel fresh = DenoiserModel::init(cfg, 11);
        for (size_t i = 0; i < copy.parameters().size(); ++i)
            CHECK(bitwise_equal(*copy.parameters()[i], *fresh.parameters()[i]));
    }

    SUBCASE("loss decreases and training is seed-deterministic") {
        TrainStats stats = train_base(model, data, opts);
        CHECK(stats.final_holdout_loss < stats.initial_holdout_loss);
        CHECK(model.train_steps_done == 30);

        DenoiserModel again = DenoiserModel::init(cfg, 11);
        train_base(again, data, opts);
        std::vector<Tensor*> pa = model.parameters();
        std::vector<Tensor*> pb = again.parameters();
        for (size_t i = 0; i < pa.size(); ++i) CHECK(bitwise_equal(*pa[i], *pb[i]));
    }
}
