#include "conceptsplit/model.hpp"

#include <cmath>

#include <json.hpp>

#include "conceptsplit/container.hpp"
#include "conceptsplit/vocab.hpp"

namespace csplit {

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v <= 0)
            throw ConfigError(std::string("model config: ") + name +
                              " must be positive, got " + std::to_string(v));
    };
    positive(latent_h, "latent_h");
    positive(latent_w, "latent_w");
    positive(latent_c, "latent_c");
    positive(model_dim, "model_dim");
    positive(blocks, "blocks");
    positive(heads, "heads");
    positive(text_dim, "text_dim");
    positive(max_tokens, "max_tokens");
    positive(ffn_dim, "ffn_dim");
    positive(train_timesteps, "train_timesteps");
    if (model_dim % heads != 0)
        throw ConfigError("model config: heads must divide model_dim (" +
                          std::to_string(heads) + " vs " + std::to_string(model_dim) +
                          ")");
}

// ---- text embedder -----------------------------------------------------------

TextEmbedder::TextEmbedder(int text_dim, int max_toks, Rng& rng)
    : max_tokens(max_toks) {
    const int vocab = static_cast<int>(builtin_vocabulary().size());
    std::vector<double> t(static_cast<size_t>(vocab) * text_dim);
    for (double& v : t) v = 0.5 * rng.normal();
    table = Tensor::from_data({vocab, text_dim}, std::move(t));
}

int TextEmbedder::vocab_size() const { return table.dim(0); }

int TextEmbedder::token_id(const std::string& word) const {
    const std::vector<std::string>& vocab = builtin_vocabulary();
    for (size_t i = 0; i < vocab.size(); ++i)
        if (vocab[i] == word) return static_cast<int>(i);
    throw ContractError("word '" + word + "' is not in the vocabulary");
}

PromptEncoding TextEmbedder::encode(const std::vector<std::string>& words) const {
    if (static_cast<int>(words.size()) > max_tokens)
        throw ContractError("prompt has " + std::to_string(words.size()) +
                            " words, max is " + std::to_string(max_tokens));
    PromptEncoding enc;
    enc.words = words;
    enc.num_words = static_cast<int>(words.size());
    enc.token_ids.assign(static_cast<size_t>(max_tokens), kPadTokenId);
    for (size_t i = 0; i < words.size(); ++i)
        enc.token_ids[i] = token_id(words[i]);

    // one-hot x table keeps the embedding differentiable w.r.t. the table
    Tensor onehot = Tensor::zeros({max_tokens, vocab_size()});
    for (int i = 0; i < max_tokens; ++i)
        onehot.data()[static_cast<size_t>(i) * vocab_size() +
                      enc.token_ids[static_cast<size_t>(i)]] = 1.0;
    enc.embedding = matmul(onehot, table);
    return enc;
}

PromptEncoding TextEmbedder::encode_null() const { return encode({}); }

// ---- model -------------------------------------------------------------------

namespace {

Tensor xavier(Rng& rng, int fan_in, int fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::vector<double> v(static_cast<size_t>(fan_in) * fan_out);
    for (double& x : v) x = rng.uniform(-limit, limit);
    return Tensor::from_data({fan_in, fan_out}, std::move(v));
}

Tensor gaussian(Rng& rng, const Shape& s, double stddev) {
    std::vector<double> v(static_cast<size_t>(shape_size(s)));
    for (double& x : v) x = stddev * rng.normal();
    return Tensor::from_data(s, std::move(v));
}

AttentionWeights init_attention(Rng& rng, int q_dim, int kv_dim, int model_dim) {
    AttentionWeights w;
    w.wq = xavier(rng, q_dim, model_dim);
    w.wk = xavier(rng, kv_dim, model_dim);
    w.wv = xavier(rng, kv_dim, model_dim);
    w.wo = xavier(rng, model_dim, model_dim);
    return w;
}

}  // namespace

DenoiserModel DenoiserModel::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    DenoiserModel m;
    m.cfg = cfg;
    Rng root(seed);
    Rng emb_rng = root.fork(0);
    m.embedder = TextEmbedder(cfg.text_dim, cfg.max_tokens, emb_rng);
    Rng wr = root.fork(1);
    m.patch_w = xavier(wr, cfg.latent_c, cfg.model_dim);
    m.patch_b = Tensor::zeros({cfg.model_dim});
    m.pos_emb = gaussian(wr, {cfg.hw(), cfg.model_dim}, 0.1);
    m.time_emb = gaussian(wr, {cfg.train_timesteps, cfg.model_dim}, 0.1);
    for (int b = 0; b < cfg.blocks; ++b) {
        BlockWeights bw;
        bw.ln1_g = Tensor::full({cfg.model_dim}, 1.0);
        bw.ln1_b = Tensor::zeros({cfg.model_dim});
        bw.self_attn = init_attention(wr, cfg.model_dim, cfg.model_dim, cfg.model_dim);
        bw.ln2_g = Tensor::full({cfg.model_dim}, 1.0);
        bw.ln2_b = Tensor::zeros({cfg.model_dim});
        bw.cross_attn = init_attention(wr, cfg.model_dim, cfg.text_dim, cfg.model_dim);
        bw.ln3_g = Tensor::full({cfg.model_dim}, 1.0);
        bw.ln3_b = Tensor::zeros({cfg.model_dim});
        bw.ffn_w1 = xavier(wr, cfg.model_dim, cfg.ffn_dim);
        bw.ffn_b1 = Tensor::zeros({cfg.ffn_dim});
        bw.ffn_w2 = xavier(wr, cfg.ffn_dim, cfg.model_dim);
        bw.ffn_b2 = Tensor::zeros({cfg.model_dim});
        m.blocks.push_back(std::move(bw));
    }
    m.final_ln_g = Tensor::full({cfg.model_dim}, 1.0);
    m.final_ln_b = Tensor::zeros({cfg.model_dim});
    m.out_w = xavier(wr, cfg.model_dim, cfg.latent_c);
    m.out_b = Tensor::zeros({cfg.latent_c});
    return m;
}

std::vector<Tensor*> DenoiserModel::parameters() {
    std::vector<Tensor*> p = {&embedder.table, &patch_w, &patch_b, &pos_emb,
                              &time_emb};
    for (BlockWeights& b : blocks) {
        for (Tensor* t : {&b.ln1_g, &b.ln1_b, &b.self_attn.wq, &b.self_attn.wk,
                          &b.self_attn.wv, &b.self_attn.wo, &b.ln2_g, &b.ln2_b,
                          &b.cross_attn.wq, &b.cross_attn.wk, &b.cross_attn.wv,
                          &b.cross_attn.wo, &b.ln3_g, &b.ln3_b, &b.ffn_w1,
                          &b.ffn_b1, &b.ffn_w2, &b.ffn_b2})
            p.push_back(t);
    }
    p.push_back(&final_ln_g);
    p.push_back(&final_ln_b);
    p.push_back(&out_w);
    p.push_back(&out_b);
    return p;
}

void DenoiserModel::set_trainable(bool v) {
    for (Tensor* t : parameters()) t->set_requires_grad(v);
}

namespace {

// Shared multi-head attention; per-head slices of single projection matrices
// so value/key hooks see the full matrices. Cross-attention maps are pushed
// to `maps` when non-null.
Tensor multihead(const Tensor& q, const Tensor& k, const Tensor& v,
                 const Tensor& wo, int heads, int block, const Hooks& hooks,
                 bool is_cross, std::vector<Tensor>* maps) {
    const int qk_dim = q.dim(1);
    const int v_dim = v.dim(1);
    const int dh = qk_dim / heads;
    const int vh = v_dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor out;
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice(q, 1, h * dh, (h + 1) * dh);
        Tensor kh = slice(k, 1, h * dh, (h + 1) * dh);
        Tensor vhh = slice(v, 1, h * vh, (h + 1) * vh);
        Tensor logits = scalar_mul(matmul(qh, transpose(kh)), scale);
        if (is_cross && hooks.logit_hook) logits = hooks.logit_hook(block, h, logits);
        Tensor attn = row_softmax(logits);
        if (maps) maps->push_back(attn);
        Tensor proj = matmul(matmul(attn, vhh), slice(wo, 0, h * vh, (h + 1) * vh));
        out = out.defined() ? add(out, proj) : proj;
    }
    return out;
}

}  // namespace

ForwardResult denoiser_forward(const DenoiserModel& model, const Tensor& z,
                               const PromptEncoding& prompt, int t,
                               const Hooks& hooks) {
    const ModelConfig& cfg = model.cfg;
    if (z.shape() != Shape{cfg.latent_h, cfg.latent_w, cfg.latent_c})
        throw ShapeError("denoiser_forward: latent " + shape_str(z.shape()) +
                         ", model expects " +
                         shape_str({cfg.latent_h, cfg.latent_w, cfg.latent_c}));
    if (t < 0 || t >= cfg.train_timesteps)
        throw ContractError("denoiser_forward: timestep " + std::to_string(t) +
                            " outside schedule [0, " +
                            std::to_string(cfg.train_timesteps) + ")");
    if (prompt.embedding.shape() != Shape{cfg.max_tokens, cfg.text_dim})
        throw ShapeError("denoiser_forward: prompt embedding " +
                         shape_str(prompt.embedding.shape()));

    ForwardResult res;
    Tensor x = reshape(z, {cfg.hw(), cfg.latent_c});
    x = broadcast_add(matmul(x, model.patch_w), model.patch_b);
    x = add(x, model.pos_emb);
    Tensor temb = reshape(slice(model.time_emb, 0, t, t + 1), {cfg.model_dim});
    x = broadcast_add(x, temb);

    // Cross-attention readouts accumulate into a side stream that merges into
    // the trunk only in front of the output projection. Queries and keys are
    // therefore a function of (z, c, t) alone: no value edit, adapter delta or
    // readout can reach any attention map.
    Tensor side;
    for (int b = 0; b < cfg.blocks; ++b) {
        const BlockWeights& bw = model.blocks[static_cast<size_t>(b)];
        // self-attention over latent tokens
        Tensor h1 = layer_norm(x, bw.ln1_g, bw.ln1_b);
        Tensor sq = matmul(h1, bw.self_attn.wq);
        Tensor sk = matmul(h1, bw.self_attn.wk);
        Tensor sv = matmul(h1, bw.self_attn.wv);
        x = add(x, multihead(sq, sk, sv, bw.self_attn.wo, cfg.heads, b, {},
                             false, nullptr));
        // cross-attention over prompt tokens
        Tensor h2 = layer_norm(x, bw.ln2_g, bw.ln2_b);
        Tensor cq = matmul(h2, bw.cross_attn.wq);
        Tensor ck = matmul(prompt.embedding, bw.cross_attn.wk);
        Tensor cv = matmul(prompt.embedding, bw.cross_attn.wv);
        if (hooks.key_hook) ck = hooks.key_hook(b, ck, prompt);
        if (hooks.value_hook) cv = hooks.value_hook(b, cv, prompt);
        Tensor readout = multihead(cq, ck, cv, bw.cross_attn.wo, cfg.heads, b,
                                   hooks, true, &res.attention);
        side = side.defined() ? add(side, readout) : readout;
        // feed-forward
        Tensor h3 = layer_norm(x, bw.ln3_g, bw.ln3_b);
        Tensor f = gelu(broadcast_add(matmul(h3, bw.ffn_w1), bw.ffn_b1));
        f = broadcast_add(matmul(f, bw.ffn_w2), bw.ffn_b2);
        x = add(x, f);
    }

    Tensor xf = layer_norm(add(x, side), model.final_ln_g, model.final_ln_b);
    Tensor eps = broadcast_add(matmul(xf, model.out_w), model.out_b);
    res.noise = reshape(eps, {cfg.latent_h, cfg.latent_w, cfg.latent_c});
    return res;
}

// ---- schedule & sampler ------------------------------------------------------

NoiseSchedule::NoiseSchedule(int train_timesteps) : steps_(train_timesteps) {
    // cosine schedule (offset 0.008) built from beta-clipped step ratios so
    // alpha_bar stays strictly decreasing and strictly positive
    const double s = 0.008;
    auto f = [&](double u) {
        const double c = std::cos((u + s) / (1.0 + s) * 1.5707963267948966);
        return c * c;
    };
    abar_.resize(static_cast<size_t>(steps_));
    double acc = 1.0;
    for (int t = 0; t < steps_; ++t) {
        const double ratio = f(static_cast<double>(t + 1) / steps_) /
                             f(static_cast<double>(t) / steps_);
        acc *= std::max(ratio, 0.001);  // beta <= 0.999
        abar_[static_cast<size_t>(t)] = acc;
    }
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t == -1) return 1.0;
    if (t < 0 || t >= steps_)
        throw ContractError("alpha_bar: t=" + std::to_string(t) +
                            " outside [-1, " + std::to_string(steps_) + ")");
    return abar_[static_cast<size_t>(t)];
}

std::vector<int> NoiseSchedule::ddim_timesteps(int n) const {
    if (n < 1 || n > steps_)
        throw ContractError("ddim_timesteps: need 1 <= n <= " +
                            std::to_string(steps_) + ", got " + std::to_string(n));
    std::vector<int> ts(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        ts[static_cast<size_t>(i)] = (n - i) * steps_ / n - 1;
    return ts;
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps, const NoiseSchedule& sched,
                 int t, int t_prev) {
    if (t_prev > t)
        throw ContractError("ddim_step: t_prev " + std::to_string(t_prev) +
                            " > t " + std::to_string(t));
    if (t_prev == t) return z_t;
    const double ab_t = sched.alpha_bar(t);
    const double ab_p = sched.alpha_bar(t_prev);
    // x0 estimate, then re-noise at the previous level (eta = 0)
    Tensor x0 = scalar_mul(add(z_t, scalar_mul(eps, -std::sqrt(1.0 - ab_t))),
                           1.0 / std::sqrt(ab_t));
    return add(scalar_mul(x0, std::sqrt(ab_p)),
               scalar_mul(eps, std::sqrt(1.0 - ab_p)));
}

SampleResult sample(const DenoiserModel& model, const PromptEncoding& prompt,
                    const SamplerOptions& opts) {
    const ModelConfig& cfg = model.cfg;
    NoiseSchedule sched(cfg.train_timesteps);
    Rng rng(opts.seed);
    Tensor z = [&] {
        std::vector<double> v(static_cast<size_t>(cfg.hw()) * cfg.latent_c);
        for (double& x : v) x = rng.normal();
        return Tensor::from_data({cfg.latent_h, cfg.latent_w, cfg.latent_c},
                                 std::move(v));
    }();

    PromptEncoding null_prompt = model.embedder.encode_null();
    const std::vector<int> ts = sched.ddim_timesteps(opts.steps);
    SampleResult result;

    const bool need_cond = opts.guidance != 0.0 || !opts.aggregate_tokens.empty() ||
                           static_cast<bool>(opts.on_step);
    for (size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : -1;
        ForwardResult cond;
        if (need_cond) cond = denoiser_forward(model, z, prompt, t, opts.cond_hooks);
        Tensor eps;
        if (opts.guidance == 1.0) {
            eps = cond.noise;
        } else if (opts.guidance == 0.0) {
            eps = denoiser_forward(model, z, null_prompt, t).noise;
        } else {
            Tensor uncond = denoiser_forward(model, z, null_prompt, t).noise;
            eps = add(uncond, scalar_mul(sub(cond.noise, uncond), opts.guidance));
        }
        if (!opts.aggregate_tokens.empty())
            result.attention.push_back(aggregate_attention(
                cond.attention, opts.aggregate_tokens, cfg.latent_h, cfg.latent_w,
                prompt.num_words, t));
        if (opts.on_step) opts.on_step(static_cast<int>(i), t, cond);
        z = ddim_step(z, eps, sched, t, t_prev);
    }
    result.latent = z;
    return result;
}

// ---- persistence -------------------------------------------------------------

namespace {

nlohmann::ordered_json config_json(const ModelConfig& c) {
    return {{"latent_h", c.latent_h},   {"latent_w", c.latent_w},
            {"latent_c", c.latent_c},   {"model_dim", c.model_dim},
            {"blocks", c.blocks},       {"heads", c.heads},
            {"text_dim", c.text_dim},   {"max_tokens", c.max_tokens},
            {"ffn_dim", c.ffn_dim},     {"train_timesteps", c.train_timesteps}};
}

ModelConfig config_from_json(const nlohmann::ordered_json& j) {
    ModelConfig c;
    c.latent_h = j.at("latent_h");
    c.latent_w = j.at("latent_w");
    c.latent_c = j.at("latent_c");
    c.model_dim = j.at("model_dim");
    c.blocks = j.at("blocks");
    c.heads = j.at("heads");
    c.text_dim = j.at("text_dim");
    c.max_tokens = j.at("max_tokens");
    c.ffn_dim = j.at("ffn_dim");
    c.train_timesteps = j.at("train_timesteps");
    return c;
}

std::vector<std::pair<std::string, Tensor*>> named_params(DenoiserModel& m) {
    std::vector<std::pair<std::string, Tensor*>> out = {
        {"embed/table", &m.embedder.table}, {"patch/w", &m.patch_w},
        {"patch/b", &m.patch_b},            {"pos_emb", &m.pos_emb},
        {"time_emb", &m.time_emb},
    };
    for (size_t b = 0; b < m.blocks.size(); ++b) {
        BlockWeights& bw = m.blocks[b];
        const std::string p = "block" + std::to_string(b) + "/";
        out.insert(out.end(),
                   {{p + "ln1_g", &bw.ln1_g},
                    {p + "ln1_b", &bw.ln1_b},
                    {p + "self/wq", &bw.self_attn.wq},
                    {p + "self/wk", &bw.self_attn.wk},
                    {p + "self/wv", &bw.self_attn.wv},
                    {p + "self/wo", &bw.self_attn.wo},
                    {p + "ln2_g", &bw.ln2_g},
                    {p + "ln2_b", &bw.ln2_b},
                    {p + "cross/wq", &bw.cross_attn.wq},
                    {p + "cross/wk", &bw.cross_attn.wk},
                    {p + "cross/wv", &bw.cross_attn.wv},
                    {p + "cross/wo", &bw.cross_attn.wo},
                    {p + "ln3_g", &bw.ln3_g},
                    {p + "ln3_b", &bw.ln3_b},
                    {p + "ffn/w1", &bw.ffn_w1},
                    {p + "ffn/b1", &bw.ffn_b1},
                    {p + "ffn/w2", &bw.ffn_w2},
                    {p + "ffn/b2", &bw.ffn_b2}});
    }
    out.insert(out.end(), {{"final_ln_g", &m.final_ln_g},
                           {"final_ln_b", &m.final_ln_b},
                           {"out/w", &m.out_w},
                           {"out/b", &m.out_b}});
    return out;
}

}  // namespace

void save_model(const DenoiserModel& model, const std::string& path) {
    nlohmann::ordered_json cfg;
    cfg["kind"] = "model";
    cfg["model"] = config_json(model.cfg);
    cfg["vocab"] = builtin_vocabulary();
    cfg["train_steps_done"] = model.train_steps_done;
    std::vector<NamedTensor> arrays;
    for (auto& [name, t] : named_params(const_cast<DenoiserModel&>(model)))
        arrays.push_back({name, *t});
    write_container(path, cfg, arrays);
}

DenoiserModel load_model(const std::string& path) {
    Container c = read_container(path);
    if (c.config.value("kind", "") != "model")
        throw IoError(path + ": not a model checkpoint");
    if (c.config.at("vocab") != nlohmann::ordered_json(builtin_vocabulary()))
        throw IoError(path + ": checkpoint vocabulary does not match this build");
    DenoiserModel m = DenoiserModel::init(config_from_json(c.config.at("model")), 0);
    m.train_steps_done = c.config.value("train_steps_done", 0LL);
    for (auto& [name, t] : named_params(m)) {
        const Tensor& loaded = c.find(name);
        if (loaded.shape() != t->shape())
            throw IoError(path + ": array '" + name + "' has shape " +
                          shape_str(loaded.shape()) + ", expected " +
                          shape_str(t->shape()));
        *t = loaded;
    }
    return m;
}

}  // namespace csplit
