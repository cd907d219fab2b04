#pragma once

#include <functional>
#include <string>
#include <vector>

#include "conceptsplit/aggregate.hpp"
#include "conceptsplit/rng.hpp"
#include "conceptsplit/tensor.hpp"

namespace csplit {

struct ModelConfig {
    int latent_h = 16;
    int latent_w = 16;
    int latent_c = 4;
    int model_dim = 32;  // width of latent tokens
    int blocks = 4;
    int heads = 2;
    int text_dim = 32;       // embedding width d
    int max_tokens = 12;     // prompt length n (padded)
    int ffn_dim = 64;
    int train_timesteps = 200;

    int hw() const { return latent_h * latent_w; }
    void validate() const;
};

// Deterministic word-level embedder over the built-in vocabulary. Every
// prompt encodes to exactly max_tokens rows, padded with the pad embedding;
// the all-pad sequence doubles as the null prompt for CFG.
struct PromptEncoding {
    Tensor embedding;               // (n, d)
    std::vector<int> token_ids;     // length n
    std::vector<std::string> words; // the real (non-pad) words
    int num_words = 0;
};

class TextEmbedder {
  public:
    TextEmbedder() = default;
    TextEmbedder(int text_dim, int max_tokens, Rng& rng);

    int vocab_size() const;
    int token_id(const std::string& word) const;  // throws naming the word
    PromptEncoding encode(const std::vector<std::string>& words) const;
    PromptEncoding encode_null() const;

    Tensor table;  // (vocab, d)
    int max_tokens = 0;
};

// Per-block attention projections. For cross-attention, wk and wq stay frozen
// under adapter training; only value-side deltas are ever attached.
struct AttentionWeights {
    Tensor wq, wk, wv, wo;
};

struct BlockWeights {
    Tensor ln1_g, ln1_b;
    AttentionWeights self_attn;
    Tensor ln2_g, ln2_b;
    AttentionWeights cross_attn;
    Tensor ln3_g, ln3_b;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

// Hooks into the cross-attention of every block. The value hook sees the
// full (n, v) value matrix, the key hook the (n, a) key matrix, and the
// logit hook the pre-softmax logits (hw, n) per head. All run on-tape when
// inputs are tracked.
struct Hooks {
    std::function<Tensor(int block, const Tensor& values, const PromptEncoding&)>
        value_hook;
    std::function<Tensor(int block, const Tensor& keys, const PromptEncoding&)>
        key_hook;
    std::function<Tensor(int block, int head, const Tensor& logits)> logit_hook;
};

struct ForwardResult {
    Tensor noise;                   // (H, W, C)
    std::vector<Tensor> attention;  // cross maps, blocks*heads entries of (hw, n)
};

// Transformer noise predictor over flattened latent patches.
struct DenoiserModel {
    ModelConfig cfg;
    TextEmbedder embedder;
    Tensor patch_w, patch_b;  // (c, D), (D)
    Tensor pos_emb;           // (hw, D)
    Tensor time_emb;          // (T, D)
    std::vector<BlockWeights> blocks;
    Tensor final_ln_g, final_ln_b;
    Tensor out_w, out_b;  // (D, c), (c)
    long long train_steps_done = 0;

    static DenoiserModel init(const ModelConfig& cfg, uint64_t seed);
    std::vector<Tensor*> parameters();
    void set_trainable(bool v);
};

ForwardResult denoiser_forward(const DenoiserModel& model, const Tensor& z,
                               const PromptEncoding& prompt, int t,
                               const Hooks& hooks = {});

// Cosine alpha-bar schedule; alpha_bar(-1) == 1 for the final DDIM step.
class NoiseSchedule {
  public:
    explicit NoiseSchedule(int train_timesteps);
    int steps() const { return steps_; }
    double alpha_bar(int t) const;
    std::vector<int> ddim_timesteps(int n) const;  // descending

  private:
    int steps_;
    std::vector<double> abar_;
};

// Deterministic DDIM update (eta = 0); t_prev == t returns z unchanged.
Tensor ddim_step(const Tensor& z_t, const Tensor& eps, const NoiseSchedule& sched,
                 int t, int t_prev);

struct SamplerOptions {
    int steps = 50;
    double guidance = 7.5;
    uint64_t seed = 0;
    std::vector<int> aggregate_tokens;  // S; empty disables map recording
    Hooks cond_hooks;                   // applied to the conditional branch only
    // Observer of each conditional forward (step index, timestep, result).
    std::function<void(int, int, const ForwardResult&)> on_step;
};

struct SampleResult {
    Tensor latent;  // z_0
    std::vector<AttentionAggregate> attention;
};

SampleResult sample(const DenoiserModel& model, const PromptEncoding& prompt,
                    const SamplerOptions& opts);

// Checkpoint round-trips are bitwise lossless within one numeric mode.
void save_model(const DenoiserModel& model, const std::string& path);
DenoiserModel load_model(const std::string& path);

}  // namespace csplit
