#pragma once

#include <functional>
#include <string>
#include <vector>

#include "conceptsplit/dataset.hpp"
#include "conceptsplit/model.hpp"

namespace csplit {

// Low-rank adapter bound to one vocabulary word, with independent matrices
// per cross-attention block. The default variant touches only the value
// projection; key and key+value variants exist as attention-disruption
// ablations and must be requested explicitly.
struct ConceptAdapter {
    enum class Variant { value, key, key_value };

    std::string name;
    std::string bound_word;
    int rank = 8;
    Variant variant = Variant::value;

    struct BlockMats {
        Tensor a, b;    // value path: a (r, d), b (v, r); b starts at zero
        Tensor ak, bk;  // key path, present for key / key+value variants
    };
    std::vector<BlockMats> blocks;

    static ConceptAdapter init(const std::string& name, const std::string& word,
                               const ModelConfig& cfg, int rank, Variant variant,
                               uint64_t seed);
    std::vector<Tensor*> parameters();  // only matrices the variant trains
    void set_trainable(bool v);
    bool has_key_path() const { return variant != Variant::value; }
    bool has_value_path() const { return variant != Variant::key; }
};

const char* variant_name(ConceptAdapter::Variant v);
ConceptAdapter::Variant parse_variant(const std::string& s);

// V_i = B(A(c_i)) for one block; c_i is (1, d), result (1, v).
Tensor adapter_forward(const ConceptAdapter& adapter, int block, const Tensor& c_i);
Tensor adapter_forward_key(const ConceptAdapter& adapter, int block,
                           const Tensor& c_i);

// One adapter attached to one prompt position.
struct AdapterBinding {
    const ConceptAdapter* adapter;
    int position;
};

struct AdapterSet {
    std::vector<AdapterBinding> entries;
    std::vector<double> merge_weights;  // lambdas for merged mode; default 1

    double weight(size_t i) const {
        return i < merge_weights.size() ? merge_weights[i] : 1.0;
    }
};

// Token-wise application: only bound rows change; all other rows stay
// bitwise identical. Duplicate positions are rejected.
Tensor apply_token_wise(const Tensor& values, const AdapterSet& set,
                        const Tensor& embedding, int block);
// Merged-adapter baseline: every row receives every adapter's delta.
Tensor apply_merged(const Tensor& values, const AdapterSet& set,
                    const Tensor& embedding, int block);

// Hook bundles for denoiser_forward. Token-wise hooks also route key deltas
// for ablation variants through the same one-hot mechanism.
Hooks token_wise_hooks(const AdapterSet& set);
Hooks merged_hooks(const AdapterSet& set);

// Resolves bound words to prompt positions; a bound word missing from the
// prompt is an error listing the prompt tokens.
AdapterSet bind_adapters(const std::vector<const ConceptAdapter*>& adapters,
                         const PromptEncoding& prompt);

struct AdapterTrainOptions {
    int iters = 300;
    double lr = 1e-4;
    uint64_t seed = 7;
    int threads = 0;
    bool allow_ablation = false;  // required for key / key+value variants
    std::function<void(int iter, double loss)> on_log;
    int log_every = 50;
};

struct AdapterTrainStats {
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

// Few-shot adaptation against a frozen base model; only adapter parameters
// move. Captions cycle through the built-in prompt-regularization templates,
// one per iteration.
AdapterTrainStats train_adapter(const DenoiserModel& model, ConceptAdapter& adapter,
                                const std::vector<Scene>& concept_set,
                                const AdapterTrainOptions& opts);

// File-backed adapter database; one container holds many concepts.
void save_adapter_db(const std::string& path,
                     const std::vector<ConceptAdapter>& adapters);
std::vector<ConceptAdapter> load_adapter_db(const std::string& path,
                                            const ModelConfig& cfg);
ConceptAdapter load_adapter(const std::string& path, const std::string& name,
                            const ModelConfig& cfg);

}  // namespace csplit
