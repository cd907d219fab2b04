#include "conceptsplit/adapters.hpp"

#include <cmath>

#include "conceptsplit/container.hpp"
#include "conceptsplit/train.hpp"
#include "conceptsplit/vocab.hpp"

namespace csplit {

namespace {

Tensor kaiming_rows(Rng& rng, int rows, int cols) {
    const double stddev = 1.0 / std::sqrt(static_cast<double>(cols));
    std::vector<double> v(static_cast<size_t>(rows) * cols);
    for (double& x : v) x = stddev * rng.normal();
    return Tensor::from_data({rows, cols}, std::move(v));
}

bool all_zero(const Tensor& t) {
    for (int64_t i = 0; i < t.size(); ++i)
        if (t.at(i) != 0.0) return false;
    return true;
}

Tensor onehot_column(int n, int position) {
    Tensor t = Tensor::zeros({n, 1});
    t.data()[position] = 1.0;
    return t;
}

}  // namespace

const char* variant_name(ConceptAdapter::Variant v) {
    switch (v) {
        case ConceptAdapter::Variant::value: return "value";
        case ConceptAdapter::Variant::key: return "key";
        case ConceptAdapter::Variant::key_value: return "key+value";
    }
    return "?";
}

ConceptAdapter::Variant parse_variant(const std::string& s) {
    if (s == "value") return ConceptAdapter::Variant::value;
    if (s == "key") return ConceptAdapter::Variant::key;
    if (s == "key+value" || s == "key_value")
        return ConceptAdapter::Variant::key_value;
    throw ConfigError("unknown adapter variant '" + s +
                      "' (expected value, key or key+value)");
}

ConceptAdapter ConceptAdapter::init(const std::string& name,
                                    const std::string& word,
                                    const ModelConfig& cfg, int rank,
                                    Variant variant, uint64_t seed) {
    if (rank < 1) throw ConfigError("adapter rank must be >= 1");
    ConceptAdapter ad;
    ad.name = name;
    ad.bound_word = word;
    ad.rank = rank;
    ad.variant = variant;
    Rng rng(seed);
    for (int b = 0; b < cfg.blocks; ++b) {
        BlockMats m;
        // a is random, b starts at zero: a fresh adapter is the identity
        m.a = kaiming_rows(rng, rank, cfg.text_dim);
        m.b = Tensor::zeros({cfg.model_dim, rank});
        if (variant != Variant::value) {
            m.ak = kaiming_rows(rng, rank, cfg.text_dim);
            m.bk = Tensor::zeros({cfg.model_dim, rank});
        }
        ad.blocks.push_back(std::move(m));
    }
    return ad;
}

std::vector<Tensor*> ConceptAdapter::parameters() {
    std::vector<Tensor*> out;
    for (BlockMats& m : blocks) {
        if (has_value_path()) {
            out.push_back(&m.a);
            out.push_back(&m.b);
        }
        if (has_key_path()) {
            out.push_back(&m.ak);
            out.push_back(&m.bk);
        }
    }
    return out;
}

void ConceptAdapter::set_trainable(bool v) {
    for (Tensor* t : parameters()) t->set_requires_grad(v);
}

Tensor adapter_forward(const ConceptAdapter& adapter, int block, const Tensor& c_i) {
    if (block < 0 || block >= static_cast<int>(adapter.blocks.size()))
        throw ContractError("adapter '" + adapter.name + "' has no block " +
                            std::to_string(block));
    const ConceptAdapter::BlockMats& m = adapter.blocks[static_cast<size_t>(block)];
    if (c_i.ndim() != 2 || c_i.dim(0) != 1 || c_i.dim(1) != m.a.dim(1))
        throw ShapeError("adapter_forward: embedding " + shape_str(c_i.shape()) +
                         " for block " + std::to_string(block) + " expecting (1x" +
                         std::to_string(m.a.dim(1)) + ")");
    // B(A(c_i)): (1,d)x(d,r) -> (1,r), then (1,r)x(r,v) -> (1,v)
    return matmul(matmul(c_i, transpose(m.a)), transpose(m.b));
}

Tensor adapter_forward_key(const ConceptAdapter& adapter, int block,
                           const Tensor& c_i) {
    if (!adapter.has_key_path())
        throw ContractError("adapter '" + adapter.name + "' has no key path");
    const ConceptAdapter::BlockMats& m = adapter.blocks[static_cast<size_t>(block)];
    return matmul(matmul(c_i, transpose(m.ak)), transpose(m.bk));
}

namespace {

void check_positions(const AdapterSet& set, int n) {
    for (size_t i = 0; i < set.entries.size(); ++i) {
        const int p = set.entries[i].position;
        if (p < 0 || p >= n)
            throw ContractError("adapter position " + std::to_string(p) +
                                " outside prompt of length " + std::to_string(n));
        for (size_t j = i + 1; j < set.entries.size(); ++j)
            if (set.entries[j].position == p)
                throw ContractError("duplicate adapter position " +
                                    std::to_string(p));
    }
}

enum class Path { value, key };

Tensor token_wise_delta(const AdapterSet& set, const Tensor& embedding, int block,
                        int n, Path path) {
    Tensor delta;
    for (const AdapterBinding& e : set.entries) {
        const bool wants = path == Path::value ? e.adapter->has_value_path()
                                               : e.adapter->has_key_path();
        if (!wants) continue;
        Tensor c_i = slice(embedding, 0, e.position, e.position + 1);
        Tensor v_i = path == Path::value
                         ? adapter_forward(*e.adapter, block, c_i)
                         : adapter_forward_key(*e.adapter, block, c_i);
        Tensor contribution = matmul(onehot_column(n, e.position), v_i);
        delta = delta.defined() ? add(delta, contribution) : contribution;
    }
    return delta;
}

Tensor apply_delta(const Tensor& base, const Tensor& delta) {
    if (!delta.defined()) return base;
    // off-tape, an exactly-zero delta keeps the result bit-identical
    if (delta.node_id() < 0 && all_zero(delta)) return base;
    return add(base, delta);
}

}  // namespace

Tensor apply_token_wise(const Tensor& values, const AdapterSet& set,
                        const Tensor& embedding, int block) {
    check_positions(set, values.dim(0));
    return apply_delta(values,
                       token_wise_delta(set, embedding, block, values.dim(0),
                                        Path::value));
}

Tensor apply_merged(const Tensor& values, const AdapterSet& set,
                    const Tensor& embedding, int block) {
    Tensor delta;
    for (size_t i = 0; i < set.entries.size(); ++i) {
        const AdapterBinding& e = set.entries[i];
        if (!e.adapter->has_value_path()) continue;
        const ConceptAdapter::BlockMats& m =
            e.adapter->blocks[static_cast<size_t>(block)];
        // the merged baseline runs every row of c through every adapter
        Tensor full = matmul(matmul(embedding, transpose(m.a)), transpose(m.b));
        Tensor weighted = scalar_mul(full, set.weight(i));
        delta = delta.defined() ? add(delta, weighted) : weighted;
    }
    return apply_delta(values, delta);
}

Hooks token_wise_hooks(const AdapterSet& set) {
    Hooks h;
    bool any_key = false;
    for (const AdapterBinding& e : set.entries)
        any_key = any_key || e.adapter->has_key_path();
    h.value_hook = [set](int block, const Tensor& values,
                         const PromptEncoding& prompt) {
        check_positions(set, values.dim(0));
        return apply_delta(values, token_wise_delta(set, prompt.embedding, block,
                                                    values.dim(0), Path::value));
    };
    if (any_key) {
        h.key_hook = [set](int block, const Tensor& keys,
                           const PromptEncoding& prompt) {
            check_positions(set, keys.dim(0));
            return apply_delta(keys, token_wise_delta(set, prompt.embedding, block,
                                                      keys.dim(0), Path::key));
        };
    }
    return h;
}

Hooks merged_hooks(const AdapterSet& set) {
    Hooks h;
    h.value_hook = [set](int block, const Tensor& values,
                         const PromptEncoding& prompt) {
        return apply_merged(values, set, prompt.embedding, block);
    };
    return h;
}

AdapterSet bind_adapters(const std::vector<const ConceptAdapter*>& adapters,
                         const PromptEncoding& prompt) {
    AdapterSet set;
    for (const ConceptAdapter* ad : adapters) {
        int position = -1;
        for (int i = 0; i < prompt.num_words; ++i)
            if (prompt.words[static_cast<size_t>(i)] == ad->bound_word) {
                position = i;
                break;
            }
        if (position < 0) {
            std::string toks;
            for (const std::string& w : prompt.words) toks += " " + w;
            throw ConfigError("bound word '" + ad->bound_word + "' of adapter '" +
                              ad->name + "' is not in the prompt:" + toks);
        }
        set.entries.push_back({ad, position});
    }
    check_positions(set, prompt.num_words == 0 ? 0 : prompt.num_words);
    return set;
}

AdapterTrainStats train_adapter(const DenoiserModel& model, ConceptAdapter& adapter,
                                const std::vector<Scene>& concept_set,
                                const AdapterTrainOptions& opts) {
    if (adapter.variant != ConceptAdapter::Variant::value && !opts.allow_ablation)
        throw ContractError(
            "adapter variant '" + std::string(variant_name(adapter.variant)) +
            "' is an attention-disruption ablation; pass --ablation to train it");
    if (concept_set.size() < 3)
        throw ContractError("adapter training needs at least 3 concept images, got " +
                            std::to_string(concept_set.size()));
    if (static_cast<int>(adapter.blocks.size()) != model.cfg.blocks)
        throw ContractError("adapter block count " +
                            std::to_string(adapter.blocks.size()) +
                            " does not match the model");

    NoiseSchedule sched(model.cfg.train_timesteps);
    Rng base(opts.seed);
    const std::vector<std::string>& templates = caption_templates();

    auto iteration_loss = [&](int iter, bool fixed_eval) {
        Rng r = base.fork(fixed_eval ? (1u << 20) + static_cast<uint64_t>(iter)
                                     : static_cast<uint64_t>(iter));
        const Scene& scene =
            concept_set[static_cast<size_t>(r.below(concept_set.size()))];
        const std::string& tmpl =
            templates[static_cast<size_t>(iter) % templates.size()];
        std::vector<std::string> caption =
            split_words(apply_template(tmpl, adapter.bound_word));
        PromptEncoding enc = model.embedder.encode(caption);

        AdapterSet set = bind_adapters({&adapter}, enc);
        const int t =
            static_cast<int>(r.below(static_cast<uint64_t>(model.cfg.train_timesteps)));
        std::vector<double> nv(static_cast<size_t>(scene.canvas.size()));
        for (double& x : nv) x = r.normal();
        Tensor noise = Tensor::from_data(scene.canvas.shape(), std::move(nv));
        Tensor z0 = add(scalar_mul(scene.canvas, 2.0),
                        Tensor::full(scene.canvas.shape(), -1.0));
        Tensor z_t = add(scalar_mul(z0, std::sqrt(sched.alpha_bar(t))),
                         scalar_mul(noise, std::sqrt(1.0 - sched.alpha_bar(t))));
        return diffusion_loss(model, z_t, enc, t, noise, token_wise_hooks(set));
    };

    auto eval_loss = [&] {
        double total = 0.0;
        const int evals = 8;
        for (int i = 0; i < evals; ++i) total += iteration_loss(i, true).item();
        return total / evals;
    };

    AdapterTrainStats stats;
    stats.initial_loss = eval_loss();

    std::vector<Tensor*> params = adapter.parameters();
    adapter.set_trainable(true);
    AdamOptimizer opt(params, opts.lr);

    for (int iter = 0; iter < opts.iters; ++iter) {
        Tape tape;
        Tensor loss;
        {
            TapeScope scope(tape);
            loss = iteration_loss(iter, false);
        }
        if (!std::isfinite(loss.item()))
            throw NumericError("adapter training diverged at iteration " +
                                   std::to_string(iter),
                               iter);
        GradientMap g = backward(tape, loss);
        std::vector<Tensor> grads;
        for (Tensor* p : params) grads.push_back(g.of(*p));
        opt.step(grads);
        if (opts.on_log && (iter % opts.log_every == 0 || iter + 1 == opts.iters))
            opts.on_log(iter, loss.item());
    }

    adapter.set_trainable(false);
    stats.final_loss = eval_loss();
    return stats;
}

// ---- database ----------------------------------------------------------------

void save_adapter_db(const std::string& path,
                     const std::vector<ConceptAdapter>& adapters) {
    nlohmann::ordered_json cfg;
    cfg["kind"] = "adapter-db";
    nlohmann::ordered_json concepts = nlohmann::ordered_json::object();
    std::vector<NamedTensor> arrays;
    for (const ConceptAdapter& ad : adapters) {
        concepts[ad.name] = {{"word", ad.bound_word},
                             {"rank", ad.rank},
                             {"variant", variant_name(ad.variant)},
                             {"blocks", ad.blocks.size()}};
        for (size_t b = 0; b < ad.blocks.size(); ++b) {
            const std::string p = ad.name + "/block" + std::to_string(b) + "/";
            arrays.push_back({p + "a", ad.blocks[b].a});
            arrays.push_back({p + "b", ad.blocks[b].b});
            if (ad.has_key_path()) {
                arrays.push_back({p + "ak", ad.blocks[b].ak});
                arrays.push_back({p + "bk", ad.blocks[b].bk});
            }
        }
    }
    cfg["concepts"] = concepts;
    write_container(path, cfg, arrays);
}

namespace {

ConceptAdapter adapter_from_container(const Container& c, const std::string& name,
                                      const ModelConfig& cfg) {
    const auto& meta = c.config.at("concepts").at(name);
    ConceptAdapter ad;
    ad.name = name;
    ad.bound_word = meta.at("word");
    ad.rank = meta.at("rank");
    ad.variant = parse_variant(meta.at("variant").get<std::string>());
    const size_t blocks = meta.at("blocks");
    if (static_cast<int>(blocks) != cfg.blocks)
        throw IoError("adapter '" + name + "' was trained for " +
                      std::to_string(blocks) + " blocks, model has " +
                      std::to_string(cfg.blocks));
    for (size_t b = 0; b < blocks; ++b) {
        const std::string p = name + "/block" + std::to_string(b) + "/";
        ConceptAdapter::BlockMats m;
        m.a = c.find(p + "a");
        m.b = c.find(p + "b");
        if (ad.has_key_path()) {
            m.ak = c.find(p + "ak");
            m.bk = c.find(p + "bk");
        }
        ad.blocks.push_back(std::move(m));
    }
    return ad;
}

}  // namespace

std::vector<ConceptAdapter> load_adapter_db(const std::string& path,
                                            const ModelConfig& cfg) {
    Container c = read_container(path);
    if (c.config.value("kind", "") != "adapter-db")
        throw IoError(path + ": not an adapter database");
    std::vector<ConceptAdapter> out;
    for (const auto& [name, meta] : c.config.at("concepts").items()) {
        (void)meta;
        out.push_back(adapter_from_container(c, name, cfg));
    }
    return out;
}

ConceptAdapter load_adapter(const std::string& path, const std::string& name,
                            const ModelConfig& cfg) {
    Container c = read_container(path);
    if (c.config.value("kind", "") != "adapter-db")
        throw IoError(path + ": not an adapter database");
    if (!c.config.at("concepts").contains(name))
        throw IoError(path + ": no adapter named '" + name + "'");
    return adapter_from_container(c, name, cfg);
}

}  // namespace csplit
