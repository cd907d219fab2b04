#include "conceptsplit/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>

namespace csplit {

namespace {

using json = nlohmann::ordered_json;

[[noreturn]] void bad_field(const std::string& where, const std::string& what) {
    throw ConfigError("config: field '" + where + "' " + what);
}

void check_known(const json& j, const std::string& where,
                 const std::vector<std::string>& known) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool ok = false;
        for (const std::string& k : known) ok = ok || k == key;
        if (!ok) throw ConfigError("config: unknown field '" + where + key + "'");
    }
}

template <typename T>
void read_field(const json& j, const std::string& where, const char* name,
                T& out) {
    if (!j.contains(name)) return;
    try {
        out = j.at(name).get<T>();
    } catch (const json::exception&) {
        bad_field(where + name, "has the wrong type");
    }
}

void read_tristate(const json& j, const std::string& where, const char* name,
                   std::optional<bool>& out) {
    if (!j.contains(name)) return;
    const json& v = j.at(name);
    if (v.is_boolean()) {
        out = v.get<bool>();
    } else if (v.is_string() && v.get<std::string>() == "auto") {
        out = std::nullopt;
    } else {
        bad_field(where + name, "must be true, false or \"auto\"");
    }
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    inference.validate();
    if (train.steps < 0) bad_field("train.steps", "must be >= 0");
    if (train.batch < 1) bad_field("train.batch", "must be >= 1");
    if (!(train.lr > 0)) bad_field("train.lr", "must be > 0");
    if (train.holdout < 1) bad_field("train.holdout", "must be >= 1");
    if (!(train.cond_drop >= 0 && train.cond_drop < 1))
        bad_field("train.cond_drop", "must lie in [0, 1)");
    if (adapter.rank < 1) bad_field("adapter.rank", "must be >= 1");
    if (adapter.iters < 0) bad_field("adapter.iters", "must be >= 0");
    if (!(adapter.lr > 0)) bad_field("adapter.lr", "must be > 0");
    if (adapter.images < 3) bad_field("adapter.images", "must be >= 3");
    if (apply_mode != "token-wise" && apply_mode != "merged")
        bad_field("apply_mode", "must be \"token-wise\" or \"merged\"");
    if (numeric != "fast" && numeric != "verify")
        bad_field("numeric", "must be \"fast\" or \"verify\"");
    if (threads < 0) bad_field("threads", "must be >= 0");
    if (inference.steps > model.train_timesteps)
        bad_field("inference.steps",
                  "cannot exceed model.train_timesteps (" +
                      std::to_string(model.train_timesteps) + ")");
}

InferenceConfig RunConfig::resolved_inference(size_t bound_tokens) const {
    InferenceConfig out = inference;
    if (stage1.has_value()) {
        out.stage1 = *stage1;
        if (out.stage1 && out.stage1_steps > 0 && bound_tokens < 2)
            throw ConfigError("stage 1 was explicitly requested but only " +
                              std::to_string(bound_tokens) +
                              " target token(s) are bound; the pairwise loss "
                              "needs at least 2");
    } else {
        out.stage1 = bound_tokens >= 2 && out.stage1_steps > 0;
    }
    out.afg = afg.value_or(true);
    return out;
}

RunConfig config_from_json(const json& j) {
    RunConfig c;
    check_known(j, "", {"model", "train", "adapter", "inference", "apply_mode",
                        "numeric", "threads", "dump_maps"});
    if (j.contains("model")) {
        const json& m = j.at("model");
        check_known(m, "model.",
                    {"latent_h", "latent_w", "latent_c", "model_dim", "blocks",
                     "heads", "text_dim", "max_tokens", "ffn_dim",
                     "train_timesteps"});
        read_field(m, "model.", "latent_h", c.model.latent_h);
        read_field(m, "model.", "latent_w", c.model.latent_w);
        read_field(m, "model.", "latent_c", c.model.latent_c);
        read_field(m, "model.", "model_dim", c.model.model_dim);
        read_field(m, "model.", "blocks", c.model.blocks);
        read_field(m, "model.", "heads", c.model.heads);
        read_field(m, "model.", "text_dim", c.model.text_dim);
        read_field(m, "model.", "max_tokens", c.model.max_tokens);
        read_field(m, "model.", "ffn_dim", c.model.ffn_dim);
        read_field(m, "model.", "train_timesteps", c.model.train_timesteps);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        check_known(t, "train.",
                    {"steps", "batch", "lr", "seed", "cond_drop", "holdout"});
        read_field(t, "train.", "steps", c.train.steps);
        read_field(t, "train.", "batch", c.train.batch);
        read_field(t, "train.", "lr", c.train.lr);
        read_field(t, "train.", "seed", c.train.seed);
        read_field(t, "train.", "cond_drop", c.train.cond_drop);
        read_field(t, "train.", "holdout", c.train.holdout);
    }
    if (j.contains("adapter")) {
        const json& a = j.at("adapter");
        check_known(a, "adapter.",
                    {"rank", "iters", "lr", "seed", "images", "image_seed"});
        read_field(a, "adapter.", "rank", c.adapter.rank);
        read_field(a, "adapter.", "iters", c.adapter.iters);
        read_field(a, "adapter.", "lr", c.adapter.lr);
        read_field(a, "adapter.", "seed", c.adapter.seed);
        read_field(a, "adapter.", "images", c.adapter.images);
        read_field(a, "adapter.", "image_seed", c.adapter.image_seed);
    }
    if (j.contains("inference")) {
        const json& i = j.at("inference");
        check_known(i, "inference.",
                    {"steps", "guidance", "stage1_steps", "tau", "gamma",
                     "amplify", "suppress", "eta_base", "eta_slope", "seed",
                     "stage1", "afg", "blur_ksize", "blur_sigma"});
        read_field(i, "inference.", "steps", c.inference.steps);
        read_field(i, "inference.", "guidance", c.inference.guidance);
        read_field(i, "inference.", "stage1_steps", c.inference.stage1_steps);
        read_field(i, "inference.", "tau", c.inference.tau);
        read_field(i, "inference.", "gamma", c.inference.gamma);
        read_field(i, "inference.", "amplify", c.inference.amplify);
        read_field(i, "inference.", "suppress", c.inference.suppress);
        read_field(i, "inference.", "eta_base", c.inference.eta_base);
        read_field(i, "inference.", "eta_slope", c.inference.eta_slope);
        read_field(i, "inference.", "seed", c.inference.seed);
        read_field(i, "inference.", "blur_ksize", c.inference.blur_ksize);
        read_field(i, "inference.", "blur_sigma", c.inference.blur_sigma);
        read_tristate(i, "inference.", "stage1", c.stage1);
        read_tristate(i, "inference.", "afg", c.afg);
    }
    read_field(j, "", "apply_mode", c.apply_mode);
    read_field(j, "", "numeric", c.numeric);
    read_field(j, "", "threads", c.threads);
    read_field(j, "", "dump_maps", c.dump_maps);
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " +
                          e.what());
    }
    return config_from_json(j);
}

json config_to_json(const RunConfig& c) {
    json j;
    j["model"] = {{"latent_h", c.model.latent_h},
                  {"latent_w", c.model.latent_w},
                  {"latent_c", c.model.latent_c},
                  {"model_dim", c.model.model_dim},
                  {"blocks", c.model.blocks},
                  {"heads", c.model.heads},
                  {"text_dim", c.model.text_dim},
                  {"max_tokens", c.model.max_tokens},
                  {"ffn_dim", c.model.ffn_dim},
                  {"train_timesteps", c.model.train_timesteps}};
    j["train"] = {{"steps", c.train.steps},
                  {"batch", c.train.batch},
                  {"lr", c.train.lr},
                  {"seed", c.train.seed},
                  {"cond_drop", c.train.cond_drop},
                  {"holdout", c.train.holdout}};
    j["adapter"] = {{"rank", c.adapter.rank},
                    {"iters", c.adapter.iters},
                    {"lr", c.adapter.lr},
                    {"seed", c.adapter.seed},
                    {"images", c.adapter.images},
                    {"image_seed", c.adapter.image_seed}};
    j["inference"] = {{"steps", c.inference.steps},
                      {"guidance", c.inference.guidance},
                      {"stage1_steps", c.inference.stage1_steps},
                      {"tau", c.inference.tau},
                      {"gamma", c.inference.gamma},
                      {"amplify", c.inference.amplify},
                      {"suppress", c.inference.suppress},
                      {"eta_base", c.inference.eta_base},
                      {"eta_slope", c.inference.eta_slope},
                      {"seed", c.inference.seed},
                      {"blur_ksize", c.inference.blur_ksize},
                      {"blur_sigma", c.inference.blur_sigma},
                      {"stage1", c.stage1.has_value() ? json(*c.stage1) : json("auto")},
                      {"afg", c.afg.has_value() ? json(*c.afg) : json("auto")}};
    j["apply_mode"] = c.apply_mode;
    j["numeric"] = c.numeric;
    j["threads"] = c.threads;
    j["dump_maps"] = c.dump_maps;
    return j;
}

std::string resolve_output_path(const std::string& path) {
    std::filesystem::path p(path);
    if (p.is_absolute()) return path;
    if (const char* root = std::getenv("CSPLIT_OUT_ROOT"))
        return (std::filesystem::path(root) / p).string();
    return path;
}

}  // namespace csplit
