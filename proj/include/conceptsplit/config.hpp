#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "conceptsplit/loda.hpp"
#include "conceptsplit/model.hpp"

namespace csplit {

// Full run configuration shared by every CLI command. Parsed from a JSON
// file with strict validation (unknown or ill-typed fields are rejected by
// name); CLI flags override individual fields; the resolved result is echoed
// into every output directory.
struct RunConfig {
    ModelConfig model;

    struct Train {
        long long steps = 2000;
        int batch = 4;
        double lr = 3e-4;
        uint64_t seed = 1;
        double cond_drop = 0.1;
        int holdout = 16;
    } train;

    struct Adapter {
        int rank = 8;
        int iters = 300;
        double lr = 1e-4;
        uint64_t seed = 7;
        int images = 4;
        uint64_t image_seed = 99;
    } adapter;

    InferenceConfig inference;
    // tri-state: unset = auto (stage 1 turns on only when two or more target
    // tokens are bound); explicitly requesting stage 1 with fewer is an error
    std::optional<bool> stage1;
    std::optional<bool> afg;

    std::string apply_mode = "token-wise";  // or "merged"
    std::string numeric = "fast";           // or "verify"
    int threads = 0;
    bool dump_maps = false;

    void validate() const;
    // resolves the stage flags for a prompt with |S| bound tokens
    InferenceConfig resolved_inference(size_t bound_tokens) const;
};

RunConfig config_from_json(const nlohmann::ordered_json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::ordered_json config_to_json(const RunConfig& c);

// Output root: CSPLIT_OUT_ROOT env var when set, else the current directory.
// Relative output paths are resolved against it.
std::string resolve_output_path(const std::string& path);

}  // namespace csplit
