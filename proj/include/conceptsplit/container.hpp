#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "conceptsplit/tensor.hpp"

namespace csplit {

// Versioned binary tensor container used for model checkpoints and adapter
// databases: magic string, format version, a JSON config block, then named
// raw little-endian float arrays with shape headers. Arrays are written as
// f64 in verify mode and f32 in fast mode; fast-mode values are always
// float32-exact, so a same-mode save/load round-trip is bitwise lossless.
struct NamedTensor {
    std::string name;
    Tensor value;
};

struct Container {
    nlohmann::ordered_json config;
    std::vector<NamedTensor> arrays;

    const Tensor& find(const std::string& name) const;
    bool contains(const std::string& name) const;
};

inline constexpr uint32_t kContainerVersion = 1;

void write_container(const std::string& path, const nlohmann::ordered_json& config,
                     const std::vector<NamedTensor>& arrays);
Container read_container(const std::string& path);

}  // namespace csplit
