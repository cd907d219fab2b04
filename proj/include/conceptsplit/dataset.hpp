#pragma once

#include <array>
#include <string>
#include <vector>

#include "conceptsplit/rng.hpp"
#include "conceptsplit/tensor.hpp"

namespace csplit {

// Synthetic scenes of colored shapes rendered directly at latent resolution.
// All randomness comes from the pinned SplitMix64 stream and all placement is
// integer arithmetic, so generation is bit-reproducible across platforms.

enum class ShapeKind { square = 0, circle = 1, triangle = 2 };

struct SceneObject {
    ShapeKind kind;
    int color_id;  // base palette index
    int cx, cy;    // center cell
    int half;      // half extent in cells
};

struct Scene {
    Tensor canvas;                     // (H, W, C), values in [0, 1]
    std::vector<std::string> caption;  // vocabulary words
    std::vector<SceneObject> objects;
};

struct DatasetConfig {
    int h = 16;
    int w = 16;
    int c = 4;
};

int base_color_count();
const std::array<double, 4>& base_color(int id);
const std::string& base_color_name(int id);
const std::string& shape_name(ShapeKind k);

// Deterministic scene with `object_count` in {1,2,3} non-overlapping shapes
// and caption "a {color} {shape} and a {color} {shape} ...".
Scene gen_scene(const DatasetConfig& cfg, uint64_t seed, int object_count);

// Few-shot concept sets. A concept is a textured object with an off-palette
// color signature, placed on varied backgrounds.
struct ConceptSpec {
    std::string name;        // database entry name
    std::string bound_word;  // placeholder word in the vocabulary
    int color_id = 0;        // concept palette index
    int texture = 0;         // 0 checker, 1 stripes, 2 dots
    ShapeKind kind = ShapeKind::square;
};

int concept_color_count();
const std::array<double, 4>& concept_color(int id);

std::vector<Scene> gen_concept_set(const DatasetConfig& cfg, const ConceptSpec& spec,
                                   int count, uint64_t seed);

// True when the shapes of two scene objects occupy a common cell.
bool objects_overlap(const SceneObject& a, const SceneObject& b);

// Writes scenes to <dir>/scene_NNN.bin (container holding the float canvas)
// with PPM previews and a manifest.json of {seed, caption, file} records.
void export_dataset(const std::string& dir,
                    const std::vector<std::pair<uint64_t, Scene>>& scenes);

}  // namespace csplit
