#include "conceptsplit/dataset.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "conceptsplit/analysis.hpp"
#include "conceptsplit/container.hpp"
#include "conceptsplit/errors.hpp"

namespace csplit {

namespace {

struct NamedColor {
    const char* name;
    std::array<double, 4> rgba;
};

const NamedColor kBasePalette[] = {
    {"red", {0.90, 0.10, 0.10, 0.50}},    {"green", {0.10, 0.90, 0.10, 0.50}},
    {"blue", {0.10, 0.10, 0.90, 0.50}},   {"yellow", {0.90, 0.90, 0.10, 0.50}},
    {"purple", {0.60, 0.10, 0.80, 0.50}}, {"cyan", {0.10, 0.80, 0.80, 0.50}},
    {"orange", {0.90, 0.50, 0.10, 0.50}}, {"pink", {0.90, 0.40, 0.60, 0.50}},
};

// Off-palette signature colors for few-shot concepts; their channel means sit
// well outside the base palette's mean range so concept pixels are separable.
const std::array<double, 4> kConceptPalette[] = {
    {0.95, 0.90, 0.85, 0.92},
    {0.12, 0.06, 0.10, 0.04},
    {0.88, 0.82, 0.94, 0.78},
    {0.05, 0.16, 0.10, 0.02},
};

const char* kShapeNames[] = {"square", "circle", "triangle"};

bool covers(ShapeKind kind, int half, int dx, int dy) {
    switch (kind) {
        case ShapeKind::square: return std::abs(dx) <= half && std::abs(dy) <= half;
        case ShapeKind::circle: return dx * dx + dy * dy <= half * half;
        case ShapeKind::triangle:
            return dy >= -half && dy <= half && std::abs(dx) <= (dy + half) / 2;
    }
    return false;
}

void paint_background(std::vector<double>& px, const DatasetConfig& cfg, Rng& rng) {
    const int kind = static_cast<int>(rng.below(3));
    const double lo = 0.05 + 0.07 * static_cast<double>(rng.below(4));
    const double hi = lo + 0.12;
    for (int y = 0; y < cfg.h; ++y)
        for (int x = 0; x < cfg.w; ++x) {
            double v = lo;
            if (kind == 1 && cfg.w > 1)
                v = lo + (hi - lo) * static_cast<double>(x) / (cfg.w - 1);
            else if (kind == 2 && cfg.h > 1)
                v = lo + (hi - lo) * static_cast<double>(y) / (cfg.h - 1);
            for (int ch = 0; ch < cfg.c; ++ch)
                px[(static_cast<size_t>(y) * cfg.w + x) * cfg.c + ch] = v;
        }
}

void paint_object(std::vector<double>& px, const DatasetConfig& cfg,
                  const SceneObject& obj, const std::array<double, 4>& color,
                  int texture = -1) {
    for (int y = 0; y < cfg.h; ++y)
        for (int x = 0; x < cfg.w; ++x) {
            if (!covers(obj.kind, obj.half, x - obj.cx, y - obj.cy)) continue;
            bool accent = true;
            if (texture == 0) accent = (x + y) % 2 == 0;      // checker
            else if (texture == 1) accent = y % 2 == 0;       // stripes
            else if (texture == 2) accent = x % 2 == 0 && y % 2 == 0;  // dots
            for (int ch = 0; ch < cfg.c; ++ch) {
                const double v = color[static_cast<size_t>(ch)];
                px[(static_cast<size_t>(y) * cfg.w + x) * cfg.c + ch] =
                    accent ? v : 0.55 * v;
            }
        }
}

// Axis-aligned box with one cell of margin around the shape extent.
struct Box {
    int x0, x1, y0, y1;
    bool intersects(const Box& o) const {
        return x0 <= o.x1 && o.x0 <= x1 && y0 <= o.y1 && o.y0 <= y1;
    }
};

Box object_box(const SceneObject& o, int margin) {
    return {o.cx - o.half - margin, o.cx + o.half + margin,
            o.cy - o.half - margin, o.cy + o.half + margin};
}

}  // namespace

int base_color_count() { return static_cast<int>(std::size(kBasePalette)); }

const std::array<double, 4>& base_color(int id) {
    return kBasePalette[static_cast<size_t>(id)].rgba;
}

const std::string& base_color_name(int id) {
    static std::vector<std::string> names = [] {
        std::vector<std::string> v;
        for (const NamedColor& c : kBasePalette) v.emplace_back(c.name);
        return v;
    }();
    return names[static_cast<size_t>(id)];
}

const std::string& shape_name(ShapeKind k) {
    static std::vector<std::string> names = {kShapeNames[0], kShapeNames[1],
                                             kShapeNames[2]};
    return names[static_cast<size_t>(k)];
}

int concept_color_count() { return static_cast<int>(std::size(kConceptPalette)); }

const std::array<double, 4>& concept_color(int id) {
    return kConceptPalette[static_cast<size_t>(id)];
}

bool objects_overlap(const SceneObject& a, const SceneObject& b) {
    for (int dy = -a.half; dy <= a.half; ++dy)
        for (int dx = -a.half; dx <= a.half; ++dx) {
            if (!covers(a.kind, a.half, dx, dy)) continue;
            const int x = a.cx + dx, y = a.cy + dy;
            if (covers(b.kind, b.half, x - b.cx, y - b.cy)) return true;
        }
    return false;
}

Scene gen_scene(const DatasetConfig& cfg, uint64_t seed, int object_count) {
    if (object_count < 1 || object_count > 3)
        throw ContractError("gen_scene: object count must be in {1,2,3}, got " +
                            std::to_string(object_count));
    Rng rng(seed);
    Scene scene;
    std::vector<double> px(static_cast<size_t>(cfg.h) * cfg.w * cfg.c);
    paint_background(px, cfg, rng);

    std::vector<int> colors;
    while (static_cast<int>(colors.size()) < object_count) {
        const int c = static_cast<int>(rng.below(static_cast<uint64_t>(base_color_count())));
        bool dup = false;
        for (int used : colors) dup = dup || used == c;
        if (!dup) colors.push_back(c);
    }

    const int half_lo = object_count == 1 ? 3 : 2;
    const int half_hi = object_count >= 3 ? 2 : (object_count == 2 ? 3 : 4);
    const int margin = object_count >= 3 ? 0 : 1;  // boxes may touch when dense
    std::vector<ShapeKind> kinds;
    for (int i = 0; i < object_count; ++i)
        kinds.push_back(static_cast<ShapeKind>(rng.below(3)));

    bool all_placed = false;
    for (int scene_attempt = 0; scene_attempt < 100 && !all_placed; ++scene_attempt) {
        scene.objects.clear();
        all_placed = true;
        for (int i = 0; i < object_count && all_placed; ++i) {
            SceneObject obj;
            obj.kind = kinds[static_cast<size_t>(i)];
            obj.color_id = colors[static_cast<size_t>(i)];
            bool placed = false;
            for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
                obj.half = half_lo + static_cast<int>(rng.below(
                                         static_cast<uint64_t>(half_hi - half_lo + 1)));
                obj.cx = obj.half + static_cast<int>(rng.below(
                                        static_cast<uint64_t>(cfg.w - 2 * obj.half)));
                obj.cy = obj.half + static_cast<int>(rng.below(
                                        static_cast<uint64_t>(cfg.h - 2 * obj.half)));
                placed = true;
                for (const SceneObject& prev : scene.objects)
                    placed = placed &&
                             !object_box(obj, margin).intersects(object_box(prev, margin));
            }
            if (placed)
                scene.objects.push_back(obj);
            else
                all_placed = false;
        }
    }
    if (!all_placed)
        throw Error("gen_scene: canvas too small to place " +
                    std::to_string(object_count) + " objects (seed " +
                    std::to_string(seed) + ")");
    for (const SceneObject& obj : scene.objects)
        paint_object(px, cfg, obj, base_color(obj.color_id));

    for (size_t i = 0; i < scene.objects.size(); ++i) {
        if (i) scene.caption.push_back("and");
        scene.caption.push_back("a");
        scene.caption.push_back(base_color_name(scene.objects[i].color_id));
        scene.caption.push_back(shape_name(scene.objects[i].kind));
    }

    scene.canvas = Tensor::from_data({cfg.h, cfg.w, cfg.c}, std::move(px));
    return scene;
}

std::vector<Scene> gen_concept_set(const DatasetConfig& cfg, const ConceptSpec& spec,
                                   int count, uint64_t seed) {
    if (spec.color_id < 0 || spec.color_id >= concept_color_count())
        throw ContractError("gen_concept_set: concept color id " +
                            std::to_string(spec.color_id) + " out of range");
    std::vector<Scene> out;
    Rng parent(seed);
    for (int i = 0; i < count; ++i) {
        Rng rng = parent.fork(static_cast<uint64_t>(i));
        Scene scene;
        std::vector<double> px(static_cast<size_t>(cfg.h) * cfg.w * cfg.c);
        paint_background(px, cfg, rng);
        SceneObject obj;
        obj.kind = spec.kind;
        obj.color_id = -1;
        obj.half = 3 + static_cast<int>(rng.below(2));
        obj.cx = obj.half +
                 static_cast<int>(rng.below(static_cast<uint64_t>(cfg.w - 2 * obj.half)));
        obj.cy = obj.half +
                 static_cast<int>(rng.below(static_cast<uint64_t>(cfg.h - 2 * obj.half)));
        paint_object(px, cfg, obj, concept_color(spec.color_id), spec.texture);
        scene.objects.push_back(obj);
        scene.caption = {spec.bound_word};
        scene.canvas = Tensor::from_data({cfg.h, cfg.w, cfg.c}, std::move(px));
        out.push_back(std::move(scene));
    }
    return out;
}


void export_dataset(const std::string& dir,
                    const std::vector<std::pair<uint64_t, Scene>>& scenes) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
    nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
    for (size_t i = 0; i < scenes.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%03zu.bin", i);
        std::string caption;
        for (const std::string& w : scenes[i].second.caption) {
            if (!caption.empty()) caption += " ";
            caption += w;
        }
        write_container(dir + "/" + name,
                        {{"kind", "scene"},
                         {"seed", scenes[i].first},
                         {"caption", caption}},
                        {{"canvas", scenes[i].second.canvas}});
        char preview[32];
        std::snprintf(preview, sizeof(preview), "scene_%03zu.ppm", i);
        export_ppm(scenes[i].second.canvas, dir + "/" + preview);
        manifest.push_back(
            {{"seed", scenes[i].first}, {"caption", caption}, {"file", name}});
    }
    std::ofstream os(dir + "/manifest.json", std::ios::trunc);
    if (!os) throw IoError("cannot write '" + dir + "/manifest.json'");
    os << manifest.dump(2) << "\n";
}

}  // namespace csplit
