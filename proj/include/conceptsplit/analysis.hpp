#pragma once

#include <string>
#include <utility>
#include <vector>

#include "conceptsplit/loda.hpp"
#include "conceptsplit/tensor.hpp"

namespace csplit {

// Per-token entropy trajectory over recorded steps.
struct EntropySeries {
    std::string label;
    std::vector<std::pair<int, double>> points;  // (t, entropy in nats)

    std::vector<double> values() const;
};

// Shannon entropy (nats) of the softmax-normalized map; the raw attention
// values are treated as logits, so entropy lies in [0, ln(h*w)].
double attention_entropy(const Tensor& map2d);

// Mean of consecutive differences; needs at least two points.
double entropy_delta(const std::vector<double>& series);
double entropy_delta(const EntropySeries& series);

// Intersection over union of equal-shape binary masks; 0/0 is defined as 0.
double mask_iou(const BinaryMask& a, const BinaryMask& b);

// Min-max normalized 8-bit binary PGM (P5). A constant map exports as
// mid-gray. Writes are byte-reproducible for identical inputs.
void export_map(const Tensor& map2d, const std::string& path);
// Side-by-side grid of equally sized maps, one separator column between them.
void export_map_grid(const std::vector<Tensor>& maps, const std::string& path);
Tensor export_mask(const BinaryMask& mask);  // 0/1 mask as a (h, w) tensor

// Color preview of an (h, w, c) tensor with values in [0, 1]; the first
// three channels map to RGB (binary PPM P6).
void export_ppm(const Tensor& image, const std::string& path);

// Reads back a P5 file as a (h, w) tensor of byte values; test/analysis aid.
Tensor read_pgm(const std::string& path);

}  // namespace csplit
