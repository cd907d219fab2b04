#include "conceptsplit/analysis.hpp"

#include <cmath>
#include <fstream>

namespace csplit {

std::vector<double> EntropySeries::values() const {
    std::vector<double> out;
    for (const auto& [t, v] : points) out.push_back(v);
    return out;
}

double attention_entropy(const Tensor& map2d) {
    if (map2d.ndim() != 2)
        throw ShapeError("attention_entropy: expected (h, w), got " +
                         shape_str(map2d.shape()));
    TapeSuspend off;
    Tensor p = row_softmax(map2d.reshaped_view({1, static_cast<int>(map2d.size())}));
    double h = 0.0;
    for (int64_t i = 0; i < p.size(); ++i) {
        const double v = p.at(i);
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

double entropy_delta(const std::vector<double>& series) {
    if (series.size() < 2)
        throw ContractError("entropy_delta: series of length " +
                            std::to_string(series.size()) + ", need >= 2");
    double total = 0.0;
    for (size_t i = 1; i < series.size(); ++i) total += series[i] - series[i - 1];
    return total / static_cast<double>(series.size() - 1);
}

double entropy_delta(const EntropySeries& series) {
    return entropy_delta(series.values());
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
    if (a.h != b.h || a.w != b.w)
        throw ContractError("mask_iou: mask shapes differ");
    int inter = 0, uni = 0;
    for (size_t i = 0; i < a.cells.size(); ++i) {
        const bool in_a = a.cells[i] != 0;
        const bool in_b = b.cells[i] != 0;
        inter += in_a && in_b;
        uni += in_a || in_b;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

std::vector<uint8_t> quantize(const Tensor& map2d) {
    double lo = map2d.at(0), hi = map2d.at(0);
    for (int64_t i = 0; i < map2d.size(); ++i) {
        lo = std::min(lo, map2d.at(i));
        hi = std::max(hi, map2d.at(i));
    }
    std::vector<uint8_t> bytes(static_cast<size_t>(map2d.size()));
    if (hi == lo) {
        std::fill(bytes.begin(), bytes.end(), static_cast<uint8_t>(128));
        return bytes;
    }
    for (int64_t i = 0; i < map2d.size(); ++i) {
        const double u = (map2d.at(i) - lo) / (hi - lo);
        bytes[static_cast<size_t>(i)] =
            static_cast<uint8_t>(std::lround(u * 255.0));
    }
    return bytes;
}

void write_pgm(const std::string& path, int w, int h,
               const std::vector<uint8_t>& bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << "P5\n" << w << " " << h << "\n255\n";
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write to '" + path + "' failed");
}

}  // namespace

void export_map(const Tensor& map2d, const std::string& path) {
    if (map2d.ndim() != 2)
        throw ShapeError("export_map: expected (h, w), got " +
                         shape_str(map2d.shape()));
    write_pgm(path, map2d.dim(1), map2d.dim(0), quantize(map2d));
}

void export_map_grid(const std::vector<Tensor>& maps, const std::string& path) {
    if (maps.empty()) throw ContractError("export_map_grid: no maps");
    const int h = maps[0].dim(0), w = maps[0].dim(1);
    for (const Tensor& m : maps)
        if (m.shape() != maps[0].shape())
            throw ContractError("export_map_grid: maps differ in shape");
    const int cols = static_cast<int>(maps.size());
    const int gw = cols * w + (cols - 1);
    std::vector<uint8_t> bytes(static_cast<size_t>(h) * gw, 255);
    for (int c = 0; c < cols; ++c) {
        const std::vector<uint8_t> q = quantize(maps[static_cast<size_t>(c)]);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                bytes[static_cast<size_t>(y) * gw + c * (w + 1) + x] =
                    q[static_cast<size_t>(y) * w + x];
    }
    write_pgm(path, gw, h, bytes);
}

Tensor export_mask(const BinaryMask& mask) {
    std::vector<double> v(mask.cells.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = mask.cells[i] ? 1.0 : 0.0;
    return Tensor::from_data({mask.h, mask.w}, std::move(v));
}

void export_ppm(const Tensor& image, const std::string& path) {
    if (image.ndim() != 3)
        throw ShapeError("export_ppm: expected (h, w, c), got " +
                         shape_str(image.shape()));
    const int h = image.dim(0), w = image.dim(1), c = image.dim(2);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << "P6\n" << w << " " << h << "\n255\n";
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                const double v =
                    ch < c ? image.at((static_cast<int64_t>(y) * w + x) * c + ch)
                           : 0.0;
                const double clamped = std::min(1.0, std::max(0.0, v));
                os.put(static_cast<char>(std::lround(clamped * 255.0)));
            }
    if (!os) throw IoError("write to '" + path + "' failed");
}

Tensor read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (magic != "P5" || maxval != 255)
        throw IoError(path + ": not an 8-bit P5 graymap");
    is.get();  // single whitespace after the header
    std::vector<uint8_t> bytes(static_cast<size_t>(w) * h);
    is.read(reinterpret_cast<char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!is) throw IoError(path + ": truncated pixel data");
    std::vector<double> v(bytes.size());
    for (size_t i = 0; i < bytes.size(); ++i) v[i] = bytes[i];
    return Tensor::from_data({h, w}, std::move(v));
}

}  // namespace csplit
