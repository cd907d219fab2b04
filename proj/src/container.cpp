#include "conceptsplit/container.hpp"

#include <cstring>
#include <fstream>

namespace csplit {

namespace {

constexpr char kMagic[8] = {'C', 'S', 'P', 'L', 'I', 'T', '\n', '\0'};

// The on-disk layout is little-endian; this code targets LE hosts and writes
// values directly.
template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError(path + ": truncated file");
    return v;
}

void put_string(std::ostream& os, const std::string& s) {
    put<uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is, const std::string& path) {
    const uint64_t n = get<uint64_t>(is, path);
    if (n > (1ull << 32)) throw IoError(path + ": corrupt string length");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw IoError(path + ": truncated file");
    return s;
}

enum : uint8_t { kF64 = 0, kF32 = 1 };

}  // namespace

const Tensor& Container::find(const std::string& name) const {
    for (const NamedTensor& a : arrays)
        if (a.name == name) return a.value;
    throw IoError("container has no array named '" + name + "'");
}

bool Container::contains(const std::string& name) const {
    for (const NamedTensor& a : arrays)
        if (a.name == name) return true;
    return false;
}

void write_container(const std::string& path, const nlohmann::ordered_json& config,
                     const std::vector<NamedTensor>& arrays) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.write(kMagic, sizeof(kMagic));
    put<uint32_t>(os, kContainerVersion);
    put_string(os, config.dump());
    put<uint64_t>(os, arrays.size());
    const uint8_t dtype = numeric_mode() == NumericMode::fast ? kF32 : kF64;
    for (const NamedTensor& a : arrays) {
        put_string(os, a.name);
        put<uint8_t>(os, dtype);
        put<uint8_t>(os, static_cast<uint8_t>(a.value.ndim()));
        for (int d : a.value.shape()) put<uint64_t>(os, static_cast<uint64_t>(d));
        if (dtype == kF64) {
            os.write(reinterpret_cast<const char*>(a.value.data()),
                     static_cast<std::streamsize>(sizeof(double) * a.value.size()));
        } else {
            std::vector<float> buf(static_cast<size_t>(a.value.size()));
            for (int64_t i = 0; i < a.value.size(); ++i)
                buf[static_cast<size_t>(i)] = static_cast<float>(a.value.at(i));
            os.write(reinterpret_cast<const char*>(buf.data()),
                     static_cast<std::streamsize>(sizeof(float) * buf.size()));
        }
    }
    if (!os) throw IoError("write to '" + path + "' failed");
}

Container read_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError(path + ": not a conceptsplit container (bad magic)");
    const uint32_t version = get<uint32_t>(is, path);
    if (version > kContainerVersion)
        throw IoError(path + ": format version " + std::to_string(version) +
                      " is newer than supported version " +
                      std::to_string(kContainerVersion));
    Container c;
    const std::string cfg = get_string(is, path);
    try {
        c.config = nlohmann::ordered_json::parse(cfg);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": corrupt config block: " + e.what());
    }
    const uint64_t count = get<uint64_t>(is, path);
    for (uint64_t i = 0; i < count; ++i) {
        NamedTensor nt;
        nt.name = get_string(is, path);
        const uint8_t dtype = get<uint8_t>(is, path);
        const uint8_t ndim = get<uint8_t>(is, path);
        Shape shape;
        int64_t total = 1;
        for (int d = 0; d < ndim; ++d) {
            const uint64_t dim = get<uint64_t>(is, path);
            shape.push_back(static_cast<int>(dim));
            total *= static_cast<int64_t>(dim);
        }
        std::vector<double> data(static_cast<size_t>(total));
        if (dtype == kF64) {
            is.read(reinterpret_cast<char*>(data.data()),
                    static_cast<std::streamsize>(sizeof(double) * data.size()));
        } else if (dtype == kF32) {
            std::vector<float> buf(static_cast<size_t>(total));
            is.read(reinterpret_cast<char*>(buf.data()),
                    static_cast<std::streamsize>(sizeof(float) * buf.size()));
            for (size_t j = 0; j < buf.size(); ++j)
                data[j] = static_cast<double>(buf[j]);
        } else {
            throw IoError(path + ": unknown dtype tag " + std::to_string(dtype));
        }
        if (!is) throw IoError(path + ": truncated array '" + nt.name + "'");
        nt.value = Tensor::from_data(shape, std::move(data));
        c.arrays.push_back(std::move(nt));
    }
    return c;
}

}  // namespace csplit
