#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "lsp/layers.hpp"
#include "lsp/tensor.hpp"

// Checkpoint container: magic "LSPC", u32 version, length-prefixed config
// text, u32 entry count, then per entry a length-prefixed name, u8 dtype
// (0 = f32), u8 ndim, u64 extents and the raw little-endian payload.
namespace lsp::ckpt {

inline constexpr char kMagic[4] = {'L', 'S', 'P', 'C'};
inline constexpr uint32_t kVersion = 1;
inline constexpr uint8_t kDtypeF32 = 0;

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw DataError("checkpoint truncated while reading " + what);
    return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
    put<uint32_t>(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, const std::string& what) {
    const uint32_t len = get<uint32_t>(is, what + " length");
    std::string s(len, '\0');
    if (len > 0 && !is.read(s.data(), len))
        throw DataError("checkpoint truncated while reading " + what);
    return s;
}

}  // namespace detail

struct Entry {
    std::string name;
    Tensor tensor;
};

/// Writes config text plus named f32 tensors in the given order.
inline void write_checkpoint(const std::string& path, const std::string& config_text,
                             const std::vector<Entry>& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    os.write(kMagic, 4);
    detail::put<uint32_t>(os, kVersion);
    detail::put_string(os, config_text);
    detail::put<uint32_t>(os, static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
        detail::put_string(os, e.name);
        detail::put<uint8_t>(os, kDtypeF32);
        detail::put<uint8_t>(os, static_cast<uint8_t>(e.tensor.ndim()));
        for (size_t a = 0; a < e.tensor.ndim(); ++a)
            detail::put<uint64_t>(os, static_cast<uint64_t>(e.tensor.extent(a)));
        os.write(reinterpret_cast<const char*>(e.tensor.data()),
                 static_cast<std::streamsize>(sizeof(float) * e.tensor.numel()));
    }
    if (!os) throw DataError("short write while saving checkpoint: " + path);
}

struct LoadedCheckpoint {
    std::string config_text;
    std::vector<Entry> entries;

    const Tensor* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e.tensor;
        return nullptr;
    }
};

inline LoadedCheckpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("bad checkpoint magic in " + path);
    const uint32_t version = detail::get<uint32_t>(is, "version");
    if (version != kVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
    LoadedCheckpoint out;
    out.config_text = detail::get_string(is, "config");
    const uint32_t count = detail::get<uint32_t>(is, "entry count");
    out.entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        Entry e;
        e.name = detail::get_string(is, "entry name");
        const uint8_t dtype = detail::get<uint8_t>(is, "dtype");
        if (dtype != kDtypeF32)
            throw DataError("unsupported dtype code " + std::to_string(dtype) + " for entry " +
                            e.name);
        const uint8_t ndim = detail::get<uint8_t>(is, "ndim");
        Shape shape(ndim);
        for (uint8_t a = 0; a < ndim; ++a)
            shape[a] = static_cast<int64_t>(detail::get<uint64_t>(is, "extent"));
        validate_shape(shape);
        std::vector<float> payload(static_cast<size_t>(numel_of(shape)));
        if (!is.read(reinterpret_cast<char*>(payload.data()),
                     static_cast<std::streamsize>(sizeof(float) * payload.size())))
            throw DataError("checkpoint truncated in payload of entry " + e.name);
        e.tensor = Tensor(shape, std::move(payload));
        out.entries.push_back(std::move(e));
    }
    return out;
}

}  // namespace lsp::ckpt
