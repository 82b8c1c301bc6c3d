#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace lsp {

// Extent list of a dense tensor, at most 5 axes.
using Shape = std::vector<int64_t>;

inline constexpr int kMaxAxes = 5;

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// Malformed or corrupt on-disk data (bad magic, truncation, checksum mismatch).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error("data error: " + msg) {}
};

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error("usage error: " + msg) {}
};

inline int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

inline void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("empty shape");
    if (shape.size() > kMaxAxes)
        throw ShapeError("too many axes (" + std::to_string(shape.size()) + ")");
    for (int64_t e : shape)
        if (e < 1) throw ShapeError("non-positive extent " + std::to_string(e));
}

inline std::string shape_str(const Shape& shape) {
    std::string s;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace lsp
