#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lsp/rng.hpp"
#include "lsp/tensor.hpp"
#include "lsp/training.hpp"

// On-disk archive of labeled latent clips: one CRC-guarded tensor file per
// clip ("LSPA" format) plus a tab-separated manifest, both updated with a
// write-new-then-rename discipline. Includes the deterministic synthetic
// generator that stands in for the private video corpus.
namespace lsp::store {

inline constexpr char kTensorMagic[4] = {'L', 'S', 'P', 'A'};
inline constexpr uint32_t kTensorVersion = 1;
inline constexpr uint8_t kDtypeF32 = 0;

/// T' = floor(clip_seconds * fps / 4), the temporal extent of a latent for a
/// clip at the given frame rate under 4x temporal compression.
inline int64_t latent_temporal_len(double fps, double clip_seconds = 10.0) {
    if (fps < 1.0) throw ConfigError("fps must be >= 1");
    return static_cast<int64_t>(std::floor(clip_seconds * fps / 4.0));
}

inline uint32_t payload_crc(const float* data, int64_t count) {
    uLong crc = crc32(0L, Z_NULL, 0);
    const auto* bytes = reinterpret_cast<const Bytef*>(data);
    int64_t remaining = count * static_cast<int64_t>(sizeof(float));
    while (remaining > 0) {
        const uInt chunk = static_cast<uInt>(std::min<int64_t>(remaining, 1 << 30));
        crc = crc32(crc, bytes, chunk);
        bytes += chunk;
        remaining -= chunk;
    }
    return static_cast<uint32_t>(crc);
}

// ---------------------------------------------------------------------------
// tensor files

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw DataError("latent file truncated while reading " + what);
    return v;
}

}  // namespace detail

/// Serializes one f32 tensor into the LSPA byte layout (shared by files and
/// the service's inline payloads).
inline std::string encode_tensor(const Tensor& t) {
    std::ostringstream os(std::ios::binary);
    os.write(kTensorMagic, 4);
    detail::put<uint32_t>(os, kTensorVersion);
    detail::put<uint8_t>(os, kDtypeF32);
    detail::put<uint8_t>(os, static_cast<uint8_t>(t.ndim()));
    for (size_t a = 0; a < t.ndim(); ++a)
        detail::put<uint64_t>(os, static_cast<uint64_t>(t.extent(a)));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(sizeof(float) * t.numel()));
    detail::put<uint32_t>(os, payload_crc(t.data(), t.numel()));
    return std::move(os).str();
}

inline Tensor decode_tensor(std::istream& is, const std::string& origin) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0)
        throw DataError("bad latent magic in " + origin);
    const uint32_t version = detail::get<uint32_t>(is, "version");
    if (version != kTensorVersion)
        throw DataError("unsupported latent version " + std::to_string(version) + " in " + origin);
    const uint8_t dtype = detail::get<uint8_t>(is, "dtype");
    if (dtype != kDtypeF32)
        throw DataError("unsupported latent dtype code " + std::to_string(dtype) + " in " + origin);
    const uint8_t ndim = detail::get<uint8_t>(is, "ndim");
    Shape shape(ndim);
    for (uint8_t a = 0; a < ndim; ++a)
        shape[a] = static_cast<int64_t>(detail::get<uint64_t>(is, "extent"));
    validate_shape(shape);
    std::vector<float> payload(static_cast<size_t>(numel_of(shape)));
    if (!is.read(reinterpret_cast<char*>(payload.data()),
                 static_cast<std::streamsize>(sizeof(float) * payload.size())))
        throw DataError("latent payload truncated in " + origin);
    const uint32_t stored = detail::get<uint32_t>(is, "checksum");
    Tensor t(shape, std::move(payload));
    const uint32_t actual = payload_crc(t.data(), t.numel());
    if (stored != actual)
        throw DataError("latent checksum mismatch in " + origin + " (stored " +
                        std::to_string(stored) + ", computed " + std::to_string(actual) + ")");
    return t;
}

inline Tensor decode_tensor(const std::string& bytes, const std::string& origin) {
    std::istringstream is(bytes, std::ios::binary);
    return decode_tensor(is, origin);
}

// ---------------------------------------------------------------------------
// manifest

struct ClipRecord {
    std::string clip_id;
    std::string split;      // train | validation | test
    std::string label;      // violating | non_violating
    std::string source_id;
    double fps = 0.0;
    Shape dims;
    uint32_t checksum = 0;
    std::string file;
};

inline int label_index(const std::string& label) {
    if (label == "non_violating") return 0;
    if (label == "violating") return 1;
    throw DataError("unknown label '" + label + "'");
}

inline void check_split_name(const std::string& split) {
    if (split != "train" && split != "validation" && split != "test")
        throw DataError("unknown split '" + split + "'");
}

struct Manifest {
    std::vector<ClipRecord> clips;

    const ClipRecord* find(const std::string& clip_id) const {
        for (const auto& c : clips)
            if (c.clip_id == clip_id) return &c;
        return nullptr;
    }

    std::map<std::pair<std::string, std::string>, int64_t> counts() const {
        std::map<std::pair<std::string, std::string>, int64_t> out;
        for (const auto& c : clips) ++out[{c.split, c.label}];
        return out;
    }

    std::vector<const ClipRecord*> split_clips(const std::string& split) const {
        std::vector<const ClipRecord*> out;
        for (const auto& c : clips)
            if (c.split == split) out.push_back(&c);
        return out;
    }
};

inline std::string dims_str(const Shape& s) { return shape_str(s); }

inline Shape parse_dims(const std::string& s) {
    Shape shape;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, 'x')) shape.push_back(std::stoll(part));
    validate_shape(shape);
    return shape;
}

inline void check_field(const std::string& v, const std::string& what) {
    if (v.empty() || v.find('\t') != std::string::npos || v.find('\n') != std::string::npos)
        throw DataError(what + " must be non-empty and free of tabs/newlines: '" + v + "'");
}

class Archive {
   public:
    explicit Archive(std::string root) : root_(std::move(root)) {
        std::filesystem::create_directories(root_);
    }

    const std::string& root() const { return root_; }
    std::string manifest_path() const {
        return (std::filesystem::path(root_) / "manifest.tsv").string();
    }

    bool has_manifest() const { return std::filesystem::exists(manifest_path()); }

    Manifest load_manifest() const {
        std::ifstream is(manifest_path());
        if (!is) throw DataError("cannot open manifest " + manifest_path());
        Manifest m;
        std::string line;
        size_t line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            if (line.empty() || line[0] == '#') continue;
            std::vector<std::string> fields;
            std::stringstream ss(line);
            std::string f;
            while (std::getline(ss, f, '\t')) fields.push_back(f);
            if (fields.size() != 8)
                throw DataError("manifest line " + std::to_string(line_no) + " has " +
                                std::to_string(fields.size()) + " fields, expected 8");
            ClipRecord r;
            r.clip_id = fields[0];
            r.split = fields[1];
            r.label = fields[2];
            r.source_id = fields[3];
            r.fps = std::stod(fields[4]);
            r.dims = parse_dims(fields[5]);
            r.checksum = static_cast<uint32_t>(std::stoul(fields[6], nullptr, 16));
            r.file = fields[7];
            check_split_name(r.split);
            label_index(r.label);
            m.clips.push_back(std::move(r));
        }
        return m;
    }

    /// Atomic replace: write a temp file, then rename over the manifest.
    void save_manifest(const Manifest& m) const {
        const std::string tmp = manifest_path() + ".tmp";
        {
            std::ofstream os(tmp, std::ios::trunc);
            if (!os) throw DataError("cannot write " + tmp);
            os << "# clip_id\tsplit\tlabel\tsource_id\tfps\tdims\tchecksum\tfile\n";
            for (const auto& c : m.clips) {
                char fps_buf[32];
                std::snprintf(fps_buf, sizeof fps_buf, "%.6g", c.fps);
                char crc_buf[16];
                std::snprintf(crc_buf, sizeof crc_buf, "%08x", c.checksum);
                os << c.clip_id << '\t' << c.split << '\t' << c.label << '\t' << c.source_id
                   << '\t' << fps_buf << '\t' << dims_str(c.dims) << '\t' << crc_buf << '\t'
                   << c.file << '\n';
            }
            if (!os) throw DataError("short write on " + tmp);
        }
        std::filesystem::rename(tmp, manifest_path());
    }

    /// Writes one clip tensor and appends its record; clip ids are unique.
    ClipRecord write_latent(Manifest& m, const std::string& clip_id, const std::string& split,
                            const std::string& label, const std::string& source_id, double fps,
                            const Tensor& tensor) const {
        check_field(clip_id, "clip_id");
        check_field(source_id, "source_id");
        check_split_name(split);
        label_index(label);
        if (m.find(clip_id)) throw DataError("duplicate clip id '" + clip_id + "'");
        ClipRecord r;
        r.clip_id = clip_id;
        r.split = split;
        r.label = label;
        r.source_id = source_id;
        r.fps = fps;
        r.dims = tensor.shape();
        r.checksum = payload_crc(tensor.data(), tensor.numel());
        r.file = clip_id + ".lspa";
        const std::string final_path = (std::filesystem::path(root_) / r.file).string();
        const std::string tmp_path = final_path + ".tmp";
        {
            std::ofstream os(tmp_path, std::ios::binary | std::ios::trunc);
            if (!os) throw DataError("cannot write " + tmp_path);
            const std::string bytes = encode_tensor(tensor);
            os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
            if (!os) throw DataError("short write on " + tmp_path);
        }
        std::filesystem::rename(tmp_path, final_path);
        m.clips.push_back(r);
        save_manifest(m);
        return r;
    }

    Tensor read_latent(const Manifest& m, const std::string& clip_id) const {
        const ClipRecord* r = m.find(clip_id);
        if (!r) throw DataError("unknown clip id '" + clip_id + "'");
        return read_record(*r);
    }

    Tensor read_record(const ClipRecord& r) const {
        const std::string path = (std::filesystem::path(root_) / r.file).string();
        std::ifstream is(path, std::ios::binary);
        if (!is) throw DataError("cannot open latent file " + path);
        Tensor t = decode_tensor(is, path);
        if (!same_shape(t.shape(), r.dims))
            throw DataError("latent " + r.clip_id + " has dims " + shape_str(t.shape()) +
                            ", manifest says " + shape_str(r.dims));
        return t;
    }

   private:
    std::string root_;
};

// ---------------------------------------------------------------------------
// split assignment

/// Assigns each source to one split, greedily filling the largest remaining
/// clip-count deficit in shuffled source order. All clips of a source land in
/// the same split; needs at least 3 sources.
inline std::map<std::string, std::string> assign_splits(
    const std::vector<std::pair<std::string, int64_t>>& source_sizes,
    std::array<double, 3> ratios, uint64_t seed) {
    if (source_sizes.size() < 3)
        throw DataError("stratified split needs at least 3 sources, got " +
                        std::to_string(source_sizes.size()));
    double ratio_sum = ratios[0] + ratios[1] + ratios[2];
    if (ratio_sum <= 0) throw ConfigError("split ratios must sum to a positive value");
    std::array<double, 3> frac{ratios[0] / ratio_sum, ratios[1] / ratio_sum,
                               ratios[2] / ratio_sum};
    std::vector<std::pair<std::string, int64_t>> order = source_sizes;
    std::sort(order.begin(), order.end());
    std::vector<int64_t> idx(order.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
    train::deterministic_shuffle(idx, seed);
    static const char* kSplits[3] = {"train", "validation", "test"};
    std::array<int64_t, 3> assigned{0, 0, 0};
    int64_t total = 0;
    std::map<std::string, std::string> out;
    for (int64_t i : idx) {
        const auto& [src, size] = order[static_cast<size_t>(i)];
        total += size;
        int best = 0;
        double best_deficit = -1e300;
        for (int s = 0; s < 3; ++s) {
            const double deficit =
                frac[static_cast<size_t>(s)] * static_cast<double>(total) -
                static_cast<double>(assigned[static_cast<size_t>(s)]);
            if (deficit > best_deficit + 1e-12) {
                best_deficit = deficit;
                best = s;
            }
        }
        assigned[static_cast<size_t>(best)] += size;
        out[src] = kSplits[best];
    }
    return out;
}

/// Rewrites the split field of every record according to a fresh source-level
/// assignment.
inline void build_manifest(Manifest& m, std::array<double, 3> ratios, uint64_t seed) {
    std::map<std::string, int64_t> sizes;
    for (const auto& c : m.clips) ++sizes[c.source_id];
    std::vector<std::pair<std::string, int64_t>> source_sizes(sizes.begin(), sizes.end());
    auto assignment = assign_splits(source_sizes, ratios, seed);
    for (auto& c : m.clips) c.split = assignment.at(c.source_id);
}

// ---------------------------------------------------------------------------
// synthetic data

enum class SignalKind { kChannelMeanShift, kTemporalSinusoid, kSpatialBlob };

inline std::string signal_kind_name(SignalKind k) {
    switch (k) {
        case SignalKind::kChannelMeanShift: return "channel-mean-shift";
        case SignalKind::kTemporalSinusoid: return "temporal-sinusoid";
        case SignalKind::kSpatialBlob: return "spatial-blob";
    }
    throw ConfigError("unknown signal kind");
}

inline SignalKind parse_signal_kind(const std::string& s) {
    if (s == "channel-mean-shift") return SignalKind::kChannelMeanShift;
    if (s == "temporal-sinusoid") return SignalKind::kTemporalSinusoid;
    if (s == "spatial-blob") return SignalKind::kSpatialBlob;
    throw ConfigError("unknown signal kind '" + s + "'");
}

struct SyntheticSpec {
    int64_t train_per_class = 100;
    int64_t validation_per_class = 25;
    int64_t test_per_class = 25;
    int64_t temporal_len = 13;   // latent frames; 13 ~ a 10 s clip at 5.2 fps
    int64_t height = 60;
    int64_t width = 90;
    int64_t channels = 16;
    SignalKind signal = SignalKind::kChannelMeanShift;
    int64_t signal_channels = 4;  // leading channels carrying the class signal
    double amplitude = 3.0;
    double noise_sigma = 1.0;
    uint64_t seed = 0;
    int64_t clips_per_source = 4;

    void validate() const {
        if (amplitude < 0) throw ConfigError("signal amplitude must be >= 0");
        if (noise_sigma < 0) throw ConfigError("noise sigma must be >= 0");
        if (train_per_class < 1 || validation_per_class < 1 || test_per_class < 1)
            throw ConfigError("each (split, class) needs at least one clip");
        if (temporal_len < 4) throw ConfigError("temporal length must be >= 4");
        if (signal_channels < 1 || signal_channels > channels)
            throw ConfigError("signal channel count out of range");
        if (clips_per_source < 1) throw ConfigError("clips per source must be >= 1");
    }
};

/// Additive class signal at (c, t, h, w); zero for the non-violating class.
inline double signal_value(const SyntheticSpec& spec, int64_t c, int64_t t, int64_t h, int64_t w) {
    if (c >= spec.signal_channels) return 0.0;
    switch (spec.signal) {
        case SignalKind::kChannelMeanShift:
            return spec.amplitude;
        case SignalKind::kTemporalSinusoid:
            return spec.amplitude *
                   std::sin(2.0 * 3.14159265358979323846 * static_cast<double>(t) /
                            static_cast<double>(spec.temporal_len));
        case SignalKind::kSpatialBlob: {
            const double dh = static_cast<double>(h) - static_cast<double>(spec.height) / 2.0;
            const double dw = static_cast<double>(w) - static_cast<double>(spec.width) / 2.0;
            const double s = static_cast<double>(spec.height) / 8.0;
            return spec.amplitude * std::exp(-(dh * dh + dw * dw) / (2.0 * s * s));
        }
    }
    return 0.0;
}

/// One clip tensor, fully determined by (spec, clip_index, violating).
inline Tensor synthesize_clip(const SyntheticSpec& spec, uint64_t clip_index, bool violating) {
    const Shape shape{spec.channels, spec.temporal_len, spec.height, spec.width};
    Tensor t = Tensor::zeros(shape);
    const uint64_t clip_seed = rng::mix(spec.seed, 0x51f7u ^ clip_index);
    float* p = t.data();
    const int64_t n = t.numel();
    const int64_t thw = spec.temporal_len * spec.height * spec.width;
    const int64_t hw = spec.height * spec.width;
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        double v = spec.noise_sigma * rng::normal01(clip_seed, static_cast<uint64_t>(i));
        if (violating) {
            const int64_t c = i / thw;
            const int64_t t_ = (i / hw) % spec.temporal_len;
            const int64_t h = (i / spec.width) % spec.height;
            const int64_t w = i % spec.width;
            v += signal_value(spec, c, t_, h, w);
        }
        p[i] = static_cast<float>(v);
    }
    return t;
}

/// Fills an archive with deterministic synthetic clips: exact per-(split,
/// class) counts, sources grouped so that no source spans two splits.
inline Manifest generate_synthetic_dataset(const SyntheticSpec& spec, const Archive& archive) {
    spec.validate();
    Manifest m;
    const double fps = 4.0 * static_cast<double>(spec.temporal_len) / 10.0;
    uint64_t clip_index = 0;
    const std::pair<const char*, int64_t> splits[] = {{"train", spec.train_per_class},
                                                      {"validation", spec.validation_per_class},
                                                      {"test", spec.test_per_class}};
    for (const auto& [split, per_class] : splits) {
        for (const char* label : {"non_violating", "violating"}) {
            const bool violating = std::string(label) == "violating";
            for (int64_t i = 0; i < per_class; ++i) {
                char id_buf[64];
                std::snprintf(id_buf, sizeof id_buf, "clip_%05llu",
                              static_cast<unsigned long long>(clip_index));
                char src_buf[96];
                std::snprintf(src_buf, sizeof src_buf, "src_%s_%s_%03lld", split, label,
                              static_cast<long long>(i / spec.clips_per_source));
                Tensor tensor = synthesize_clip(spec, clip_index, violating);
                archive.write_latent(m, id_buf, split, label, src_buf, fps, tensor);
                ++clip_index;
            }
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// training streams

/// Lazily reading dataset views over an archive (clips are fetched and
/// CRC-checked per batch; ordering matches the manifest).
inline train::DatasetStreams make_streams(const Archive& archive, const Manifest& manifest) {
    train::DatasetStreams out;
    struct SplitBinding {
        const char* name;
        train::SplitStream* stream;
    };
    const SplitBinding bindings[] = {{"train", &out.train},
                                     {"validation", &out.validation},
                                     {"test", &out.test}};
    for (const auto& b : bindings) {
        auto records = std::make_shared<std::vector<ClipRecord>>();
        for (const auto& c : manifest.clips)
            if (c.split == b.name) records->push_back(c);
        b.stream->count = static_cast<int64_t>(records->size());
        Archive arch = archive;
        b.stream->fetch = [arch, records](int64_t idx) {
            const ClipRecord& r = records->at(static_cast<size_t>(idx));
            return train::Example{arch.read_record(r), label_index(r.label)};
        };
    }
    return out;
}

}  // namespace lsp::store
