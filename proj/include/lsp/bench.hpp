#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "lsp/pipeline.hpp"
#include "lsp/probes.hpp"

// Probe inference latency measurement (warmup + timed runs over fresh seeded
// inputs, forward-only timing) and decode-saving accounting over pipeline
// results.
namespace lsp::bench {

struct LatencyStats {
    int64_t runs = 0;
    int64_t warmup = 0;
    double mean_s = 0.0;
    double std_s = 0.0;
    double min_s = 0.0;
    double max_s = 0.0;
    Shape input_shape;
    std::vector<double> samples_s;
};

/// Times eval-mode forward passes (input generation excluded from the timed
/// region). Each run uses a fresh seeded random input.
inline LatencyStats bench_probe(Probe<float>& model, const Shape& input_shape, int64_t runs = 100,
                                int64_t warmup = 10, uint64_t seed = 0) {
    if (runs < 1) throw ConfigError("benchmark needs at least one run");
    if (warmup < 0) throw ConfigError("warmup count must be >= 0");
    LatencyStats stats;
    stats.runs = runs;
    stats.warmup = warmup;
    stats.input_shape = input_shape;
    stats.samples_s.reserve(static_cast<size_t>(runs));
    for (int64_t r = 0; r < warmup + runs; ++r) {
        Tensor input = Tensor::normal(input_shape, 0.f, 1.f, rng::mix(seed, static_cast<uint64_t>(r)));
        Ctx<float> ctx;  // eval mode
        const auto t0 = std::chrono::steady_clock::now();
        Tensor probs = model.forward(ctx, input, /*apply_softmax=*/true);
        const double dt =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        (void)probs;
        if (r >= warmup) stats.samples_s.push_back(dt);
    }
    double sum = 0.0;
    stats.min_s = stats.samples_s.front();
    stats.max_s = stats.samples_s.front();
    for (double s : stats.samples_s) {
        sum += s;
        stats.min_s = std::min(stats.min_s, s);
        stats.max_s = std::max(stats.max_s, s);
    }
    stats.mean_s = sum / static_cast<double>(runs);
    double sq = 0.0;
    for (double s : stats.samples_s) sq += (s - stats.mean_s) * (s - stats.mean_s);
    stats.std_s = std::sqrt(sq / static_cast<double>(runs));
    return stats;
}

/// First "model name" line from /proc/cpuinfo, or a generic fallback.
inline std::string host_description() {
    std::ifstream is("/proc/cpuinfo");
    std::string line;
    while (std::getline(is, line)) {
        const auto pos = line.find("model name");
        if (pos != std::string::npos) {
            const auto colon = line.find(':');
            if (colon != std::string::npos && colon + 2 <= line.size())
                return line.substr(colon + 2);
        }
    }
    return "unknown host";
}

inline std::string render_latency_report(const std::string& label, const LatencyStats& s) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6);
    os << "probe latency: " << label << "\n"
       << "  host       " << host_description() << "\n"
       << "  input      " << shape_str(s.input_shape) << "\n"
       << "  runs       " << s.runs << " (+" << s.warmup << " warmup)\n"
       << "  mean_s     " << s.mean_s << "\n"
       << "  std_s      " << s.std_s << "\n"
       << "  min_s      " << s.min_s << "\n"
       << "  max_s      " << s.max_s << "\n";
    return os.str();
}

inline void write_latency_csv(const std::string& path, const std::string& label,
                              const LatencyStats& s) {
    const bool fresh = !std::ifstream(path).good();
    std::ofstream os(path, std::ios::app);
    if (!os) throw DataError("cannot write benchmark CSV " + path);
    if (fresh) os << "label,input,runs,warmup,mean_s,std_s,min_s,max_s\n";
    os << label << ',' << shape_str(s.input_shape) << ',' << s.runs << ',' << s.warmup << ','
       << std::setprecision(9) << s.mean_s << ',' << s.std_s << ',' << s.min_s << ',' << s.max_s
       << "\n";
}

struct DecodeSavingReport {
    int64_t runs = 0;
    int64_t aborted = 0;
    double decode_ms_saved = 0.0;
    double fraction_aborted = 0.0;
};

/// Totals the simulated decode cost avoided by early aborts.
inline DecodeSavingReport decode_saving_report(const std::vector<pipeline::PipelineResult>& results,
                                               double decode_cost_ms) {
    if (results.empty()) throw DataError("decode saving report needs at least one pipeline result");
    DecodeSavingReport rep;
    rep.runs = static_cast<int64_t>(results.size());
    for (const auto& r : results) {
        if (!r.decode_performed) {
            ++rep.aborted;
            rep.decode_ms_saved += decode_cost_ms;
        }
    }
    rep.fraction_aborted =
        static_cast<double>(rep.aborted) / static_cast<double>(rep.runs);
    return rep;
}

inline std::string render_decode_saving(const DecodeSavingReport& r) {
    std::ostringstream os;
    os << "decode-saving report\n"
       << "  pipeline runs    " << r.runs << "\n"
       << "  aborted decodes  " << r.aborted << "\n"
       << "  ms saved         " << r.decode_ms_saved << "\n"
       << "  fraction aborted " << r.fraction_aborted << "\n";
    return os.str();
}

}  // namespace lsp::bench
