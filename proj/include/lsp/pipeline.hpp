#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lsp/latent_store.hpp"
#include "lsp/probes.hpp"

// Three-stage generation pipeline abstraction with the probe attached at the
// diffusion/decode boundary. Stages 1 and 2 are deterministic stubs (seeded
// noise, archive replay or a fixed tensor); the decode stage is a simulated
// cost that only runs when the guard permits. The probe reads the denoised
// latent without modifying it and emits a safety score s in [0,1]; s > tau
// (strictly) marks the clip violating.
namespace lsp::pipeline {

enum class Modality { kT2V, kI2V, kV2V };

inline std::string modality_name(Modality m) {
    switch (m) {
        case Modality::kT2V: return "t2v";
        case Modality::kI2V: return "i2v";
        case Modality::kV2V: return "v2v";
    }
    throw ConfigError("unknown modality");
}

inline Modality parse_modality(const std::string& s) {
    if (s == "t2v") return Modality::kT2V;
    if (s == "i2v") return Modality::kI2V;
    if (s == "v2v") return Modality::kV2V;
    throw ConfigError("unknown modality '" + s + "' (expected t2v, i2v or v2v)");
}

struct GenerationRequest {
    std::string request_id;
    Modality modality = Modality::kT2V;
    std::string prompt;     // opaque
    std::string media_ref;  // opaque; image/video conditioning reference
    double target_fps = 5.2;
    uint64_t seed = 0;
};

/// Where the diffusion stub gets its denoised latent from.
enum class LatentSource { kSeededNoise, kArchiveReplay, kFixed };

struct StageStubs {
    LatentSource source = LatentSource::kSeededNoise;
    Shape latent_shape{16, 13, 60, 90};  // C x T x H x W

    // Archive replay
    const store::Archive* archive = nullptr;
    const store::Manifest* manifest = nullptr;
    std::string clip_id;

    // Fixed latent (tests, replays)
    Tensor fixed_latent;

    double decode_cost_ms = 3000.0;  // simulated decode cost, recorded not slept
};

enum class GuardAction { kSuppress, kFlagForReview };

inline std::string guard_action_name(GuardAction a) {
    return a == GuardAction::kSuppress ? "suppress" : "flag-for-review";
}

inline GuardAction parse_guard_action(const std::string& s) {
    if (s == "suppress") return GuardAction::kSuppress;
    if (s == "flag-for-review") return GuardAction::kFlagForReview;
    throw ConfigError("unknown guard action '" + s + "'");
}

struct GuardConfig {
    double tau = 0.5;
    GuardAction action = GuardAction::kSuppress;
    std::string checkpoint_ref;  // informational: which model produced scores
    bool fail_closed = true;     // on probe error: suppress (true) or deliver unscored (false)
    std::string review_queue_path;

    void validate() const {
        if (tau < 0.0 || tau > 1.0)
            throw ConfigError("threshold tau must be in [0,1], got " + std::to_string(tau));
    }
};

enum class Decision { kPass, kViolating };

inline std::string decision_name(Decision d) {
    return d == Decision::kPass ? "pass" : "violating";
}

/// Strict threshold rule: violating iff s > tau. Scores outside [0,1] break
/// the probe contract and are an internal error.
inline Decision guard_decision(double s, const GuardConfig& config) {
    config.validate();
    if (!(s >= 0.0 && s <= 1.0))
        throw std::runtime_error("internal error: safety score " + std::to_string(s) +
                                 " outside [0,1]");
    return s > config.tau ? Decision::kViolating : Decision::kPass;
}

/// Side-channel scoring: forwards the latent (read-only) through the probe in
/// eval mode and returns the probability of the violating class.
inline double probe_hook(const Tensor& latent, Probe<float>& probe) {
    if (latent.ndim() != 4)
        throw ShapeError("probe hook expects a C x T x H x W latent, got " +
                         shape_str(latent.shape()));
    Shape batched{1};
    for (size_t a = 0; a < 4; ++a) batched.push_back(latent.extent(a));
    Ctx<float> ctx;  // eval, no tape
    Tensor probs = probe.forward(ctx, latent.reshaped(batched), /*apply_softmax=*/true);
    return static_cast<double>(probs.at(1));
}

struct PipelineResult {
    std::string request_id;
    Modality modality = Modality::kT2V;
    std::optional<double> score;  // absent when scoring failed
    Decision decision = Decision::kPass;
    bool decode_performed = false;
    bool scoring_failed = false;
    double stage1_ms = 0.0;
    double stage2_ms = 0.0;
    double probe_ms = 0.0;
    double decode_ms = 0.0;      // simulated cost charged when decode ran
    std::string output_ref;      // empty when suppressed
    std::string error;           // scoring failure detail
};

namespace detail {

inline double ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
}

inline std::string timestamp_utc() {
    const std::time_t now = std::time(nullptr);
    char buf[32];
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

}  // namespace detail

inline void append_review_queue(const std::string& path, const std::string& request_id,
                                double score) {
    if (path.empty()) return;
    std::ofstream os(path, std::ios::app);
    if (!os) throw DataError("cannot append to review queue " + path);
    os << request_id << '\t' << score << '\t' << detail::timestamp_utc() << '\n';
}

/// Stage 1 stub: the conditioning embedding is an opaque placeholder; only
/// the modality label differs between request kinds.
inline std::string encode_stub(const GenerationRequest& request) {
    return modality_name(request.modality) + "-embedding";
}

/// Stage 2 stub: deterministic denoised latent per the configured source.
inline Tensor diffusion_stub(const GenerationRequest& request, const StageStubs& stubs) {
    switch (stubs.source) {
        case LatentSource::kSeededNoise:
            return Tensor::normal(stubs.latent_shape, 0.f, 1.f,
                                  rng::mix(request.seed, 0x57a6e2u));
        case LatentSource::kArchiveReplay:
            if (!stubs.archive || !stubs.manifest)
                throw ConfigError("archive replay needs an archive and manifest");
            return stubs.archive->read_latent(*stubs.manifest, stubs.clip_id);
        case LatentSource::kFixed:
            if (!stubs.fixed_latent.defined())
                throw ConfigError("fixed latent source has no tensor");
            return stubs.fixed_latent;
    }
    throw ConfigError("unknown latent source");
}

/// Full run: encode, diffuse, score on the side channel, then decide whether
/// the decode stub may run. The score is always reported when scoring
/// succeeded; output is delivered only on pass (or flag-for-review, which
/// delivers and queues the request).
inline PipelineResult run_pipeline(const GenerationRequest& request, const StageStubs& stubs,
                                   const GuardConfig& guard, Probe<float>& probe) {
    guard.validate();
    PipelineResult res;
    res.request_id = request.request_id;
    res.modality = request.modality;

    auto t0 = std::chrono::steady_clock::now();
    const std::string embedding = encode_stub(request);
    (void)embedding;
    res.stage1_ms = detail::ms_since(t0);

    t0 = std::chrono::steady_clock::now();
    Tensor latent = diffusion_stub(request, stubs);
    res.stage2_ms = detail::ms_since(t0);

    t0 = std::chrono::steady_clock::now();
    try {
        res.score = probe_hook(latent, probe);
    } catch (const std::exception& e) {
        res.scoring_failed = true;
        res.error = e.what();
    }
    res.probe_ms = detail::ms_since(t0);

    if (res.scoring_failed) {
        res.decision = guard.fail_closed ? Decision::kViolating : Decision::kPass;
    } else {
        res.decision = guard_decision(*res.score, guard);
    }

    const bool deliver =
        res.decision == Decision::kPass ||
        (!res.scoring_failed && res.decision == Decision::kViolating &&
         guard.action == GuardAction::kFlagForReview);
    if (deliver) {
        // Decode stub: simulated cost, charged but not slept.
        res.decode_performed = true;
        res.decode_ms = stubs.decode_cost_ms;
        res.output_ref = "video:" + request.request_id;
    }
    if (!res.scoring_failed && res.decision == Decision::kViolating &&
        guard.action == GuardAction::kFlagForReview)
        append_review_queue(guard.review_queue_path, request.request_id, *res.score);
    return res;
}

/// Structured per-run timing report.
inline std::string render_result(const PipelineResult& r) {
    std::ostringstream os;
    os << "request " << r.request_id << " (" << modality_name(r.modality) << ")\n";
    if (r.score)
        os << "  score            " << *r.score << "\n";
    else
        os << "  score            unavailable (" << r.error << ")\n";
    os << "  decision         " << decision_name(r.decision) << "\n"
       << "  decode_performed " << (r.decode_performed ? "yes" : "no") << "\n"
       << "  output           " << (r.output_ref.empty() ? "(suppressed)" : r.output_ref) << "\n"
       << "  stage1_ms        " << r.stage1_ms << "\n"
       << "  stage2_ms        " << r.stage2_ms << "\n"
       << "  probe_ms         " << r.probe_ms << "\n"
       << "  decode_ms        " << r.decode_ms << (r.decode_performed ? " (simulated)" : "")
       << "\n";
    return os.str();
}

}  // namespace lsp::pipeline
