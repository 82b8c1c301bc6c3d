#include <doctest.h>

#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "helpers.hpp"

#include <lsp/pipeline.hpp>

using namespace lsp;
using namespace lsp::pipeline;

namespace {

std::string fresh_dir(const std::string& leaf) {
    auto dir = std::filesystem::temp_directory_path() / "lsp_pipeline_tests" / leaf;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

/// Zeroes every parameter, then overwrites one named tensor with given values.
void rig(Probe<float>& model, const std::string& name, std::vector<float> values) {
    for (auto& p : model.parameters())
        std::fill(p.tensor->data(), p.tensor->data() + p.tensor->numel(), 0.f);
    if (name.empty()) return;
    for (auto& p : model.parameters()) {
        if (p.name != name) continue;
        REQUIRE(p.tensor->numel() == static_cast<int64_t>(values.size()));
        std::copy(values.begin(), values.end(), p.tensor->data());
        return;
    }
    FAIL("parameter not found: " << name);
}

Probe<float> small_probe(uint64_t seed) {
    return Probe<float>(ProbeConfig::for_kind(ProbeKind::kVanilla3dCnn), seed);
}

GenerationRequest make_request(const std::string& id, uint64_t seed = 0,
                               Modality m = Modality::kT2V) {
    GenerationRequest r;
    r.request_id = id;
    r.modality = m;
    r.prompt = "a quiet meadow";
    r.seed = seed;
    return r;
}

StageStubs fixed_stubs(Tensor latent, double decode_cost_ms = 3000.0) {
    StageStubs s;
    s.source = LatentSource::kFixed;
    s.fixed_latent = std::move(latent);
    s.decode_cost_ms = decode_cost_ms;
    return s;
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream is(path);
    REQUIRE(is.good());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) lines.push_back(line);
    return lines;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream is(line);
    while (std::getline(is, field, '\t')) fields.push_back(field);
    return fields;
}

bool looks_like_utc_timestamp(const std::string& s) {
    // e.g. 2026-08-23T12:34:56Z
    if (s.size() != 20) return false;
    const std::string pattern = "dddd-dd-ddTdd:dd:ddZ";
    for (size_t i = 0; i < pattern.size(); ++i) {
        if (pattern[i] == 'd') {
            if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
        } else if (s[i] != pattern[i]) {
            return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("modality and guard-action names round-trip and reject unknowns") {
    for (Modality m : {Modality::kT2V, Modality::kI2V, Modality::kV2V})
        CHECK(parse_modality(modality_name(m)) == m);
    CHECK(modality_name(Modality::kT2V) == "t2v");
    CHECK(modality_name(Modality::kI2V) == "i2v");
    CHECK(modality_name(Modality::kV2V) == "v2v");
    CHECK_THROWS_AS(parse_modality("x2v"), ConfigError);

    for (GuardAction a : {GuardAction::kSuppress, GuardAction::kFlagForReview})
        CHECK(parse_guard_action(guard_action_name(a)) == a);
    CHECK(guard_action_name(GuardAction::kSuppress) == "suppress");
    CHECK(guard_action_name(GuardAction::kFlagForReview) == "flag-for-review");
    CHECK_THROWS_AS(parse_guard_action("quarantine"), ConfigError);

    CHECK(decision_name(Decision::kPass) == "pass");
    CHECK(decision_name(Decision::kViolating) == "violating");
}

TEST_CASE("the encode stub tags the embedding with the request modality") {
    CHECK(encode_stub(make_request("a", 0, Modality::kT2V)) == "t2v-embedding");
    CHECK(encode_stub(make_request("b", 0, Modality::kI2V)) == "i2v-embedding");
    CHECK(encode_stub(make_request("c", 0, Modality::kV2V)) == "v2v-embedding");
}

TEST_CASE("the threshold rule is strict: violating iff score exceeds tau") {
    const std::vector<double> grid{0.0, 0.25, 0.5, 0.75, 1.0};
    for (double tau : grid) {
        GuardConfig g;
        g.tau = tau;
        for (double s : grid) {
            const Decision want = s > tau ? Decision::kViolating : Decision::kPass;
            CHECK(guard_decision(s, g) == want);
        }
        // equality always passes, including at the boundaries
        CHECK(guard_decision(tau, g) == Decision::kPass);
    }

    GuardConfig mid;
    mid.tau = 0.5;
    CHECK(guard_decision(0.9, mid) == Decision::kViolating);
    CHECK(guard_decision(0.5, mid) == Decision::kPass);
    CHECK(guard_decision(0.0, mid) == Decision::kPass);

    // random cross-check of the rule over the whole square
    for (uint64_t i = 0; i < 200; ++i) {
        const double s = rng::uniform01(31, 2 * i);
        GuardConfig g;
        g.tau = rng::uniform01(31, 2 * i + 1);
        const Decision want = s > g.tau ? Decision::kViolating : Decision::kPass;
        CHECK(guard_decision(s, g) == want);
    }
}

TEST_CASE("raising tau never flips a pass back to violating") {
    for (uint64_t i = 0; i < 20; ++i) {
        const double s = rng::uniform01(77, i);
        bool passed_before = false;
        for (int k = 0; k <= 20; ++k) {
            GuardConfig g;
            g.tau = static_cast<double>(k) / 20.0;
            const bool pass = guard_decision(s, g) == Decision::kPass;
            if (passed_before) CHECK(pass);
            passed_before = passed_before || pass;
        }
        // tau = 1 passes everything in range
        GuardConfig top;
        top.tau = 1.0;
        CHECK(guard_decision(s, top) == Decision::kPass);
    }
}

TEST_CASE("out-of-range thresholds are a config error") {
    GuardConfig g;
    g.tau = 1.5;
    CHECK_THROWS_AS(g.validate(), ConfigError);
    CHECK_THROWS_AS(guard_decision(0.5, g), ConfigError);
    g.tau = -0.1;
    CHECK_THROWS_AS(g.validate(), ConfigError);

    // a bad guard aborts the pipeline before any stage runs
    Probe<float> probe = small_probe(5);
    StageStubs stubs = fixed_stubs(Tensor::normal({16, 6, 12, 16}, 0.f, 1.f, 1));
    CHECK_THROWS_AS(run_pipeline(make_request("r"), stubs, g, probe), ConfigError);
}

TEST_CASE("out-of-range scores break the probe contract and are internal errors") {
    GuardConfig g;
    CHECK_THROWS_WITH_AS(guard_decision(1.5, g), doctest::Contains("internal error"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(guard_decision(-0.1, g), doctest::Contains("internal error"),
                         std::runtime_error);
    CHECK_THROWS_AS(guard_decision(std::numeric_limits<double>::quiet_NaN(), g),
                    std::runtime_error);
}

TEST_CASE("the probe hook scores without mutating the latent") {
    Probe<float> probe = small_probe(7);
    Tensor latent = Tensor::normal({16, 6, 12, 16}, 0.f, 1.f, 21);
    Tensor snapshot = latent.clone();

    const double s = probe_hook(latent, probe);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
    CHECK(latent.same_bytes(snapshot));

    // the hook is exactly a batched eval-mode forward with softmax
    Shape batched{1, 16, 6, 12, 16};
    Ctx<float> ctx;
    Tensor probs = probe.forward(ctx, latent.reshaped(batched), /*apply_softmax=*/true);
    CHECK(s == static_cast<double>(probs.at(1)));
}

TEST_CASE("the probe hook rejects latents that are not C x T x H x W") {
    Probe<float> probe = small_probe(7);
    CHECK_THROWS_AS(probe_hook(Tensor::normal({16, 13, 60}, 0.f, 1.f, 1), probe), ShapeError);
    CHECK_THROWS_AS(probe_hook(Tensor::normal({1, 16, 6, 12, 16}, 0.f, 1.f, 1), probe),
                    ShapeError);
}

TEST_CASE("an all-zero probe scores exactly one half") {
    Probe<float> probe = small_probe(1);
    rig(probe, "", {});
    for (uint64_t seed : {3u, 4u, 5u}) {
        Tensor latent = Tensor::normal({16, 6, 12, 16}, 0.f, 1.f, seed);
        CHECK(probe_hook(latent, probe) == 0.5);
    }
}

TEST_CASE("a passing clip is decoded and delivered with the simulated cost charged") {
    Probe<float> probe = small_probe(1);
    rig(probe, "", {});  // constant score 0.5
    StageStubs stubs = fixed_stubs(Tensor::normal({16, 6, 12, 16}, 0.f, 1.f, 9), 123.5);
    GuardConfig g;
    g.tau = 0.5;

    PipelineResult res = run_pipeline(make_request("req-pass"), stubs, g, probe);
    CHECK(res.request_id == "req-pass");
    REQUIRE(res.score.has_value());
    CHECK(*res.score == 0.5);
    CHECK(res.decision == Decision::kPass);
    CHECK_FALSE(res.scoring_failed);
    CHECK(res.error.empty());
    CHECK(res.decode_performed);
    CHECK(res.decode_ms == 123.5);
    CHECK(res.output_ref == "video:req-pass");
    CHECK(res.stage1_ms >= 0.0);
    CHECK(res.stage2_ms >= 0.0);
    CHECK(res.probe_ms >= 0.0);
}

TEST_CASE("suppression skips the decode stage entirely") {
    Probe<float> probe = small_probe(1);
    rig(probe, "", {});  // constant score 0.5
    StageStubs stubs = fixed_stubs(Tensor::normal({16, 6, 12, 16}, 0.f, 1.f, 9), 123.5);
    GuardConfig g;
    g.tau = 0.25;  // 0.5 > 0.25: violating
    g.action = GuardAction::kSuppress;

    PipelineResult res = run_pipeline(make_request("req-blocked"), stubs, g, probe);
    REQUIRE(res.score.has_value());
    CHECK(*res.score == 0.5);
    CHECK(res.decision == Decision::kViolating);
    CHECK_FALSE(res.decode_performed);
    CHECK(res.decode_ms == 0.0);
    CHECK(res.output_ref.empty());
}

TEST_CASE("flag-for-review delivers the clip and appends a queue line") {
    Probe<float> probe = small_probe(1);
    rig(probe, "head.fc2.bias", {-2.f, 2.f});  // constant score 1/(1+e^-4) ~ 0.982
    StageStubs stubs = fixed_stubs(Tensor::normal({16, 6, 12, 16}, 0.f, 1.f, 9));
    const std::string dir = fresh_dir("review_queue");
    GuardConfig g;
    g.tau = 0.5;
    g.action = GuardAction::kFlagForReview;
    g.review_queue_path = dir + "/queue.tsv";

    PipelineResult res = run_pipeline(make_request("req-flag"), stubs, g, probe);
    REQUIRE(res.score.has_value());
    CHECK(*res.score > 0.98);
    CHECK(*res.score < 0.99);
    CHECK(res.decision == Decision::kViolating);
    CHECK(res.decode_performed);            // delivered anyway
    CHECK(res.output_ref == "video:req-flag");

    auto lines = read_lines(g.review_queue_path);
    REQUIRE(lines.size() == 1);
    auto fields = split_tabs(lines[0]);
    REQUIRE(fields.size() == 3);
    CHECK(fields[0] == "req-flag");
    CHECK(std::stod(fields[1]) == doctest::Approx(*res.score).epsilon(1e-4));
    CHECK(looks_like_utc_timestamp(fields[2]));

    // a second flagged request appends rather than truncates
    run_pipeline(make_request("req-flag-2"), stubs, g, probe);
    lines = read_lines(g.review_queue_path);
    REQUIRE(lines.size() == 2);
    CHECK(split_tabs(lines[1])[0] == "req-flag-2");
}

TEST_CASE("passing clips never reach the review queue") {
    Probe<float> probe = small_probe(1);
    rig(probe, "", {});  // constant score 0.5
    StageStubs stubs = fixed_stubs(Tensor::normal({16, 6, 12, 16}, 0.f, 1.f, 9));
    const std::string dir = fresh_dir("no_queue");
    GuardConfig g;
    g.tau = 0.75;  // 0.5 <= 0.75: pass
    g.action = GuardAction::kFlagForReview;
    g.review_queue_path = dir + "/queue.tsv";

    PipelineResult res = run_pipeline(make_request("req-ok"), stubs, g, probe);
    CHECK(res.decision == Decision::kPass);
    CHECK(res.decode_performed);
    CHECK_FALSE(std::filesystem::exists(g.review_queue_path));

    // an empty queue path is allowed and simply skips the append
    g.review_queue_path.clear();
    g.tau = 0.25;  // violating
    CHECK_NOTHROW(run_pipeline(make_request("req-noq"), stubs, g, probe));
}

TEST_CASE("scoring failures fail closed by default and fail open only when asked") {
    Probe<float> probe = small_probe(1);
    StageStubs stubs = fixed_stubs(Tensor::normal({16, 13, 60}, 0.f, 1.f, 2));  // 3-D: bad
    const std::string dir = fresh_dir("fail_modes");

    GuardConfig closed;
    closed.tau = 0.5;
    closed.action = GuardAction::kFlagForReview;
    closed.review_queue_path = dir + "/queue.tsv";
    PipelineResult res = run_pipeline(make_request("req-bad"), stubs, closed, probe);
    CHECK(res.scoring_failed);
    CHECK_FALSE(res.score.has_value());
    CHECK(res.error.find("probe hook expects") != std::string::npos);
    CHECK(res.decision == Decision::kViolating);
    CHECK_FALSE(res.decode_performed);
    CHECK(res.output_ref.empty());
    // unscored clips are never queued, even under flag-for-review
    CHECK_FALSE(std::filesystem::exists(closed.review_queue_path));

    GuardConfig open = closed;
    open.fail_closed = false;
    res = run_pipeline(make_request("req-bad"), stubs, open, probe);
    CHECK(res.scoring_failed);
    CHECK_FALSE(res.score.has_value());
    CHECK(res.decision == Decision::kPass);
    CHECK(res.decode_performed);
    CHECK(res.output_ref == "video:req-bad");
    CHECK_FALSE(std::filesystem::exists(closed.review_queue_path));
}

TEST_CASE("the score depends only on the latent, not the request modality") {
    Probe<float> probe = small_probe(3);
    StageStubs stubs = fixed_stubs(Tensor::normal({16, 6, 12, 16}, 0.f, 1.f, 42));
    GuardConfig g;

    GenerationRequest t2v = make_request("m-t2v", 0, Modality::kT2V);
    GenerationRequest i2v = make_request("m-i2v", 0, Modality::kI2V);
    i2v.media_ref = "image:cond.png";
    GenerationRequest v2v = make_request("m-v2v", 0, Modality::kV2V);
    v2v.media_ref = "video:cond.mp4";
    v2v.prompt = "restyle the clip";

    PipelineResult a = run_pipeline(t2v, stubs, g, probe);
    PipelineResult b = run_pipeline(i2v, stubs, g, probe);
    PipelineResult c = run_pipeline(v2v, stubs, g, probe);
    REQUIRE(a.score.has_value());
    CHECK(*a.score == *b.score);
    CHECK(*a.score == *c.score);
    CHECK(a.decision == b.decision);
    CHECK(a.decision == c.decision);
    CHECK(a.modality == Modality::kT2V);
    CHECK(b.modality == Modality::kI2V);
    CHECK(c.modality == Modality::kV2V);
}

TEST_CASE("seeded-noise generation is deterministic per request seed") {
    Probe<float> probe = small_probe(3);
    StageStubs stubs;
    stubs.source = LatentSource::kSeededNoise;
    stubs.latent_shape = {16, 4, 12, 16};
    GuardConfig g;

    PipelineResult r1 = run_pipeline(make_request("s-a", 11), stubs, g, probe);
    PipelineResult r2 = run_pipeline(make_request("s-b", 11), stubs, g, probe);
    PipelineResult r3 = run_pipeline(make_request("s-c", 12), stubs, g, probe);
    REQUIRE(r1.score.has_value());
    CHECK(*r1.score == *r2.score);
    CHECK(*r1.score != *r3.score);

    // the stub itself is a pure function of the request seed
    Tensor l1 = diffusion_stub(make_request("x", 11), stubs);
    Tensor l2 = diffusion_stub(make_request("y", 11), stubs);
    CHECK(l1.same_bytes(l2));
}

TEST_CASE("archive replay scores the stored latent exactly") {
    const std::string dir = fresh_dir("replay");
    store::Archive arch(dir);
    store::Manifest m;
    Tensor latent = Tensor::normal({16, 5, 12, 16}, 0.f, 1.f, 77);
    arch.write_latent(m, "clip_replay", "test", "violating", "src_r", 5.2, latent);

    Probe<float> probe = small_probe(3);
    StageStubs stubs;
    stubs.source = LatentSource::kArchiveReplay;
    stubs.archive = &arch;
    stubs.manifest = &m;
    stubs.clip_id = "clip_replay";
    GuardConfig g;

    PipelineResult r1 = run_pipeline(make_request("rep-1"), stubs, g, probe);
    PipelineResult r2 = run_pipeline(make_request("rep-2"), stubs, g, probe);
    REQUIRE(r1.score.has_value());
    CHECK(*r1.score == probe_hook(latent, probe));
    CHECK(*r1.score == *r2.score);

    // configuration and data errors in stage 2 are not maskable by the guard
    stubs.clip_id = "clip_missing";
    CHECK_THROWS_AS(run_pipeline(make_request("rep-3"), stubs, g, probe), DataError);
    stubs.archive = nullptr;
    CHECK_THROWS_AS(run_pipeline(make_request("rep-4"), stubs, g, probe), ConfigError);
}

TEST_CASE("a fixed-latent source without a tensor is a config error") {
    StageStubs stubs;
    stubs.source = LatentSource::kFixed;
    CHECK_THROWS_AS(diffusion_stub(make_request("f"), stubs), ConfigError);
}

TEST_CASE("tau at the top of the range always decodes") {
    StageStubs stubs = fixed_stubs(Tensor::normal({16, 6, 12, 16}, 0.f, 1.f, 9));
    GuardConfig g;
    g.tau = 1.0;

    Probe<float> hot = small_probe(1);
    rig(hot, "head.fc2.bias", {-10.f, 10.f});  // score ~ 1
    PipelineResult res = run_pipeline(make_request("top-hot"), stubs, g, hot);
    REQUIRE(res.score.has_value());
    CHECK(*res.score > 0.999);
    CHECK(res.decision == Decision::kPass);
    CHECK(res.decode_performed);

    Probe<float> zero = small_probe(1);
    rig(zero, "", {});
    res = run_pipeline(make_request("top-zero"), stubs, g, zero);
    CHECK(res.decision == Decision::kPass);
    CHECK(res.decode_performed);
}

TEST_CASE("the rendered report reflects delivery, suppression and failures") {
    Probe<float> probe = small_probe(1);
    rig(probe, "", {});
    StageStubs stubs = fixed_stubs(Tensor::normal({16, 6, 12, 16}, 0.f, 1.f, 9));

    GuardConfig pass_g;
    pass_g.tau = 0.5;
    std::string r = render_result(run_pipeline(make_request("rr-1"), stubs, pass_g, probe));
    CHECK(r.find("request rr-1 (t2v)") != std::string::npos);
    CHECK(r.find("pass") != std::string::npos);
    CHECK(r.find("video:rr-1") != std::string::npos);
    CHECK(r.find("(simulated)") != std::string::npos);

    GuardConfig block_g;
    block_g.tau = 0.25;
    r = render_result(run_pipeline(make_request("rr-2"), stubs, block_g, probe));
    CHECK(r.find("violating") != std::string::npos);
    CHECK(r.find("(suppressed)") != std::string::npos);

    StageStubs bad = fixed_stubs(Tensor::normal({16, 13, 60}, 0.f, 1.f, 2));
    r = render_result(run_pipeline(make_request("rr-3"), bad, pass_g, probe));
    CHECK(r.find("unavailable") != std::string::npos);
}
