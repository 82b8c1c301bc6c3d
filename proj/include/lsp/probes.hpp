#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "lsp/checkpoint.hpp"
#include "lsp/layers.hpp"

// The two probe classifiers over denoised video latents (B x 16 x T x 60 x 90):
// a CNN-Transformer hybrid and a vanilla 3-D CNN baseline. Covers building,
// forward scoring, parameter auditing, symbolic shape tracing and checkpoint
// round trips.
namespace lsp {

enum class ProbeKind { kCnnTransformer, kVanilla3dCnn };

inline std::string probe_kind_name(ProbeKind k) {
    return k == ProbeKind::kCnnTransformer ? "cnn_transformer" : "vanilla_3dcnn";
}

inline ProbeKind parse_probe_kind(const std::string& s) {
    if (s == "cnn_transformer") return ProbeKind::kCnnTransformer;
    if (s == "vanilla_3dcnn") return ProbeKind::kVanilla3dCnn;
    throw ConfigError("unknown probe kind '" + s +
                      "' (expected cnn_transformer or vanilla_3dcnn)");
}

struct ProbeConfig {
    ProbeKind kind = ProbeKind::kCnnTransformer;
    int64_t in_channels = 16;
    // CNN-Transformer
    int64_t stem_width = 64;
    int64_t stage1_width = 128;
    int64_t stage2_width = 256;
    int64_t encoder_layers = 6;
    int64_t heads = 8;
    int64_t ffn_width = 2048;
    int64_t head_hidden = 128;
    double dropout_head = 0.4;
    double dropout_encoder = 0.1;
    int64_t se_ratio = 16;
    // Vanilla 3-D CNN
    int64_t vanilla_width1 = 32;
    int64_t vanilla_width2 = 64;
    int64_t vanilla_width3 = 128;
    int64_t vanilla_head_hidden = 64;
    double vanilla_dropout = 0.3;

    static ProbeConfig for_kind(ProbeKind k) {
        ProbeConfig c;
        c.kind = k;
        return c;
    }
};

inline void to_json(nlohmann::json& j, const ProbeConfig& c) {
    j = nlohmann::json{{"kind", probe_kind_name(c.kind)},
                       {"in_channels", c.in_channels},
                       {"stem_width", c.stem_width},
                       {"stage1_width", c.stage1_width},
                       {"stage2_width", c.stage2_width},
                       {"encoder_layers", c.encoder_layers},
                       {"heads", c.heads},
                       {"ffn_width", c.ffn_width},
                       {"head_hidden", c.head_hidden},
                       {"dropout_head", c.dropout_head},
                       {"dropout_encoder", c.dropout_encoder},
                       {"se_ratio", c.se_ratio},
                       {"vanilla_width1", c.vanilla_width1},
                       {"vanilla_width2", c.vanilla_width2},
                       {"vanilla_width3", c.vanilla_width3},
                       {"vanilla_head_hidden", c.vanilla_head_hidden},
                       {"vanilla_dropout", c.vanilla_dropout},
                       {"init", "kaiming_relu+xavier"}};
}

inline void from_json(const nlohmann::json& j, ProbeConfig& c) {
    c.kind = parse_probe_kind(j.at("kind").get<std::string>());
    c.in_channels = j.at("in_channels").get<int64_t>();
    c.stem_width = j.at("stem_width").get<int64_t>();
    c.stage1_width = j.at("stage1_width").get<int64_t>();
    c.stage2_width = j.at("stage2_width").get<int64_t>();
    c.encoder_layers = j.at("encoder_layers").get<int64_t>();
    c.heads = j.at("heads").get<int64_t>();
    c.ffn_width = j.at("ffn_width").get<int64_t>();
    c.head_hidden = j.at("head_hidden").get<int64_t>();
    c.dropout_head = j.at("dropout_head").get<double>();
    c.dropout_encoder = j.at("dropout_encoder").get<double>();
    c.se_ratio = j.at("se_ratio").get<int64_t>();
    c.vanilla_width1 = j.at("vanilla_width1").get<int64_t>();
    c.vanilla_width2 = j.at("vanilla_width2").get<int64_t>();
    c.vanilla_width3 = j.at("vanilla_width3").get<int64_t>();
    c.vanilla_head_hidden = j.at("vanilla_head_hidden").get<int64_t>();
    c.vanilla_dropout = j.at("vanilla_dropout").get<double>();
}

template <typename S>
class Probe {
   public:
    Probe(ProbeConfig config, uint64_t seed) : config_(config), seed_(seed) {
        nn::InitStream init(seed);
        if (config.kind == ProbeKind::kCnnTransformer) {
            stem_conv_ = std::make_unique<nn::Conv3d<S>>(
                config.in_channels, config.stem_width, nn::Dims3{3, 3, 3}, nn::Dims3{1, 1, 1},
                nn::Dims3{1, 1, 1}, false, init);
            stem_bn_ = std::make_unique<nn::BatchNorm3d<S>>(config.stem_width);
            res1_ = std::make_unique<nn::ResBlock3d<S>>(config.stem_width, config.stage1_width, 2,
                                                        config.se_ratio, init);
            res2_ = std::make_unique<nn::ResBlock3d<S>>(config.stage1_width, config.stage2_width, 2,
                                                        config.se_ratio, init);
            encoder_.reserve(static_cast<size_t>(config.encoder_layers));
            for (int64_t i = 0; i < config.encoder_layers; ++i)
                encoder_.emplace_back(config.stage2_width, config.heads, config.ffn_width,
                                      config.dropout_encoder, init);
            head_ln_ = std::make_unique<nn::LayerNorm<S>>(config.stage2_width);
            head_fc1_ = std::make_unique<nn::Linear<S>>(config.stage2_width, config.head_hidden,
                                                        true, init, nn::Init::kKaimingRelu);
            head_fc2_ = std::make_unique<nn::Linear<S>>(config.head_hidden, 2, true, init,
                                                        nn::Init::kXavier);
        } else {
            v_conv1_ = std::make_unique<nn::Conv3d<S>>(
                config.in_channels, config.vanilla_width1, nn::Dims3{3, 5, 5}, nn::Dims3{1, 2, 2},
                nn::Dims3{1, 2, 2}, true, init);
            v_bn1_ = std::make_unique<nn::BatchNorm3d<S>>(config.vanilla_width1);
            v_conv2_ = std::make_unique<nn::Conv3d<S>>(config.vanilla_width1, config.vanilla_width2,
                                                       nn::Dims3{3, 3, 3}, nn::Dims3{1, 1, 1},
                                                       nn::Dims3{1, 1, 1}, true, init);
            v_bn2_ = std::make_unique<nn::BatchNorm3d<S>>(config.vanilla_width2);
            v_conv3_ = std::make_unique<nn::Conv3d<S>>(config.vanilla_width2, config.vanilla_width3,
                                                       nn::Dims3{3, 3, 3}, nn::Dims3{1, 1, 1},
                                                       nn::Dims3{1, 1, 1}, true, init);
            v_bn3_ = std::make_unique<nn::BatchNorm3d<S>>(config.vanilla_width3);
            v_fc1_ = std::make_unique<nn::Linear<S>>(config.vanilla_width3,
                                                     config.vanilla_head_hidden, true, init,
                                                     nn::Init::kKaimingRelu);
            v_fc2_ = std::make_unique<nn::Linear<S>>(config.vanilla_head_hidden, 2, true, init,
                                                     nn::Init::kXavier);
        }
    }

    const ProbeConfig& config() const { return config_; }
    uint64_t seed() const { return seed_; }

    /// Forward to logits (apply_softmax=false) or class probabilities.
    TensorT<S> forward(Ctx<S>& ctx, const TensorT<S>& x, bool apply_softmax) {
        check_input(x);
        TensorT<S> logits = config_.kind == ProbeKind::kCnnTransformer
                                ? forward_cnn_transformer(ctx, x)
                                : forward_vanilla(ctx, x);
        return apply_softmax ? ops::softmax_last(ctx, logits) : logits;
    }

    nn::ParamList<S> parameters() {
        nn::ParamList<S> params, buffers;
        collect(params, buffers);
        return params;
    }

    nn::ParamList<S> buffers() {
        nn::ParamList<S> params, buffers;
        collect(params, buffers);
        return buffers;
    }

    /// Trainable parameter count (buffers excluded).
    int64_t param_count() {
        int64_t n = 0;
        for (const auto& p : parameters()) n += p.tensor->numel();
        return n;
    }

    /// Symbolic per-stage output shapes, mirroring the architecture tables.
    std::vector<std::pair<std::string, Shape>> shape_trace(const Shape& input) const {
        if (input.size() != 5)
            throw ShapeError("probe input must be 5-D, got " + shape_str(input));
        const int64_t b = input[0], t = input[2], h = input[3], w = input[4];
        if (input[1] != config_.in_channels)
            throw ShapeError("probe expects " + std::to_string(config_.in_channels) +
                             " channels, got " + std::to_string(input[1]));
        std::vector<std::pair<std::string, Shape>> rows;
        rows.emplace_back("Input", input);
        auto conv_out = kernels::conv_out_extent;
        if (config_.kind == ProbeKind::kCnnTransformer) {
            rows.emplace_back("Stem", Shape{b, config_.stem_width, t, h, w});
            const int64_t t1 = conv_out(t, 3, 2, 1), h1 = conv_out(h, 3, 2, 1),
                          w1 = conv_out(w, 3, 2, 1);
            rows.emplace_back("Stage 1", Shape{b, config_.stage1_width, t1, h1, w1});
            const int64_t t2 = conv_out(t1, 3, 2, 1), h2 = conv_out(h1, 3, 2, 1),
                          w2 = conv_out(w1, 3, 2, 1);
            rows.emplace_back("Stage 2", Shape{b, config_.stage2_width, t2, h2, w2});
            rows.emplace_back("Spatial Pool", Shape{b, config_.stage2_width, t2});
            rows.emplace_back("Reshape", Shape{b, t2, config_.stage2_width});
            rows.emplace_back("Transformer", Shape{b, t2, config_.stage2_width});
            rows.emplace_back("Temporal Pool", Shape{b, config_.stage2_width});
            rows.emplace_back("Head", Shape{b, 2});
        } else {
            const int64_t h1 = conv_out(h, 5, 2, 2), w1 = conv_out(w, 5, 2, 2);
            rows.emplace_back("Block 1 Conv", Shape{b, config_.vanilla_width1, t, h1, w1});
            const int64_t tp1 = t / 2, hp1 = h1 / 2, wp1 = w1 / 2;
            rows.emplace_back("Block 1 Pool", Shape{b, config_.vanilla_width1, tp1, hp1, wp1});
            rows.emplace_back("Block 2 Conv", Shape{b, config_.vanilla_width2, tp1, hp1, wp1});
            const int64_t tp2 = tp1 / 2, hp2 = hp1 / 2, wp2 = wp1 / 2;
            rows.emplace_back("Block 2 Pool", Shape{b, config_.vanilla_width2, tp2, hp2, wp2});
            rows.emplace_back("Block 3 Conv", Shape{b, config_.vanilla_width3, tp2, hp2, wp2});
            rows.emplace_back("Global Pool", Shape{b, config_.vanilla_width3, 1, 1, 1});
            rows.emplace_back("Flatten", Shape{b, config_.vanilla_width3});
            rows.emplace_back("Head", Shape{b, 2});
        }
        return rows;
    }

   private:
    void check_input(const TensorT<S>& x) const {
        if (x.ndim() != 5)
            throw ShapeError("probe input must be B x C x T x H x W, got " + shape_str(x.shape()));
        if (x.extent(1) != config_.in_channels)
            throw ShapeError("probe expects " + std::to_string(config_.in_channels) +
                             " channels, got " + std::to_string(x.extent(1)));
        if (x.extent(2) < 4)
            throw ShapeError("probe needs temporal extent >= 4, got " +
                             std::to_string(x.extent(2)));
    }

    TensorT<S> forward_cnn_transformer(Ctx<S>& ctx, const TensorT<S>& x) {
        TensorT<S> h = ops::relu(ctx, stem_bn_->forward(ctx, stem_conv_->forward(ctx, x)));
        h = res1_->forward(ctx, h);
        h = res2_->forward(ctx, h);
        TensorT<S> pooled = ops::avg_pool_spatial(ctx, h);   // B x C x T''
        TensorT<S> tok = ops::transpose_12(ctx, pooled);     // B x T'' x C
        for (auto& layer : encoder_) tok = layer.forward(ctx, tok);
        TensorT<S> f = ops::mean_axis1(ctx, tok);            // temporal mean
        TensorT<S> y = head_ln_->forward(ctx, f);
        y = ops::gelu(ctx, head_fc1_->forward(ctx, y));
        y = ops::dropout(ctx, y, config_.dropout_head);
        return head_fc2_->forward(ctx, y);
    }

    TensorT<S> forward_vanilla(Ctx<S>& ctx, const TensorT<S>& x) {
        TensorT<S> h = ops::relu(ctx, v_bn1_->forward(ctx, v_conv1_->forward(ctx, x)));
        h = ops::maxpool3d(ctx, h, {2, 2, 2});
        h = ops::relu(ctx, v_bn2_->forward(ctx, v_conv2_->forward(ctx, h)));
        h = ops::maxpool3d(ctx, h, {2, 2, 2});
        h = ops::relu(ctx, v_bn3_->forward(ctx, v_conv3_->forward(ctx, h)));
        h = ops::avg_pool_full(ctx, h);  // B x C x 1 x 1 x 1
        TensorT<S> f = ops::reshape(ctx, h, {x.extent(0), config_.vanilla_width3});
        TensorT<S> y = ops::relu(ctx, v_fc1_->forward(ctx, f));
        y = ops::dropout(ctx, y, config_.vanilla_dropout);
        return v_fc2_->forward(ctx, y);
    }

    void collect(nn::ParamList<S>& params, nn::ParamList<S>& buffers) {
        if (config_.kind == ProbeKind::kCnnTransformer) {
            stem_conv_->collect("stem.conv", params, buffers);
            stem_bn_->collect("stem.bn", params, buffers);
            res1_->collect("res1", params, buffers);
            res2_->collect("res2", params, buffers);
            for (size_t i = 0; i < encoder_.size(); ++i)
                encoder_[i].collect("encoder." + std::to_string(i), params, buffers);
            head_ln_->collect("head.ln", params, buffers);
            head_fc1_->collect("head.fc1", params, buffers);
            head_fc2_->collect("head.fc2", params, buffers);
        } else {
            v_conv1_->collect("block1.conv", params, buffers);
            v_bn1_->collect("block1.bn", params, buffers);
            v_conv2_->collect("block2.conv", params, buffers);
            v_bn2_->collect("block2.bn", params, buffers);
            v_conv3_->collect("block3.conv", params, buffers);
            v_bn3_->collect("block3.bn", params, buffers);
            v_fc1_->collect("head.fc1", params, buffers);
            v_fc2_->collect("head.fc2", params, buffers);
        }
    }

    ProbeConfig config_;
    uint64_t seed_;
    // CNN-Transformer members
    std::unique_ptr<nn::Conv3d<S>> stem_conv_;
    std::unique_ptr<nn::BatchNorm3d<S>> stem_bn_;
    std::unique_ptr<nn::ResBlock3d<S>> res1_, res2_;
    std::vector<nn::TransformerEncoderLayer<S>> encoder_;
    std::unique_ptr<nn::LayerNorm<S>> head_ln_;
    std::unique_ptr<nn::Linear<S>> head_fc1_, head_fc2_;
    // Vanilla members
    std::unique_ptr<nn::Conv3d<S>> v_conv1_, v_conv2_, v_conv3_;
    std::unique_ptr<nn::BatchNorm3d<S>> v_bn1_, v_bn2_, v_bn3_;
    std::unique_ptr<nn::Linear<S>> v_fc1_, v_fc2_;
};

// ---------------------------------------------------------------------------
// checkpoint glue (f32 production models)

struct CheckpointMeta {
    int64_t epoch = 0;
    uint64_t seed = 0;
    std::string mode = "eval";
    nlohmann::json metrics;  // optional free-form metric block
};

inline void save_probe(Probe<float>& model, const std::string& path, const CheckpointMeta& meta) {
    nlohmann::json cfg;
    cfg["probe"] = model.config();
    cfg["seed"] = meta.seed;
    cfg["epoch"] = meta.epoch;
    cfg["mode"] = meta.mode;
    if (!meta.metrics.is_null()) cfg["metrics"] = meta.metrics;
    std::vector<ckpt::Entry> entries;
    for (const auto& p : model.parameters()) entries.push_back({p.name, *p.tensor});
    for (const auto& b : model.buffers()) entries.push_back({b.name, *b.tensor});
    ckpt::write_checkpoint(path, cfg.dump(), entries);
}

struct LoadedProbe {
    Probe<float> model;
    CheckpointMeta meta;
};

inline LoadedProbe load_probe(const std::string& path) {
    ckpt::LoadedCheckpoint raw = ckpt::read_checkpoint(path);
    nlohmann::json cfg;
    try {
        cfg = nlohmann::json::parse(raw.config_text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("unparseable checkpoint config in " + path + ": " + e.what());
    }
    ProbeConfig pc = cfg.at("probe").get<ProbeConfig>();
    CheckpointMeta meta;
    meta.seed = cfg.value("seed", uint64_t{0});
    meta.epoch = cfg.value("epoch", int64_t{0});
    meta.mode = cfg.value("mode", std::string("eval"));
    if (cfg.contains("metrics")) meta.metrics = cfg["metrics"];
    LoadedProbe out{Probe<float>(pc, meta.seed), meta};
    nn::ParamList<float> params = out.model.parameters();
    nn::ParamList<float> buffers = out.model.buffers();
    size_t expected = params.size() + buffers.size();
    if (raw.entries.size() != expected)
        throw DataError("checkpoint " + path + " holds " + std::to_string(raw.entries.size()) +
                        " tensors, model needs " + std::to_string(expected));
    auto fill = [&](nn::ParamList<float>& list) {
        for (auto& p : list) {
            const Tensor* src = raw.find(p.name);
            if (!src) throw DataError("checkpoint " + path + " missing tensor " + p.name);
            if (!same_shape(src->shape(), p.tensor->shape()))
                throw DataError("checkpoint tensor " + p.name + " has shape " +
                                shape_str(src->shape()) + ", expected " +
                                shape_str(p.tensor->shape()));
            std::copy(src->data(), src->data() + src->numel(), p.tensor->data());
        }
    };
    fill(params);
    fill(buffers);
    return out;
}

}  // namespace lsp
