#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "lsp/ops.hpp"

// Parameterized layers. Construction consumes draws from a single InitStream
// in member-declaration order, so a (seed, config) pair fully determines every
// parameter byte. Forward passes thread a Ctx for mode / tape / dropout RNG.
namespace lsp::nn {

using kernels::Dims3;

enum class Init { kKaimingRelu, kXavier };

/// Counter-addressed uniform fills for parameter init.
struct InitStream {
    uint64_t seed = 0;
    uint64_t counter = 0;

    explicit InitStream(uint64_t s) : seed(s) {}

    template <typename S>
    void uniform_fill(TensorT<S>& t, double bound) {
        const uint64_t base = counter;
        const int64_t n = t.numel();
        counter += static_cast<uint64_t>(n);
        S* p = t.data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i)
            p[i] = static_cast<S>((2.0 * rng::uniform01(seed, base + static_cast<uint64_t>(i)) - 1.0) *
                                  bound);
    }
};

inline double init_bound(Init init, double fan_in, double fan_out) {
    switch (init) {
        case Init::kKaimingRelu:
            return std::sqrt(6.0 / fan_in);
        case Init::kXavier:
            return std::sqrt(6.0 / (fan_in + fan_out));
    }
    throw ConfigError("unknown init kind");
}

template <typename S>
struct NamedParam {
    std::string name;
    TensorT<S>* tensor;
};

template <typename S>
using ParamList = std::vector<NamedParam<S>>;

inline std::string join_name(const std::string& prefix, const std::string& local) {
    return prefix.empty() ? local : prefix + "." + local;
}

// ---------------------------------------------------------------------------

template <typename S>
struct Conv3d {
    TensorT<S> weight;
    TensorT<S> bias;  // undefined when the layer is bias-free
    Dims3 stride, pad;

    Conv3d(int64_t c_in, int64_t c_out, Dims3 k, Dims3 stride_, Dims3 pad_, bool with_bias,
           InitStream& init_rng, Init init = Init::kKaimingRelu)
        : stride(stride_), pad(pad_) {
        weight = TensorT<S>::zeros({c_out, c_in, k.t, k.h, k.w});
        weight.set_requires_grad(true);
        const double fan_in = static_cast<double>(c_in * k.t * k.h * k.w);
        const double fan_out = static_cast<double>(c_out * k.t * k.h * k.w);
        init_rng.uniform_fill(weight, init_bound(init, fan_in, fan_out));
        if (with_bias) {
            bias = TensorT<S>::zeros({c_out});
            bias.set_requires_grad(true);
        }
    }

    TensorT<S> forward(Ctx<S>& ctx, const TensorT<S>& x) const {
        return ops::conv3d(ctx, x, weight, bias, stride, pad);
    }

    void collect(const std::string& prefix, ParamList<S>& params, ParamList<S>& buffers) {
        (void)buffers;
        params.push_back({join_name(prefix, "weight"), &weight});
        if (bias.defined()) params.push_back({join_name(prefix, "bias"), &bias});
    }
};

template <typename S>
struct BatchNorm3d {
    TensorT<S> gamma, beta;
    TensorT<S> running_mean, running_var;
    S momentum, eps;

    explicit BatchNorm3d(int64_t c, S momentum_ = S(0.1), S eps_ = S(1e-5))
        : gamma(TensorT<S>::ones({c})),
          beta(TensorT<S>::zeros({c})),
          running_mean(TensorT<S>::zeros({c})),
          running_var(TensorT<S>::ones({c})),
          momentum(momentum_),
          eps(eps_) {
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
    }

    TensorT<S> forward(Ctx<S>& ctx, const TensorT<S>& x) {
        if (ctx.mode == Mode::kTrain) {
            std::vector<S> bm, bv;
            TensorT<S> y = ops::batchnorm_train(ctx, x, gamma, beta, eps, &bm, &bv);
            // EMA update; running variance uses the unbiased batch estimate.
            const int64_t c = gamma.numel();
            const double n = static_cast<double>(x.numel() / c);
            const S unbias = static_cast<S>(n / (n - 1.0));
            S* rm = running_mean.data();
            S* rv = running_var.data();
            for (int64_t i = 0; i < c; ++i) {
                rm[i] = (S(1) - momentum) * rm[i] + momentum * bm[static_cast<size_t>(i)];
                rv[i] = (S(1) - momentum) * rv[i] + momentum * unbias * bv[static_cast<size_t>(i)];
            }
            return y;
        }
        return ops::batchnorm_eval(ctx, x, gamma, beta, running_mean, running_var, eps);
    }

    void collect(const std::string& prefix, ParamList<S>& params, ParamList<S>& buffers) {
        params.push_back({join_name(prefix, "gamma"), &gamma});
        params.push_back({join_name(prefix, "beta"), &beta});
        buffers.push_back({join_name(prefix, "running_mean"), &running_mean});
        buffers.push_back({join_name(prefix, "running_var"), &running_var});
    }
};

template <typename S>
struct Linear {
    TensorT<S> weight;
    TensorT<S> bias;

    Linear(int64_t d_in, int64_t d_out, bool with_bias, InitStream& init_rng, Init init) {
        weight = TensorT<S>::zeros({d_out, d_in});
        weight.set_requires_grad(true);
        init_rng.uniform_fill(weight, init_bound(init, static_cast<double>(d_in),
                                                 static_cast<double>(d_out)));
        if (with_bias) {
            bias = TensorT<S>::zeros({d_out});
            bias.set_requires_grad(true);
        }
    }

    TensorT<S> forward(Ctx<S>& ctx, const TensorT<S>& x) const {
        return ops::linear(ctx, x, weight, bias);
    }

    void collect(const std::string& prefix, ParamList<S>& params, ParamList<S>& buffers) {
        (void)buffers;
        params.push_back({join_name(prefix, "weight"), &weight});
        if (bias.defined()) params.push_back({join_name(prefix, "bias"), &bias});
    }
};

template <typename S>
struct LayerNorm {
    TensorT<S> gamma, beta;
    S eps;

    explicit LayerNorm(int64_t d, S eps_ = S(1e-5))
        : gamma(TensorT<S>::ones({d})), beta(TensorT<S>::zeros({d})), eps(eps_) {
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
    }

    TensorT<S> forward(Ctx<S>& ctx, const TensorT<S>& x) const {
        return ops::layernorm(ctx, x, gamma, beta, eps);
    }

    void collect(const std::string& prefix, ParamList<S>& params, ParamList<S>& buffers) {
        (void)buffers;
        params.push_back({join_name(prefix, "gamma"), &gamma});
        params.push_back({join_name(prefix, "beta"), &beta});
    }
};

/// Squeeze-and-excitation: global average descriptor, two-layer bottleneck
/// with hidden width max(1, C/r), sigmoid gate applied per channel.
template <typename S>
struct SEBlock {
    Linear<S> fc1, fc2;
    int64_t channels;

    SEBlock(int64_t c, int64_t r, InitStream& init_rng)
        : fc1(c, std::max<int64_t>(1, c / r), true, init_rng, Init::kKaimingRelu),
          fc2(std::max<int64_t>(1, c / r), c, true, init_rng, Init::kXavier),
          channels(c) {}

    TensorT<S> forward(Ctx<S>& ctx, const TensorT<S>& x) const {
        TensorT<S> u = ops::avg_pool_full(ctx, x);                       // B x C x 1 x 1 x 1
        u = ops::reshape(ctx, u, {x.extent(0), channels});               // B x C
        TensorT<S> a = ops::relu(ctx, fc1.forward(ctx, u));
        a = ops::sigmoid(ctx, fc2.forward(ctx, a));                      // gate in (0,1)
        return ops::channel_scale(ctx, x, a);
    }

    void collect(const std::string& prefix, ParamList<S>& params, ParamList<S>& buffers) {
        fc1.collect(join_name(prefix, "fc1"), params, buffers);
        fc2.collect(join_name(prefix, "fc2"), params, buffers);
    }
};

/// Residual 3-D block: z = SE(BN(Conv(ReLU(BN(Conv(x)))))), y = ReLU(z + s(x)).
/// The first convolution and the shortcut carry the stride (applied to T, H
/// and W alike); the shortcut is a 1x1x1 convolution + BN whenever channels
/// or stride change, identity otherwise. Convolutions are bias-free (BN
/// follows each).
template <typename S>
struct ResBlock3d {
    Conv3d<S> conv1;
    BatchNorm3d<S> bn1;
    Conv3d<S> conv2;
    BatchNorm3d<S> bn2;
    SEBlock<S> se;
    std::unique_ptr<Conv3d<S>> shortcut_conv;
    std::unique_ptr<BatchNorm3d<S>> shortcut_bn;

    ResBlock3d(int64_t c_in, int64_t c_out, int64_t stride, int64_t se_ratio, InitStream& init_rng)
        : conv1(c_in, c_out, {3, 3, 3}, {stride, stride, stride}, {1, 1, 1}, false, init_rng),
          bn1(c_out),
          conv2(c_out, c_out, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, false, init_rng),
          bn2(c_out),
          se(c_out, se_ratio, init_rng) {
        if (c_in != c_out || stride != 1) {
            shortcut_conv = std::make_unique<Conv3d<S>>(
                c_in, c_out, Dims3{1, 1, 1}, Dims3{stride, stride, stride}, Dims3{0, 0, 0}, false,
                init_rng);
            shortcut_bn = std::make_unique<BatchNorm3d<S>>(c_out);
        }
    }

    TensorT<S> forward(Ctx<S>& ctx, const TensorT<S>& x) {
        TensorT<S> h = ops::relu(ctx, bn1.forward(ctx, conv1.forward(ctx, x)));
        TensorT<S> z = se.forward(ctx, bn2.forward(ctx, conv2.forward(ctx, h)));
        TensorT<S> sc = shortcut_conv ? shortcut_bn->forward(ctx, shortcut_conv->forward(ctx, x)) : x;
        return ops::relu(ctx, ops::add(ctx, z, sc));
    }

    void collect(const std::string& prefix, ParamList<S>& params, ParamList<S>& buffers) {
        conv1.collect(join_name(prefix, "conv1"), params, buffers);
        bn1.collect(join_name(prefix, "bn1"), params, buffers);
        conv2.collect(join_name(prefix, "conv2"), params, buffers);
        bn2.collect(join_name(prefix, "bn2"), params, buffers);
        se.collect(join_name(prefix, "se"), params, buffers);
        if (shortcut_conv) {
            shortcut_conv->collect(join_name(prefix, "shortcut.conv"), params, buffers);
            shortcut_bn->collect(join_name(prefix, "shortcut.bn"), params, buffers);
        }
    }
};

/// Scaled dot-product self-attention with h heads over B x T x D tokens; no
/// positional encodings anywhere. Dropout (train mode) on attention weights.
template <typename S>
struct MultiheadSelfAttention {
    Linear<S> wq, wk, wv, wo;
    int64_t dim, heads;
    double p_drop;

    MultiheadSelfAttention(int64_t d, int64_t h, double p, InitStream& init_rng)
        : wq(d, d, true, init_rng, Init::kXavier),
          wk(d, d, true, init_rng, Init::kXavier),
          wv(d, d, true, init_rng, Init::kXavier),
          wo(d, d, true, init_rng, Init::kXavier),
          dim(d),
          heads(h),
          p_drop(p) {
        if (d % h != 0)
            throw ConfigError("attention width " + std::to_string(d) + " not divisible by " +
                              std::to_string(h) + " heads");
    }

    TensorT<S> forward(Ctx<S>& ctx, const TensorT<S>& x) const {
        if (x.ndim() != 3 || x.extent(2) != dim)
            throw ShapeError("attention expects B x T x " + std::to_string(dim) + ", got " +
                             shape_str(x.shape()));
        const int64_t b = x.extent(0), t = x.extent(1), dk = dim / heads;
        auto split = [&](const TensorT<S>& m) {
            TensorT<S> r = ops::reshape(ctx, m, {b, t, heads, dk});
            r = ops::permute_0213(ctx, r);  // B x h x T x dk
            return ops::reshape(ctx, r, {b * heads, t, dk});
        };
        TensorT<S> q = split(wq.forward(ctx, x));
        TensorT<S> k = split(wk.forward(ctx, x));
        TensorT<S> v = split(wv.forward(ctx, x));
        TensorT<S> scores = ops::bmm(ctx, q, k, false, true);  // (B h) x T x T
        scores = ops::scale(ctx, scores, static_cast<S>(1.0 / std::sqrt(static_cast<double>(dk))));
        TensorT<S> attn = ops::softmax_last(ctx, scores);
        attn = ops::dropout(ctx, attn, p_drop);
        TensorT<S> mixed = ops::bmm(ctx, attn, v, false, false);  // (B h) x T x dk
        mixed = ops::reshape(ctx, mixed, {b, heads, t, dk});
        mixed = ops::permute_0213(ctx, mixed);  // B x T x h x dk
        mixed = ops::reshape(ctx, mixed, {b, t, dim});
        return wo.forward(ctx, mixed);
    }

    void collect(const std::string& prefix, ParamList<S>& params, ParamList<S>& buffers) {
        wq.collect(join_name(prefix, "wq"), params, buffers);
        wk.collect(join_name(prefix, "wk"), params, buffers);
        wv.collect(join_name(prefix, "wv"), params, buffers);
        wo.collect(join_name(prefix, "wo"), params, buffers);
    }
};

/// Pre-LN encoder layer: y1 = x + Drop(MHSA(LN(x))); y2 = y1 + Drop(FFN(LN(y1)))
/// with FFN = Linear(D -> Dff) -> ReLU -> Linear(Dff -> D).
template <typename S>
struct TransformerEncoderLayer {
    LayerNorm<S> ln1;
    MultiheadSelfAttention<S> attn;
    LayerNorm<S> ln2;
    Linear<S> ffn1;
    Linear<S> ffn2;
    double p_drop;

    TransformerEncoderLayer(int64_t d, int64_t h, int64_t d_ff, double p, InitStream& init_rng)
        : ln1(d),
          attn(d, h, p, init_rng),
          ln2(d),
          ffn1(d, d_ff, true, init_rng, Init::kKaimingRelu),
          ffn2(d_ff, d, true, init_rng, Init::kXavier),
          p_drop(p) {}

    TensorT<S> forward(Ctx<S>& ctx, const TensorT<S>& x) const {
        TensorT<S> a = attn.forward(ctx, ln1.forward(ctx, x));
        TensorT<S> y1 = ops::add(ctx, x, ops::dropout(ctx, a, p_drop));
        TensorT<S> f = ops::relu(ctx, ffn1.forward(ctx, ln2.forward(ctx, y1)));
        f = ffn2.forward(ctx, f);
        return ops::add(ctx, y1, ops::dropout(ctx, f, p_drop));
    }

    void collect(const std::string& prefix, ParamList<S>& params, ParamList<S>& buffers) {
        ln1.collect(join_name(prefix, "ln1"), params, buffers);
        attn.collect(join_name(prefix, "attn"), params, buffers);
        ln2.collect(join_name(prefix, "ln2"), params, buffers);
        ffn1.collect(join_name(prefix, "ffn1"), params, buffers);
        ffn2.collect(join_name(prefix, "ffn2"), params, buffers);
    }
};

}  // namespace lsp::nn
