#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "lsp/kernels.hpp"
#include "lsp/rng.hpp"
#include "lsp/tape.hpp"
#include "lsp/tensor.hpp"

// Differentiable operations. Each function computes the forward result with
// the kernels in kernels.hpp and, when a tape is attached and an input is
// tracked, records a closure that accumulates gradients for the tracked
// inputs. Gradient writes always go through GradTape::grad_buf so fan-out
// adds up naturally.
namespace lsp::ops {

using kernels::Conv3dSpec;
using kernels::Dims3;

// ---------------------------------------------------------------------------
// convolution / pooling

template <typename S>
TensorT<S> conv3d(Ctx<S>& ctx, const TensorT<S>& x, const TensorT<S>& weight,
                  const TensorT<S>& bias, Dims3 stride, Dims3 pad) {
    const Conv3dSpec d = Conv3dSpec::make(x.shape(), weight.shape(), stride, pad);
    if (bias.defined() && bias.numel() != d.c_out)
        throw ShapeError("conv3d bias must have " + std::to_string(d.c_out) + " entries, got " +
                         std::to_string(bias.numel()));
    TensorT<S> y = TensorT<S>::empty(d.out_shape());
    // Persistent scratch: the column tiles are reused across every conv call
    // on this thread instead of being reallocated per step.
    static thread_local std::vector<S> col;
    kernels::conv3d_forward_im2col(d, x.data(), weight.data(), bias.defined() ? bias.data() : nullptr,
                                   y.data(), col);
    if (ctx.recording({&x, &weight, &bias})) {
        ctx.tape->record("conv3d", y, {&x, &weight, &bias}, [x, weight, bias, y, d](GradTape<S>& tape) {
            const auto& gy = tape.grad_checked(y);
            S* gx = tape.tracks(x.id()) ? tape.grad_buf(x).data() : nullptr;
            S* gw = tape.tracks(weight.id()) ? tape.grad_buf(weight).data() : nullptr;
            if (gx || gw) {
                static thread_local std::vector<S> bcol, bgcol;
                kernels::conv3d_backward_im2col_tiled(d, x.data(), weight.data(), gy.data(), gx,
                                                      gw, bcol, bgcol);
            }
            if (bias.defined() && tape.tracks(bias.id())) {
                std::vector<S> gb(static_cast<size_t>(d.c_out));
                kernels::conv3d_backward_bias(d, gy.data(), gb.data());
                S* acc = tape.grad_buf(bias).data();
                for (int64_t i = 0; i < d.c_out; ++i) acc[i] += gb[i];
            }
        });
    }
    return y;
}

template <typename S>
TensorT<S> maxpool3d(Ctx<S>& ctx, const TensorT<S>& x, Dims3 k) {
    if (x.ndim() != 5) throw ShapeError("maxpool3d input must be 5-D, got " + shape_str(x.shape()));
    const int64_t b = x.extent(0), c = x.extent(1), t = x.extent(2), h = x.extent(3),
                  w = x.extent(4);
    if (t < k.t || h < k.h || w < k.w)
        throw ShapeError("maxpool3d window " + std::to_string(k.t) + "x" + std::to_string(k.h) +
                         "x" + std::to_string(k.w) + " larger than input " + shape_str(x.shape()));
    // Floor division: trailing elements that do not fill a window are dropped.
    const Shape out_shape{b, c, t / k.t, h / k.h, w / k.w};
    TensorT<S> y = TensorT<S>::empty(out_shape);
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(numel_of(out_shape)));
    kernels::maxpool3d_forward(b * c, t, h, w, k, x.data(), y.data(), argmax->data());
    if (ctx.recording({&x})) {
        const int64_t in_vol = t * h * w;
        const int64_t out_vol = numel_of(out_shape) / (b * c);
        ctx.tape->record("maxpool3d", y, {&x}, [x, y, argmax, b, c, in_vol, out_vol](GradTape<S>& tape) {
            if (!tape.tracks(x.id())) return;
            const auto& gy = tape.grad_checked(y);
            kernels::maxpool3d_backward(b * c, in_vol, out_vol, gy.data(), argmax->data(),
                                        tape.grad_buf(x).data());
        });
    }
    return y;
}

/// Mean over H and W of a B x C x T x H x W map, giving B x C x T.
template <typename S>
TensorT<S> avg_pool_spatial(Ctx<S>& ctx, const TensorT<S>& x) {
    if (x.ndim() != 5)
        throw ShapeError("avg_pool_spatial input must be 5-D, got " + shape_str(x.shape()));
    const int64_t rows = x.extent(0) * x.extent(1) * x.extent(2);
    const int64_t reduce = x.extent(3) * x.extent(4);
    TensorT<S> y = TensorT<S>::empty({x.extent(0), x.extent(1), x.extent(2)});
    kernels::mean_rows(rows, reduce, x.data(), y.data());
    if (ctx.recording({&x})) {
        ctx.tape->record("avg_pool_spatial", y, {&x}, [x, y, rows, reduce](GradTape<S>& tape) {
            if (!tape.tracks(x.id())) return;
            kernels::mean_rows_backward(rows, reduce, tape.grad_checked(y).data(),
                                        tape.grad_buf(x).data());
        });
    }
    return y;
}

/// Mean over T, H and W of a B x C x T x H x W map, giving B x C x 1 x 1 x 1.
template <typename S>
TensorT<S> avg_pool_full(Ctx<S>& ctx, const TensorT<S>& x) {
    if (x.ndim() != 5)
        throw ShapeError("avg_pool_full input must be 5-D, got " + shape_str(x.shape()));
    const int64_t rows = x.extent(0) * x.extent(1);
    const int64_t reduce = x.extent(2) * x.extent(3) * x.extent(4);
    TensorT<S> y = TensorT<S>::empty({x.extent(0), x.extent(1), 1, 1, 1});
    kernels::mean_rows(rows, reduce, x.data(), y.data());
    if (ctx.recording({&x})) {
        ctx.tape->record("avg_pool_full", y, {&x}, [x, y, rows, reduce](GradTape<S>& tape) {
            if (!tape.tracks(x.id())) return;
            kernels::mean_rows_backward(rows, reduce, tape.grad_checked(y).data(),
                                        tape.grad_buf(x).data());
        });
    }
    return y;
}

/// Mean over axis 1 of a 3-D tensor (temporal pooling of B x T x D tokens).
template <typename S>
TensorT<S> mean_axis1(Ctx<S>& ctx, const TensorT<S>& x) {
    if (x.ndim() != 3) throw ShapeError("mean_axis1 input must be 3-D, got " + shape_str(x.shape()));
    const int64_t n0 = x.extent(0), n1 = x.extent(1), n2 = x.extent(2);
    TensorT<S> y = TensorT<S>::empty({n0, n2});
    kernels::mean_axis1(n0, n1, n2, x.data(), y.data());
    if (ctx.recording({&x})) {
        ctx.tape->record("mean_axis1", y, {&x}, [x, y, n0, n1, n2](GradTape<S>& tape) {
            if (!tape.tracks(x.id())) return;
            kernels::mean_axis1_backward(n0, n1, n2, tape.grad_checked(y).data(),
                                         tape.grad_buf(x).data());
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// linear / matmul

/// y = x W^T + b applied to the last axis; leading axes are flattened.
template <typename S>
TensorT<S> linear(Ctx<S>& ctx, const TensorT<S>& x, const TensorT<S>& weight,
                  const TensorT<S>& bias) {
    if (weight.ndim() != 2) throw ShapeError("linear weight must be 2-D");
    const int64_t d_out = weight.extent(0), d_in = weight.extent(1);
    if (x.extent(x.ndim() - 1) != d_in)
        throw ShapeError("linear input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
    const int64_t rows = x.numel() / d_in;
    Shape out_shape = x.shape();
    out_shape.back() = d_out;
    TensorT<S> y = TensorT<S>::empty(out_shape);
    kernels::linear_forward(rows, d_in, d_out, x.data(), weight.data(),
                            bias.defined() ? bias.data() : nullptr, y.data());
    if (ctx.recording({&x, &weight, &bias})) {
        ctx.tape->record("linear", y, {&x, &weight, &bias},
                         [x, weight, bias, y, rows, d_in, d_out](GradTape<S>& tape) {
                             const auto& gy = tape.grad_checked(y);
                             S* gx = tape.tracks(x.id()) ? tape.grad_buf(x).data() : nullptr;
                             S* gw = tape.tracks(weight.id()) ? tape.grad_buf(weight).data() : nullptr;
                             S* gb = bias.defined() && tape.tracks(bias.id())
                                         ? tape.grad_buf(bias).data()
                                         : nullptr;
                             kernels::linear_backward(rows, d_in, d_out, x.data(), weight.data(),
                                                      gy.data(), gx, gw, gb);
                         });
    }
    return y;
}

/// Batched matmul of 3-D tensors: out[i] = op(a[i]) * op(b[i]).
template <typename S>
TensorT<S> bmm(Ctx<S>& ctx, const TensorT<S>& a, const TensorT<S>& b, bool trans_a, bool trans_b) {
    if (a.ndim() != 3 || b.ndim() != 3) throw ShapeError("bmm expects 3-D tensors");
    const int64_t n = a.extent(0);
    if (b.extent(0) != n) throw ShapeError("bmm batch mismatch");
    const int64_t m = trans_a ? a.extent(2) : a.extent(1);
    const int64_t k = trans_a ? a.extent(1) : a.extent(2);
    const int64_t kb = trans_b ? b.extent(2) : b.extent(1);
    const int64_t p = trans_b ? b.extent(1) : b.extent(2);
    if (k != kb)
        throw ShapeError("bmm inner dims differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    TensorT<S> y = TensorT<S>::empty({n, m, p});
    kernels::bmm(n, m, k, p, trans_a, trans_b, a.data(), b.data(), S(0), y.data());
    if (ctx.recording({&a, &b})) {
        ctx.tape->record("bmm", y, {&a, &b},
                         [a, b, y, n, m, k, p, trans_a, trans_b](GradTape<S>& tape) {
                             const auto& gy = tape.grad_checked(y);
                             if (tape.tracks(a.id())) {
                                 S* ga = tape.grad_buf(a).data();
                                 if (!trans_a)  // dA = G * op(B)^T
                                     kernels::bmm(n, m, p, k, false, !trans_b, gy.data(), b.data(),
                                                  S(1), ga);
                                 else  // stored A is k x m: dA = op(B) * G^T
                                     kernels::bmm(n, k, p, m, trans_b, true, b.data(), gy.data(),
                                                  S(1), ga);
                             }
                             if (tape.tracks(b.id())) {
                                 S* gb = tape.grad_buf(b).data();
                                 if (!trans_b)  // dB = op(A)^T * G
                                     kernels::bmm(n, k, m, p, !trans_a, false, a.data(), gy.data(),
                                                  S(1), gb);
                                 else  // stored B is p x k: dB = G^T * op(A)
                                     kernels::bmm(n, p, m, k, true, trans_a, gy.data(), a.data(),
                                                  S(1), gb);
                             }
                         });
    }
    return y;
}

// ---------------------------------------------------------------------------
// shape movement

template <typename S>
TensorT<S> reshape(Ctx<S>& ctx, const TensorT<S>& x, Shape shape) {
    TensorT<S> y = x.reshaped(std::move(shape));
    if (ctx.recording({&x})) {
        ctx.tape->record("reshape", y, {&x}, [x, y](GradTape<S>& tape) {
            if (!tape.tracks(x.id())) return;
            const auto& gy = tape.grad_checked(y);
            auto& gx = tape.grad_buf(x);
            const S* src = gy.data();
            S* dst = gx.data();
            const int64_t nn = gx.numel();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < nn; ++i) dst[i] += src[i];
        });
    }
    return y;
}

/// Swap axes 1 and 2 of a 3-D tensor (copying).
template <typename S>
TensorT<S> transpose_12(Ctx<S>& ctx, const TensorT<S>& x) {
    if (x.ndim() != 3) throw ShapeError("transpose_12 expects a 3-D tensor");
    const int64_t n0 = x.extent(0), n1 = x.extent(1), n2 = x.extent(2);
    TensorT<S> y = TensorT<S>::empty({n0, n2, n1});
    const S* src = x.data();
    S* dst = y.data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n0; ++i)
        for (int64_t j = 0; j < n1; ++j)
            for (int64_t l = 0; l < n2; ++l)
                dst[(i * n2 + l) * n1 + j] = src[(i * n1 + j) * n2 + l];
    if (ctx.recording({&x})) {
        ctx.tape->record("transpose_12", y, {&x}, [x, y, n0, n1, n2](GradTape<S>& tape) {
            if (!tape.tracks(x.id())) return;
            const S* g = tape.grad_checked(y).data();
            S* out = tape.grad_buf(x).data();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < n0; ++i)
                for (int64_t j = 0; j < n1; ++j)
                    for (int64_t l = 0; l < n2; ++l)
                        out[(i * n1 + j) * n2 + l] += g[(i * n2 + l) * n1 + j];
        });
    }
    return y;
}

/// Swap axes 1 and 2 of a 4-D tensor (copying); its own inverse.
template <typename S>
TensorT<S> permute_0213(Ctx<S>& ctx, const TensorT<S>& x) {
    if (x.ndim() != 4) throw ShapeError("permute_0213 expects a 4-D tensor");
    const int64_t n0 = x.extent(0), n1 = x.extent(1), n2 = x.extent(2), n3 = x.extent(3);
    TensorT<S> y = TensorT<S>::empty({n0, n2, n1, n3});
    const S* src = x.data();
    S* dst = y.data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n0; ++i)
        for (int64_t j = 0; j < n1; ++j)
            for (int64_t l = 0; l < n2; ++l)
                for (int64_t q = 0; q < n3; ++q)
                    dst[((i * n2 + l) * n1 + j) * n3 + q] = src[((i * n1 + j) * n2 + l) * n3 + q];
    if (ctx.recording({&x})) {
        ctx.tape->record("permute_0213", y, {&x}, [x, y, n0, n1, n2, n3](GradTape<S>& tape) {
            if (!tape.tracks(x.id())) return;
            const S* g = tape.grad_checked(y).data();
            S* out = tape.grad_buf(x).data();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < n0; ++i)
                for (int64_t j = 0; j < n1; ++j)
                    for (int64_t l = 0; l < n2; ++l)
                        for (int64_t q = 0; q < n3; ++q)
                            out[((i * n1 + j) * n2 + l) * n3 + q] +=
                                g[((i * n2 + l) * n1 + j) * n3 + q];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// elementwise

namespace detail {

template <typename S, typename Fwd, typename Bwd>
TensorT<S> unary(Ctx<S>& ctx, const TensorT<S>& x, const char* name, Fwd fwd, Bwd bwd) {
    TensorT<S> y = TensorT<S>::empty(x.shape());
    const S* in = x.data();
    S* out = y.data();
    const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) out[i] = fwd(in[i]);
    if (ctx.recording({&x})) {
        ctx.tape->record(name, y, {&x}, [x, y, bwd, n](GradTape<S>& tape) {
            if (!tape.tracks(x.id())) return;
            const S* g = tape.grad_checked(y).data();
            const S* in2 = x.data();
            const S* out2 = y.data();
            S* gx = tape.grad_buf(x).data();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * bwd(in2[i], out2[i]);
        });
    }
    return y;
}

}  // namespace detail

template <typename S>
TensorT<S> relu(Ctx<S>& ctx, const TensorT<S>& x) {
    return detail::unary(
        ctx, x, "relu", [](S v) { return v > S(0) ? v : S(0); },
        [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
TensorT<S> sigmoid(Ctx<S>& ctx, const TensorT<S>& x) {
    return detail::unary(
        ctx, x, "sigmoid", [](S v) { return S(1) / (S(1) + std::exp(-v)); },
        [](S, S o) { return o * (S(1) - o); });
}

/// Exact (erf-based) GELU.
template <typename S>
TensorT<S> gelu(Ctx<S>& ctx, const TensorT<S>& x) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    return detail::unary(
        ctx, x, "gelu",
        [](S v) {
            const double vd = static_cast<double>(v);
            return static_cast<S>(0.5 * vd * (1.0 + std::erf(vd * kInvSqrt2)));
        },
        [](S v, S) {
            const double vd = static_cast<double>(v);
            const double cdf = 0.5 * (1.0 + std::erf(vd * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * vd * vd);
            return static_cast<S>(cdf + vd * pdf);
        });
}

template <typename S>
TensorT<S> scale(Ctx<S>& ctx, const TensorT<S>& x, S factor) {
    return detail::unary(
        ctx, x, "scale", [factor](S v) { return v * factor; },
        [factor](S, S) { return factor; });
}

template <typename S>
TensorT<S> add(Ctx<S>& ctx, const TensorT<S>& a, const TensorT<S>& b) {
    if (!same_shape(a.shape(), b.shape()))
        throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    TensorT<S> y = TensorT<S>::empty(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* out = y.data();
    const int64_t n = a.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
    if (ctx.recording({&a, &b})) {
        ctx.tape->record("add", y, {&a, &b}, [a, b, y, n](GradTape<S>& tape) {
            const S* g = tape.grad_checked(y).data();
            for (const auto* t : {&a, &b}) {
                if (!tape.tracks(t->id())) continue;
                S* gt = tape.grad_buf(*t).data();
#pragma omp parallel for schedule(static)
                for (int64_t i = 0; i < n; ++i) gt[i] += g[i];
            }
        });
    }
    return y;
}

template <typename S>
TensorT<S> mul(Ctx<S>& ctx, const TensorT<S>& a, const TensorT<S>& b) {
    if (!same_shape(a.shape(), b.shape()))
        throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    TensorT<S> y = TensorT<S>::empty(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* out = y.data();
    const int64_t n = a.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
    if (ctx.recording({&a, &b})) {
        ctx.tape->record("mul", y, {&a, &b}, [a, b, y, n](GradTape<S>& tape) {
            const S* g = tape.grad_checked(y).data();
            if (tape.tracks(a.id())) {
                S* ga = tape.grad_buf(a).data();
                const S* pb2 = b.data();
#pragma omp parallel for schedule(static)
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
            }
            if (tape.tracks(b.id())) {
                S* gb = tape.grad_buf(b).data();
                const S* pa2 = a.data();
#pragma omp parallel for schedule(static)
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
            }
        });
    }
    return y;
}

/// Multiply a B x C x T x H x W map by per-(batch, channel) factors s (B x C).
template <typename S>
TensorT<S> channel_scale(Ctx<S>& ctx, const TensorT<S>& x, const TensorT<S>& s) {
    if (x.ndim() != 5 || s.ndim() != 2 || s.extent(0) != x.extent(0) || s.extent(1) != x.extent(1))
        throw ShapeError("channel_scale expects x B x C x T x H x W and s B x C, got " +
                         shape_str(x.shape()) + " and " + shape_str(s.shape()));
    const int64_t bc = x.extent(0) * x.extent(1);
    const int64_t vol = x.numel() / bc;
    TensorT<S> y = TensorT<S>::empty(x.shape());
    const S* in = x.data();
    const S* sc = s.data();
    S* out = y.data();
#pragma omp parallel for schedule(static)
    for (int64_t m = 0; m < bc; ++m) {
        const S f = sc[m];
        for (int64_t i = 0; i < vol; ++i) out[m * vol + i] = in[m * vol + i] * f;
    }
    if (ctx.recording({&x, &s})) {
        ctx.tape->record("channel_scale", y, {&x, &s}, [x, s, y, bc, vol](GradTape<S>& tape) {
            const S* g = tape.grad_checked(y).data();
            if (tape.tracks(x.id())) {
                S* gx = tape.grad_buf(x).data();
                const S* sc2 = s.data();
#pragma omp parallel for schedule(static)
                for (int64_t m = 0; m < bc; ++m) {
                    const S f = sc2[m];
                    for (int64_t i = 0; i < vol; ++i) gx[m * vol + i] += g[m * vol + i] * f;
                }
            }
            if (tape.tracks(s.id())) {
                S* gs = tape.grad_buf(s).data();
                const S* in2 = x.data();
#pragma omp parallel for schedule(static)
                for (int64_t m = 0; m < bc; ++m) {
                    S acc = S(0);
                    for (int64_t i = 0; i < vol; ++i) acc += g[m * vol + i] * in2[m * vol + i];
                    gs[m] += acc;
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// softmax / dropout

template <typename S>
TensorT<S> softmax_last(Ctx<S>& ctx, const TensorT<S>& x) {
    const int64_t d = x.extent(x.ndim() - 1);
    const int64_t rows = x.numel() / d;
    TensorT<S> y = TensorT<S>::empty(x.shape());
    kernels::softmax_forward(rows, d, x.data(), y.data());
    if (ctx.recording({&x})) {
        ctx.tape->record("softmax", y, {&x}, [x, y, rows, d](GradTape<S>& tape) {
            if (!tape.tracks(x.id())) return;
            kernels::softmax_backward(rows, d, y.data(), tape.grad_checked(y).data(),
                                      tape.grad_buf(x).data());
        });
    }
    return y;
}

/// Inverted dropout: keeps each element with probability 1-p and rescales by
/// 1/(1-p) so the expectation is unchanged. Identity outside train mode.
/// Draws come from the context's counter-addressed stream, so a forward pass
/// is reproducible from the stream's starting state.
template <typename S>
TensorT<S> dropout(Ctx<S>& ctx, const TensorT<S>& x, double p) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
    if (ctx.mode != Mode::kTrain || p == 0.0) return x;
    if (!ctx.dropout_rng) throw ConfigError("dropout in train mode needs an RNG stream");
    const int64_t n = x.numel();
    const uint64_t base = ctx.dropout_rng->counter;
    ctx.dropout_rng->skip(static_cast<uint64_t>(n));
    auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(n));
    const S inv_keep = static_cast<S>(1.0 / (1.0 - p));
    TensorT<S> y = TensorT<S>::empty(x.shape());
    const S* in = x.data();
    S* out = y.data();
    uint8_t* mk = mask->data();
    const uint64_t seed = ctx.dropout_rng->seed;
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        const bool keep = rng::uniform01(seed, base + static_cast<uint64_t>(i)) >= p;
        mk[i] = keep ? 1 : 0;
        out[i] = keep ? in[i] * inv_keep : S(0);
    }
    if (ctx.recording({&x})) {
        ctx.tape->record("dropout", y, {&x}, [x, y, mask, inv_keep, n](GradTape<S>& tape) {
            if (!tape.tracks(x.id())) return;
            const S* g = tape.grad_checked(y).data();
            const uint8_t* mk2 = mask->data();
            S* gx = tape.grad_buf(x).data();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < n; ++i)
                if (mk2[i]) gx[i] += g[i] * inv_keep;
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// normalization ops

/// Batch norm statistics computed from the batch (train mode). Writes the
/// batch mean and biased variance so the layer can update its running stats.
template <typename S>
TensorT<S> batchnorm_train(Ctx<S>& ctx, const TensorT<S>& x, const TensorT<S>& gamma,
                           const TensorT<S>& beta, S eps, std::vector<S>* batch_mean = nullptr,
                           std::vector<S>* batch_var = nullptr) {
    if (x.ndim() != 5) throw ShapeError("batchnorm expects a 5-D input, got " + shape_str(x.shape()));
    const int64_t b = x.extent(0), c = x.extent(1);
    const int64_t vol = x.numel() / (b * c);
    if (b * vol < 2)
        throw ShapeError("batchnorm needs at least 2 values per channel, got batch " +
                         shape_str(x.shape()));
    if (gamma.numel() != c || beta.numel() != c)
        throw ShapeError("batchnorm affine params must have " + std::to_string(c) + " entries");
    auto mean = std::make_shared<std::vector<S>>(static_cast<size_t>(c));
    std::vector<S> var(static_cast<size_t>(c));
    kernels::bn_stats(b, c, vol, x.data(), mean->data(), var.data());
    auto invstd = std::make_shared<std::vector<S>>(static_cast<size_t>(c));
    for (int64_t i = 0; i < c; ++i)
        (*invstd)[static_cast<size_t>(i)] =
            S(1) / std::sqrt(var[static_cast<size_t>(i)] + eps);
    TensorT<S> y = TensorT<S>::empty(x.shape());
    kernels::bn_apply(b, c, vol, x.data(), mean->data(), invstd->data(), gamma.data(), beta.data(),
                      y.data());
    if (batch_mean) *batch_mean = *mean;
    if (batch_var) *batch_var = var;
    if (ctx.recording({&x, &gamma, &beta})) {
        ctx.tape->record("batchnorm", y, {&x, &gamma, &beta},
                         [x, gamma, beta, y, mean, invstd, b, c, vol](GradTape<S>& tape) {
                             const auto& gy = tape.grad_checked(y);
                             S* gx = tape.tracks(x.id()) ? tape.grad_buf(x).data() : nullptr;
                             S* gg = tape.tracks(gamma.id()) ? tape.grad_buf(gamma).data() : nullptr;
                             S* gb = tape.tracks(beta.id()) ? tape.grad_buf(beta).data() : nullptr;
                             kernels::bn_backward(b, c, vol, x.data(), mean->data(), invstd->data(),
                                                  gamma.data(), gy.data(), gx, gg, gb);
                         });
    }
    return y;
}

/// Batch norm using fixed (running) statistics — a per-channel affine map.
template <typename S>
TensorT<S> batchnorm_eval(Ctx<S>& ctx, const TensorT<S>& x, const TensorT<S>& gamma,
                          const TensorT<S>& beta, const TensorT<S>& running_mean,
                          const TensorT<S>& running_var, S eps) {
    if (x.ndim() != 5) throw ShapeError("batchnorm expects a 5-D input, got " + shape_str(x.shape()));
    const int64_t b = x.extent(0), c = x.extent(1);
    const int64_t vol = x.numel() / (b * c);
    if (running_mean.numel() != c || running_var.numel() != c)
        throw ShapeError("batchnorm running stats must have " + std::to_string(c) + " entries");
    auto invstd = std::make_shared<std::vector<S>>(static_cast<size_t>(c));
    for (int64_t i = 0; i < c; ++i)
        (*invstd)[static_cast<size_t>(i)] = S(1) / std::sqrt(running_var.at(i) + eps);
    auto mean = std::make_shared<std::vector<S>>(running_mean.data(), running_mean.data() + c);
    TensorT<S> y = TensorT<S>::empty(x.shape());
    kernels::bn_apply(b, c, vol, x.data(), mean->data(), invstd->data(), gamma.data(), beta.data(),
                      y.data());
    if (ctx.recording({&x, &gamma, &beta})) {
        ctx.tape->record(
            "batchnorm_eval", y, {&x, &gamma, &beta},
            [x, gamma, beta, y, mean, invstd, b, c, vol](GradTape<S>& tape) {
                const S* g = tape.grad_checked(y).data();
                // Fixed stats: y = gamma * (x - m) * invstd + beta, so
                // dx = g * gamma * invstd elementwise; dgamma = sum g * xhat
                // with xhat recomputed from x and the saved statistics.
                if (tape.tracks(x.id())) {
                    S* gx = tape.grad_buf(x).data();
                    const S* gm = gamma.data();
                    const S* is = invstd->data();
#pragma omp parallel for collapse(2) schedule(static)
                    for (int64_t bi = 0; bi < b; ++bi)
                        for (int64_t ci = 0; ci < c; ++ci) {
                            const S f = gm[ci] * is[ci];
                            const int64_t off = (bi * c + ci) * vol;
                            for (int64_t i = 0; i < vol; ++i) gx[off + i] += g[off + i] * f;
                        }
                }
                if (tape.tracks(gamma.id()) || tape.tracks(beta.id())) {
                    const S* in = x.data();
#pragma omp parallel for schedule(static)
                    for (int64_t ci = 0; ci < c; ++ci) {
                        const S m = (*mean)[static_cast<size_t>(ci)];
                        const S is = (*invstd)[static_cast<size_t>(ci)];
                        S sg = S(0), sb = S(0);
                        for (int64_t bi = 0; bi < b; ++bi) {
                            const int64_t off = (bi * c + ci) * vol;
                            for (int64_t i = 0; i < vol; ++i) {
                                sg += g[off + i] * ((in[off + i] - m) * is);
                                sb += g[off + i];
                            }
                        }
                        if (tape.tracks(gamma.id())) tape.grad_buf(gamma).data()[ci] += sg;
                        if (tape.tracks(beta.id())) tape.grad_buf(beta).data()[ci] += sb;
                    }
                }
            });
    }
    return y;
}

/// Layer norm over the last axis.
template <typename S>
TensorT<S> layernorm(Ctx<S>& ctx, const TensorT<S>& x, const TensorT<S>& gamma,
                     const TensorT<S>& beta, S eps) {
    const int64_t d = x.extent(x.ndim() - 1);
    const int64_t rows = x.numel() / d;
    if (gamma.numel() != d || beta.numel() != d)
        throw ShapeError("layernorm affine params must have " + std::to_string(d) + " entries");
    auto xhat = std::make_shared<TensorT<S>>(TensorT<S>::empty(x.shape()));
    auto invstd = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
    TensorT<S> y = TensorT<S>::empty(x.shape());
    kernels::layernorm_forward(rows, d, eps, x.data(), gamma.data(), beta.data(), xhat->data(),
                               invstd->data(), y.data());
    if (ctx.recording({&x, &gamma, &beta})) {
        ctx.tape->record("layernorm", y, {&x, &gamma, &beta},
                         [x, gamma, beta, y, xhat, invstd, rows, d](GradTape<S>& tape) {
                             const auto& gy = tape.grad_checked(y);
                             S* gx = tape.tracks(x.id()) ? tape.grad_buf(x).data() : nullptr;
                             S* gg = tape.tracks(gamma.id()) ? tape.grad_buf(gamma).data() : nullptr;
                             S* gb = tape.tracks(beta.id()) ? tape.grad_buf(beta).data() : nullptr;
                             kernels::layernorm_backward(rows, d, xhat->data(), invstd->data(),
                                                         gamma.data(), gy.data(), gx, gg, gb);
                         });
    }
    return y;
}

// ---------------------------------------------------------------------------
// loss / reductions

/// Mean cross-entropy of logits (rows x classes) against integer labels,
/// computed with the log-sum-exp trick. Gradient is (softmax - onehot)/rows.
template <typename S>
TensorT<S> cross_entropy_with_logits(Ctx<S>& ctx, const TensorT<S>& logits,
                                     const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw ShapeError("cross entropy expects 2-D logits");
    const int64_t rows = logits.extent(0), classes = logits.extent(1);
    if (static_cast<int64_t>(labels.size()) != rows)
        throw ShapeError("cross entropy got " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(rows) + " rows");
    for (int v : labels)
        if (v < 0 || v >= classes)
            throw DataError("label " + std::to_string(v) + " outside [0, " +
                            std::to_string(classes) + ")");
    auto probs = std::make_shared<TensorT<S>>(TensorT<S>::empty(logits.shape()));
    kernels::softmax_forward(rows, classes, logits.data(), probs->data());
    double total = 0.0;  // serial reduction, fixed order
    const S* lg = logits.data();
    for (int64_t r = 0; r < rows; ++r) {
        const S* row = lg + r * classes;
        S mx = row[0];
        for (int64_t j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
        double lse = 0.0;
        for (int64_t j = 0; j < classes; ++j) lse += std::exp(static_cast<double>(row[j] - mx));
        total += std::log(lse) + static_cast<double>(mx) - static_cast<double>(row[labels[static_cast<size_t>(r)]]);
    }
    TensorT<S> loss = TensorT<S>::scalar(static_cast<S>(total / static_cast<double>(rows)));
    if (ctx.recording({&logits})) {
        auto lab = std::make_shared<std::vector<int>>(labels);
        ctx.tape->record("cross_entropy", loss, {&logits},
                         [logits, loss, probs, lab, rows, classes](GradTape<S>& tape) {
                             if (!tape.tracks(logits.id())) return;
                             const S g0 = tape.grad_checked(loss).at(0);
                             S* gx = tape.grad_buf(logits).data();
                             const S* pr = probs->data();
                             const S inv = g0 / static_cast<S>(rows);
#pragma omp parallel for schedule(static)
                             for (int64_t r = 0; r < rows; ++r) {
                                 const int lbl = (*lab)[static_cast<size_t>(r)];
                                 for (int64_t j = 0; j < classes; ++j) {
                                     S v = pr[r * classes + j];
                                     if (j == lbl) v -= S(1);
                                     gx[r * classes + j] += inv * v;
                                 }
                             }
                         });
    }
    return loss;
}

/// Scalar dot product of x with fixed weights; handy as a loss surrogate in
/// gradient tests.
template <typename S>
TensorT<S> weighted_sum(Ctx<S>& ctx, const TensorT<S>& x, const TensorT<S>& w) {
    if (x.numel() != w.numel()) throw ShapeError("weighted_sum operand size mismatch");
    double acc = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i)
        acc += static_cast<double>(x.at(i)) * static_cast<double>(w.at(i));
    TensorT<S> y = TensorT<S>::scalar(static_cast<S>(acc));
    if (ctx.recording({&x})) {
        ctx.tape->record("weighted_sum", y, {&x}, [x, w, y](GradTape<S>& tape) {
            if (!tape.tracks(x.id())) return;
            const S g0 = tape.grad_checked(y).at(0);
            S* gx = tape.grad_buf(x).data();
            const S* pw = w.data();
            const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < n; ++i) gx[i] += g0 * pw[i];
        });
    }
    return y;
}

}  // namespace lsp::ops
