#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lsp/kernels.hpp"  // Conv3dSpec / Dims3 geometry only

// Serial, single-threaded naive implementations of the forward kernels. These
// are the ground truth the optimized kernels are tested against; they favour
// obviousness over speed and share no code with kernels.hpp beyond the
// geometry helpers.
namespace lsp::reference {

using kernels::Conv3dSpec;
using kernels::Dims3;

template <typename S>
void conv3d(const Conv3dSpec& d, const S* x, const S* weight, const S* bias, S* y) {
    for (int64_t b = 0; b < d.batch; ++b)
        for (int64_t co = 0; co < d.c_out; ++co)
            for (int64_t to = 0; to < d.ot; ++to)
                for (int64_t ho = 0; ho < d.oh; ++ho)
                    for (int64_t wo = 0; wo < d.ow; ++wo) {
                        S acc = bias ? bias[co] : S(0);
                        for (int64_t ci = 0; ci < d.c_in; ++ci)
                            for (int64_t kt = 0; kt < d.kt; ++kt)
                                for (int64_t kh = 0; kh < d.kh; ++kh)
                                    for (int64_t kw = 0; kw < d.kw; ++kw) {
                                        const int64_t ti = to * d.stride.t - d.pad.t + kt;
                                        const int64_t hi = ho * d.stride.h - d.pad.h + kh;
                                        const int64_t wi = wo * d.stride.w - d.pad.w + kw;
                                        if (ti < 0 || ti >= d.t || hi < 0 || hi >= d.h || wi < 0 ||
                                            wi >= d.w)
                                            continue;
                                        acc += x[(((b * d.c_in + ci) * d.t + ti) * d.h + hi) * d.w +
                                                 wi] *
                                               weight[(((co * d.c_in + ci) * d.kt + kt) * d.kh +
                                                       kh) * d.kw +
                                                      kw];
                                    }
                        y[(((b * d.c_out + co) * d.ot + to) * d.oh + ho) * d.ow + wo] = acc;
                    }
}

template <typename S>
void maxpool3d(int64_t bc, int64_t t, int64_t h, int64_t w, Dims3 k, const S* x, S* y) {
    const int64_t ot = t / k.t, oh = h / k.h, ow = w / k.w;
    for (int64_t m = 0; m < bc; ++m)
        for (int64_t to = 0; to < ot; ++to)
            for (int64_t ho = 0; ho < oh; ++ho)
                for (int64_t wo = 0; wo < ow; ++wo) {
                    S best = x[(m * t + to * k.t) * h * w + (ho * k.h) * w + wo * k.w];
                    for (int64_t dt = 0; dt < k.t; ++dt)
                        for (int64_t dh = 0; dh < k.h; ++dh)
                            for (int64_t dw = 0; dw < k.w; ++dw)
                                best = std::max(
                                    best, x[(m * t + to * k.t + dt) * h * w +
                                            (ho * k.h + dh) * w + wo * k.w + dw]);
                    y[((m * ot + to) * oh + ho) * ow + wo] = best;
                }
}

template <typename S>
void mean_rows(int64_t rows, int64_t reduce, const S* x, S* y) {
    for (int64_t r = 0; r < rows; ++r) {
        S acc = S(0);
        for (int64_t i = 0; i < reduce; ++i) acc += x[r * reduce + i];
        y[r] = acc / static_cast<S>(reduce);
    }
}

template <typename S>
void matmul(int64_t m, int64_t k, int64_t n, const S* a, const S* b, S* c) {
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            S acc = S(0);
            for (int64_t l = 0; l < k; ++l) acc += a[i * k + l] * b[l * n + j];
            c[i * n + j] = acc;
        }
}

template <typename S>
void linear(int64_t rows, int64_t d_in, int64_t d_out, const S* x, const S* weight, const S* bias,
            S* y) {
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d_out; ++j) {
            S acc = bias ? bias[j] : S(0);
            for (int64_t i = 0; i < d_in; ++i) acc += x[r * d_in + i] * weight[j * d_in + i];
            y[r * d_out + j] = acc;
        }
}

template <typename S>
void softmax(int64_t rows, int64_t d, const S* x, S* y) {
    for (int64_t r = 0; r < rows; ++r) {
        S mx = x[r * d];
        for (int64_t i = 1; i < d; ++i) mx = std::max(mx, x[r * d + i]);
        S sum = S(0);
        for (int64_t i = 0; i < d; ++i) sum += std::exp(x[r * d + i] - mx);
        for (int64_t i = 0; i < d; ++i) y[r * d + i] = std::exp(x[r * d + i] - mx) / sum;
    }
}

template <typename S>
void layernorm(int64_t rows, int64_t d, S eps, const S* x, const S* gamma, const S* beta, S* y) {
    for (int64_t r = 0; r < rows; ++r) {
        S mean = S(0);
        for (int64_t i = 0; i < d; ++i) mean += x[r * d + i];
        mean /= static_cast<S>(d);
        S var = S(0);
        for (int64_t i = 0; i < d; ++i) var += (x[r * d + i] - mean) * (x[r * d + i] - mean);
        var /= static_cast<S>(d);
        for (int64_t i = 0; i < d; ++i)
            y[r * d + i] =
                gamma[i] * (x[r * d + i] - mean) / std::sqrt(var + eps) + beta[i];
    }
}

template <typename S>
void batchnorm_train(int64_t batch, int64_t channels, int64_t vol, S eps, const S* x,
                     const S* gamma, const S* beta, S* y) {
    for (int64_t c = 0; c < channels; ++c) {
        S mean = S(0);
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t i = 0; i < vol; ++i) mean += x[(b * channels + c) * vol + i];
        mean /= static_cast<S>(batch * vol);
        S var = S(0);
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t i = 0; i < vol; ++i) {
                const S dlt = x[(b * channels + c) * vol + i] - mean;
                var += dlt * dlt;
            }
        var /= static_cast<S>(batch * vol);
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t i = 0; i < vol; ++i)
                y[(b * channels + c) * vol + i] =
                    gamma[c] * (x[(b * channels + c) * vol + i] - mean) / std::sqrt(var + eps) +
                    beta[c];
    }
}

}  // namespace lsp::reference
