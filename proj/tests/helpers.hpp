#pragma once
// Shared test utilities: deterministic random cases against naive-loop
// oracles, and a central finite-difference gradient harness (f64). Kept free
// of any test-framework dependency so both the unit suites and the
// acceptance binary can use it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <lsp/layers.hpp>
#include <lsp/ops.hpp>
#include <lsp/reference.hpp>
#include <lsp/rng.hpp>
#include <lsp/tape.hpp>
#include <lsp/tensor.hpp>

namespace testutil {

using lsp::Ctx;
using lsp::GradTape;
using lsp::Mode;
using lsp::RngStream;
using lsp::Shape;
using lsp::Tensor;
using lsp::TensorD;
using lsp::TensorT;
namespace ops = lsp::ops;
namespace nn = lsp::nn;
namespace kernels = lsp::kernels;
namespace reference = lsp::reference;
using lsp::kernels::Conv3dSpec;
using lsp::kernels::Dims3;

// ---------------------------------------------------------------------------
// small numeric helpers

template <typename S>
double max_abs_diff(const S* a, const S* b, int64_t n) {
    double worst = 0.0;
    for (int64_t i = 0; i < n; ++i)
        worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return worst;
}

template <typename S>
double max_abs_diff(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.numel() != b.numel()) return 1e300;
    return max_abs_diff(a.data(), b.data(), a.numel());
}

/// Deterministic integer in [lo, hi] drawn from (seed, counter).
inline int64_t rand_int(uint64_t seed, uint64_t counter, int64_t lo, int64_t hi) {
    const double u = lsp::rng::uniform01(seed, counter);
    return lo + static_cast<int64_t>(u * static_cast<double>(hi - lo + 1));
}

// ---------------------------------------------------------------------------
// randomized oracle cases (shape extents <= 6, f32)

/// One random conv case: both production paths (im2col-tiled via ops::conv3d
/// and the direct kernel) against the six-nested-loop reference. Returns the
/// worst elementwise absolute difference.
inline double random_conv_case(uint64_t seed) {
    uint64_t c = 0;
    auto draw = [&](int64_t lo, int64_t hi) { return rand_int(seed, c++, lo, hi); };
    const int64_t b = draw(1, 2), cin = draw(1, 3), cout = draw(1, 3);
    Dims3 stride{draw(1, 2), draw(1, 2), draw(1, 2)};
    Dims3 pad{draw(0, 1), draw(0, 1), draw(0, 1)};
    int64_t t = 0, h = 0, w = 0;
    Dims3 k{1, 1, 1};
    for (;;) {  // resample until every output extent is >= 1
        t = draw(1, 6);
        h = draw(1, 6);
        w = draw(1, 6);
        k = Dims3{draw(1, 3), draw(1, 3), draw(1, 3)};
        if (t + 2 * pad.t >= k.t && h + 2 * pad.h >= k.h && w + 2 * pad.w >= k.w) break;
    }
    const bool with_bias = draw(0, 1) == 1;
    Tensor x = Tensor::uniform({b, cin, t, h, w}, -1.f, 1.f, lsp::rng::mix(seed, 101));
    Tensor weight =
        Tensor::uniform({cout, cin, k.t, k.h, k.w}, -1.f, 1.f, lsp::rng::mix(seed, 102));
    Tensor bias;
    if (with_bias) bias = Tensor::uniform({cout}, -1.f, 1.f, lsp::rng::mix(seed, 103));

    const Conv3dSpec d = Conv3dSpec::make(x.shape(), weight.shape(), stride, pad);
    std::vector<float> want(static_cast<size_t>(d.batch * d.c_out * d.ot * d.oh * d.ow));
    reference::conv3d(d, x.data(), weight.data(), with_bias ? bias.data() : nullptr, want.data());

    Ctx<float> ctx;  // eval, no tape
    Tensor got = ops::conv3d(ctx, x, weight, bias, stride, pad);
    double worst = max_abs_diff(got.data(), want.data(), got.numel());

    std::vector<float> direct(want.size());
    kernels::conv3d_forward_direct(d, x.data(), weight.data(),
                                   with_bias ? bias.data() : nullptr, direct.data());
    worst = std::max(worst, max_abs_diff(direct.data(), want.data(),
                                         static_cast<int64_t>(want.size())));
    return worst;
}

inline double random_maxpool_case(uint64_t seed) {
    uint64_t c = 0;
    auto draw = [&](int64_t lo, int64_t hi) { return rand_int(seed, c++, lo, hi); };
    const Dims3 k{draw(1, 2), draw(1, 2), draw(1, 2)};
    const int64_t b = draw(1, 2), ch = draw(1, 3);
    const int64_t t = draw(k.t, 6), h = draw(k.h, 6), w = draw(k.w, 6);
    Tensor x = Tensor::uniform({b, ch, t, h, w}, -1.f, 1.f, lsp::rng::mix(seed, 201));
    std::vector<float> want(
        static_cast<size_t>(b * ch * (t / k.t) * (h / k.h) * (w / k.w)));
    reference::maxpool3d(b * ch, t, h, w, k, x.data(), want.data());
    Ctx<float> ctx;
    Tensor got = ops::maxpool3d(ctx, x, k);
    return max_abs_diff(got.data(), want.data(), got.numel());
}

inline double random_avgpool_case(uint64_t seed) {
    uint64_t c = 0;
    auto draw = [&](int64_t lo, int64_t hi) { return rand_int(seed, c++, lo, hi); };
    const int64_t b = draw(1, 2), ch = draw(1, 3);
    const int64_t t = draw(1, 6), h = draw(1, 6), w = draw(1, 6);
    Tensor x = Tensor::uniform({b, ch, t, h, w}, -1.f, 1.f, lsp::rng::mix(seed, 301));
    Ctx<float> ctx;
    double worst = 0.0;
    {  // spatial mean keeps the temporal axis
        Tensor got = ops::avg_pool_spatial(ctx, x);
        for (int64_t m = 0; m < b * ch * t; ++m) {
            double acc = 0.0;
            for (int64_t i = 0; i < h * w; ++i)
                acc += static_cast<double>(x.data()[m * h * w + i]);
            worst = std::max(worst,
                             std::abs(static_cast<double>(got.data()[m]) -
                                      acc / static_cast<double>(h * w)));
        }
    }
    {  // full mean pools T, H and W
        Tensor got = ops::avg_pool_full(ctx, x);
        for (int64_t m = 0; m < b * ch; ++m) {
            double acc = 0.0;
            for (int64_t i = 0; i < t * h * w; ++i)
                acc += static_cast<double>(x.data()[m * t * h * w + i]);
            worst = std::max(worst,
                             std::abs(static_cast<double>(got.data()[m]) -
                                      acc / static_cast<double>(t * h * w)));
        }
    }
    return worst;
}

inline double random_linear_case(uint64_t seed) {
    uint64_t c = 0;
    auto draw = [&](int64_t lo, int64_t hi) { return rand_int(seed, c++, lo, hi); };
    const int64_t rows = draw(1, 6), din = draw(1, 8), dout = draw(1, 8);
    const bool with_bias = draw(0, 1) == 1;
    Tensor x = Tensor::uniform({rows, din}, -1.f, 1.f, lsp::rng::mix(seed, 401));
    Tensor weight = Tensor::uniform({dout, din}, -1.f, 1.f, lsp::rng::mix(seed, 402));
    Tensor bias;
    if (with_bias) bias = Tensor::uniform({dout}, -1.f, 1.f, lsp::rng::mix(seed, 403));
    std::vector<float> want(static_cast<size_t>(rows * dout));
    reference::linear(rows, din, dout, x.data(), weight.data(),
                      with_bias ? bias.data() : nullptr, want.data());
    Ctx<float> ctx;
    Tensor got = ops::linear(ctx, x, weight, bias);
    return max_abs_diff(got.data(), want.data(), got.numel());
}

// ---------------------------------------------------------------------------
// finite-difference gradient harness (f64)

struct FdReport {
    double max_rel = 0.0;
    int64_t checked = 0;
    int64_t skipped = 0;  // probes landing on a non-smooth point (e.g. a relu kink)
    std::string worst;

    bool ok(double tol = 1e-4) const { return checked > 0 && max_rel < tol; }
};

/// Builder: evaluates the scalar root from the current tensor values. With a
/// non-null tape the forward must record onto it; with null it just computes.
using BuildFn = std::function<TensorD(GradTape<double>*)>;

/// Compares tape gradients against central finite differences for every
/// element of every probed tensor (or a deterministic sample of
/// `max_probes_per_tensor` elements when that is positive).
inline FdReport check_gradients(const BuildFn& f, const std::vector<TensorD*>& inputs,
                                double eps = 1e-4, int64_t max_probes_per_tensor = 0) {
    FdReport rep;
    GradTape<double> tape;
    for (TensorD* t : inputs) {
        t->set_requires_grad(true);
        tape.watch(*t);
    }
    TensorD root = f(&tape);
    if (root.numel() != 1) throw lsp::UsageError("finite-difference root must be scalar");
    tape.backward(root);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (TensorD* t : inputs) {
        std::vector<double> g(static_cast<size_t>(t->numel()), 0.0);
        if (const TensorD* gt = tape.find_grad(t->id()))
            std::copy(gt->data(), gt->data() + gt->numel(), g.begin());
        analytic.push_back(std::move(g));
    }

    auto eval = [&]() {
        TensorD r = f(nullptr);
        return static_cast<double>(r.at(0));
    };

    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        TensorD& t = *inputs[ti];
        const int64_t n = t.numel();
        std::vector<int64_t> idx(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        if (max_probes_per_tensor > 0 && n > max_probes_per_tensor) {
            // deterministic Fisher-Yates, then keep the first k indices
            for (int64_t i = n - 1; i > 0; --i) {
                const int64_t j = rand_int(0x9e3779b97f4a7c15ull ^ static_cast<uint64_t>(ti),
                                           static_cast<uint64_t>(i), 0, i);
                std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
            }
            idx.resize(static_cast<size_t>(max_probes_per_tensor));
        }
        for (int64_t i : idx) {
            double* slot = t.data() + i;
            const double orig = *slot;
            *slot = orig + eps;
            const double fp = eval();
            *slot = orig - eps;
            const double fm = eval();
            *slot = orig + 3.0 * eps;
            const double fp3 = eval();
            *slot = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            // A second difference centered at +2*eps agrees with the first to
            // O(eps) when the function is smooth; a large gap means the probe
            // straddles a kink (relu / max tie), where central differences are
            // meaningless, so skip it.
            const double shifted = (fp3 - fp) / (2.0 * eps);
            if (std::abs(shifted - numeric) >
                0.02 * std::max({std::abs(numeric), std::abs(shifted), 1.0})) {
                ++rep.skipped;
                continue;
            }
            const double a = analytic[ti][static_cast<size_t>(i)];
            const double denom = std::max({std::abs(numeric), std::abs(a), 1.0});
            const double rel = std::abs(numeric - a) / denom;
            ++rep.checked;
            if (rel > rep.max_rel) {
                rep.max_rel = rel;
                std::ostringstream os;
                os << "tensor " << ti << " elem " << i << ": analytic " << a << " numeric "
                   << numeric;
                rep.worst = os.str();
            }
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// the per-op and per-layer finite-difference batteries (criterion: every
// differentiable op and layer agrees with central differences in f64)

inline TensorD rand_d(Shape shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    return TensorD::uniform(std::move(shape), lo, hi, seed);
}

/// Shifts every element away from zero by +-margin (for kinked activations).
inline void avoid_kink(TensorD& t, double margin) {
    for (int64_t i = 0; i < t.numel(); ++i) {
        double& v = t.data()[i];
        if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
    }
}

inline std::vector<std::pair<std::string, FdReport>> all_op_fd_reports() {
    std::vector<std::pair<std::string, FdReport>> out;
    auto add = [&](const std::string& name, const BuildFn& f,
                   const std::vector<TensorD*>& inputs, int64_t cap = 0) {
        out.emplace_back(name, check_gradients(f, inputs, 1e-4, cap));
    };
    {  // conv3d, stride 1 pad 1, with bias
        auto x = rand_d({2, 2, 3, 4, 4}, 11);
        auto w = rand_d({3, 2, 3, 3, 3}, 12);
        auto b = rand_d({3}, 13);
        auto wt = rand_d({2 * 3 * 3 * 4 * 4}, 14, 0.5, 1.5);
        add("conv3d s1p1",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                TensorD y = ops::conv3d(ctx, x, w, b, {1, 1, 1}, {1, 1, 1});
                return ops::weighted_sum(ctx, y, wt);
            },
            {&x, &w, &b});
    }
    {  // conv3d, stride 2 pad 1 (the stage-downsampling configuration)
        auto x = rand_d({1, 2, 4, 5, 5}, 21);
        auto w = rand_d({2, 2, 3, 3, 3}, 22);
        auto b = rand_d({2}, 23);
        auto wt = rand_d({1 * 2 * 2 * 3 * 3}, 24, 0.5, 1.5);
        add("conv3d s2p1",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                TensorD y = ops::conv3d(ctx, x, w, b, {2, 2, 2}, {1, 1, 1});
                return ops::weighted_sum(ctx, y, wt);
            },
            {&x, &w, &b});
    }
    {  // conv3d, 1x1x1 kernel (shortcut projection), no bias
        auto x = rand_d({2, 3, 2, 3, 3}, 31);
        auto w = rand_d({2, 3, 1, 1, 1}, 32);
        TensorD none;
        auto wt = rand_d({2 * 2 * 1 * 2 * 2}, 33, 0.5, 1.5);
        add("conv3d k1 s2",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                TensorD y = ops::conv3d(ctx, x, w, none, {2, 2, 2}, {0, 0, 0});
                return ops::weighted_sum(ctx, y, wt);
            },
            {&x, &w});
    }
    {  // maxpool3d 2x2x2 (values spread to keep argmax stable under eps)
        auto x = rand_d({2, 2, 4, 4, 4}, 41, -10.0, 10.0);
        auto wt = rand_d({2 * 2 * 2 * 2 * 2}, 42, 0.5, 1.5);
        add("maxpool3d",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                TensorD y = ops::maxpool3d(ctx, x, {2, 2, 2});
                return ops::weighted_sum(ctx, y, wt);
            },
            {&x});
    }
    {  // adaptive average pools and the temporal mean
        auto x = rand_d({2, 3, 3, 4, 4}, 51);
        auto wt_sp = rand_d({2 * 3 * 3}, 52, 0.5, 1.5);
        add("avg_pool_spatial",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, ops::avg_pool_spatial(ctx, x), wt_sp);
            },
            {&x});
        auto wt_full = rand_d({2 * 3}, 53, 0.5, 1.5);
        add("avg_pool_full",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, ops::avg_pool_full(ctx, x), wt_full);
            },
            {&x});
        auto tok = rand_d({2, 4, 5}, 54);
        auto wt_tok = rand_d({2 * 5}, 55, 0.5, 1.5);
        add("mean_axis1",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, ops::mean_axis1(ctx, tok), wt_tok);
            },
            {&tok});
    }
    {  // linear over a leading batch axis
        auto x = rand_d({3, 5}, 61);
        auto w = rand_d({4, 5}, 62);
        auto b = rand_d({4}, 63);
        auto wt = rand_d({12}, 64, 0.5, 1.5);
        add("linear",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, ops::linear(ctx, x, w, b), wt);
            },
            {&x, &w, &b});
    }
    {  // batched matmul, all four transpose arrangements
        const int64_t bb = 2, m = 3, kk = 4, n = 2;
        auto wt = rand_d({bb * m * n}, 70, 0.5, 1.5);
        const std::pair<bool, bool> combos[] = {
            {false, false}, {false, true}, {true, false}, {true, true}};
        int tag = 0;
        for (auto [ta, tb] : combos) {
            Shape sa = ta ? Shape{bb, kk, m} : Shape{bb, m, kk};
            Shape sb = tb ? Shape{bb, n, kk} : Shape{bb, kk, n};
            auto a = rand_d(sa, 71 + static_cast<uint64_t>(tag) * 2);
            auto b = rand_d(sb, 72 + static_cast<uint64_t>(tag) * 2);
            std::ostringstream nm;
            nm << "bmm t" << ta << tb;
            add(nm.str(),
                [&, ta, tb](GradTape<double>* tape) {
                    Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                    return ops::weighted_sum(ctx, ops::bmm(ctx, a, b, ta, tb), wt);
                },
                {&a, &b});
            ++tag;
        }
    }
    {  // view/permute chain
        auto x = rand_d({2, 3, 4, 5}, 81);
        auto wt = rand_d({2 * 3 * 4 * 5}, 82, 0.5, 1.5);
        add("reshape+transpose_12+permute_0213",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                TensorD y = ops::permute_0213(ctx, x);       // 2x4x3x5
                y = ops::reshape(ctx, y, {2, 4, 15});
                y = ops::transpose_12(ctx, y);               // 2x15x4
                y = ops::reshape(ctx, y, {2, 3, 20});
                return ops::weighted_sum(ctx, y, wt);
            },
            {&x});
    }
    {  // elementwise activations (relu probed away from its kink)
        auto x = rand_d({40}, 91);
        avoid_kink(x, 1e-2);
        auto wt = rand_d({40}, 92, 0.5, 1.5);
        add("relu",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, ops::relu(ctx, x), wt);
            },
            {&x});
        auto xs = rand_d({40}, 93, -3.0, 3.0);
        add("sigmoid",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, ops::sigmoid(ctx, xs), wt);
            },
            {&xs});
        auto xg = rand_d({40}, 94, -3.0, 3.0);
        add("gelu",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, ops::gelu(ctx, xg), wt);
            },
            {&xg});
        auto xc = rand_d({40}, 95);
        add("scale",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, ops::scale(ctx, xc, 0.37), wt);
            },
            {&xc});
    }
    {  // binary elementwise and the broadcasting channel gate
        auto a = rand_d({3, 4}, 101);
        auto b = rand_d({3, 4}, 102);
        auto wt = rand_d({12}, 103, 0.5, 1.5);
        add("add",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, ops::add(ctx, a, b), wt);
            },
            {&a, &b});
        add("mul",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, ops::mul(ctx, a, b), wt);
            },
            {&a, &b});
        auto x = rand_d({2, 3, 2, 2, 2}, 104);
        auto g = rand_d({2, 3}, 105, 0.1, 0.9);
        auto wtc = rand_d({2 * 3 * 8}, 106, 0.5, 1.5);
        add("channel_scale",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, ops::channel_scale(ctx, x, g), wtc);
            },
            {&x, &g});
    }
    {  // softmax over the trailing axis
        auto x = rand_d({3, 5}, 111, -2.0, 2.0);
        auto wt = rand_d({15}, 112, 0.5, 1.5);
        add("softmax_last",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, ops::softmax_last(ctx, x), wt);
            },
            {&x});
    }
    {  // dropout with a mask rebuilt identically on every evaluation
        auto x = rand_d({60}, 121);
        auto wt = rand_d({60}, 122, 0.5, 1.5);
        add("dropout p=0.4",
            [&](GradTape<double>* tape) {
                RngStream drop(777, 0);
                Ctx<double> ctx{Mode::kTrain, tape, &drop};
                return ops::weighted_sum(ctx, ops::dropout(ctx, x, 0.4), wt);
            },
            {&x});
    }
    {  // batch normalization (training statistics)
        auto x = rand_d({2, 3, 2, 3, 3}, 131);
        auto gamma = rand_d({3}, 132, 0.5, 1.5);
        auto beta = rand_d({3}, 133);
        auto wt = rand_d({2 * 3 * 2 * 3 * 3}, 134, 0.5, 1.5);
        add("batchnorm_train",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                TensorD y = ops::batchnorm_train(ctx, x, gamma, beta, 1e-5);
                return ops::weighted_sum(ctx, y, wt);
            },
            {&x, &gamma, &beta});
    }
    {  // layer normalization
        auto x = rand_d({4, 6}, 141);
        auto gamma = rand_d({6}, 142, 0.5, 1.5);
        auto beta = rand_d({6}, 143);
        auto wt = rand_d({24}, 144, 0.5, 1.5);
        add("layernorm",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, ops::layernorm(ctx, x, gamma, beta, 1e-5), wt);
            },
            {&x, &gamma, &beta});
    }
    {  // softmax cross-entropy against integer labels
        auto logits = rand_d({6, 2}, 151, -2.0, 2.0);
        const std::vector<int> labels{0, 1, 1, 0, 1, 0};
        add("cross_entropy_with_logits",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::cross_entropy_with_logits(ctx, logits, labels);
            },
            {&logits});
    }
    {  // the reduction used by every other check
        auto x = rand_d({17}, 161);
        auto w = rand_d({17}, 162, 0.5, 1.5);
        add("weighted_sum",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, x, w);
            },
            {&x});
    }
    return out;
}

inline std::vector<std::pair<std::string, FdReport>> all_layer_fd_reports() {
    std::vector<std::pair<std::string, FdReport>> out;

    auto collect_params = [](auto& layer, const char* name) {
        nn::ParamList<double> params, buffers;
        layer.collect(name, params, buffers);
        std::vector<TensorD*> ptrs;
        for (auto& p : params) ptrs.push_back(p.tensor);
        return ptrs;
    };
    auto run = [&](const std::string& name, const BuildFn& f, std::vector<TensorD*> inputs,
                   int64_t cap = 0) {
        out.emplace_back(name, check_gradients(f, inputs, 1e-4, cap));
    };

    {  // convolution layer with bias
        nn::InitStream init(5);
        nn::Conv3d<double> conv(2, 3, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, true, init);
        auto x = rand_d({2, 2, 3, 4, 4}, 1001);
        auto wt = rand_d({2 * 3 * 3 * 4 * 4}, 1002, 0.5, 1.5);
        auto inputs = collect_params(conv, "conv");
        inputs.push_back(&x);
        run("layer Conv3d",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, conv.forward(ctx, x), wt);
            },
            inputs);
    }
    {  // batch-norm layer in training mode
        nn::BatchNorm3d<double> bn(3);
        auto x = rand_d({2, 3, 2, 3, 3}, 1011);
        auto wt = rand_d({2 * 3 * 2 * 3 * 3}, 1012, 0.5, 1.5);
        auto inputs = collect_params(bn, "bn");
        inputs.push_back(&x);
        run("layer BatchNorm3d",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, bn.forward(ctx, x), wt);
            },
            inputs);
    }
    {  // linear layer
        nn::InitStream init(6);
        nn::Linear<double> fc(5, 4, true, init, nn::Init::kKaimingRelu);
        auto x = rand_d({3, 5}, 1021);
        auto wt = rand_d({12}, 1022, 0.5, 1.5);
        auto inputs = collect_params(fc, "fc");
        inputs.push_back(&x);
        run("layer Linear",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, fc.forward(ctx, x), wt);
            },
            inputs);
    }
    {  // layer normalization layer
        nn::LayerNorm<double> ln(6);
        // move affine parameters off their 1/0 init so gradients are generic
        for (int64_t i = 0; i < 6; ++i) {
            ln.gamma.data()[i] = 0.75 + 0.1 * static_cast<double>(i);
            ln.beta.data()[i] = -0.2 + 0.05 * static_cast<double>(i);
        }
        auto x = rand_d({4, 6}, 1031);
        auto wt = rand_d({24}, 1032, 0.5, 1.5);
        auto inputs = collect_params(ln, "ln");
        inputs.push_back(&x);
        run("layer LayerNorm",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, ln.forward(ctx, x), wt);
            },
            inputs);
    }
    {  // squeeze-excitation gate
        nn::InitStream init(7);
        nn::SEBlock<double> se(4, 2, init);
        auto x = rand_d({2, 4, 2, 3, 3}, 1041);
        auto wt = rand_d({2 * 4 * 2 * 3 * 3}, 1042, 0.5, 1.5);
        auto inputs = collect_params(se, "se");
        inputs.push_back(&x);
        run("layer SEBlock",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, se.forward(ctx, x), wt);
            },
            inputs);
    }
    {  // residual block with projection shortcut (stride 2)
        nn::InitStream init(8);
        nn::ResBlock3d<double> block(3, 4, 2, 2, init);
        auto x = rand_d({2, 3, 3, 5, 5}, 1051);
        auto wt = rand_d({2 * 4 * 2 * 3 * 3}, 1052, 0.5, 1.5);
        auto inputs = collect_params(block, "res");
        inputs.push_back(&x);
        run("layer ResBlock3d s2",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, block.forward(ctx, x), wt);
            },
            inputs, 64);
    }
    {  // residual block with identity shortcut
        nn::InitStream init(9);
        nn::ResBlock3d<double> block(4, 4, 1, 2, init);
        auto x = rand_d({2, 4, 2, 3, 3}, 1061);
        auto wt = rand_d({2 * 4 * 2 * 3 * 3}, 1062, 0.5, 1.5);
        auto inputs = collect_params(block, "res");
        inputs.push_back(&x);
        run("layer ResBlock3d identity",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, block.forward(ctx, x), wt);
            },
            inputs, 64);
    }
    {  // multi-head self-attention (dropout 0 so every run shares the path)
        nn::InitStream init(10);
        nn::MultiheadSelfAttention<double> attn(8, 2, 0.0, init);
        auto x = rand_d({2, 3, 8}, 1071);
        auto wt = rand_d({2 * 3 * 8}, 1072, 0.5, 1.5);
        auto inputs = collect_params(attn, "attn");
        inputs.push_back(&x);
        run("layer MultiheadSelfAttention",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, attn.forward(ctx, x), wt);
            },
            inputs, 96);
    }
    {  // full pre-LN encoder layer (dropout 0)
        nn::InitStream init(11);
        nn::TransformerEncoderLayer<double> enc(8, 2, 16, 0.0, init);
        auto x = rand_d({2, 3, 8}, 1081);
        auto wt = rand_d({2 * 3 * 8}, 1082, 0.5, 1.5);
        auto inputs = collect_params(enc, "enc");
        inputs.push_back(&x);
        run("layer TransformerEncoderLayer",
            [&](GradTape<double>* tape) {
                Ctx<double> ctx{Mode::kTrain, tape, nullptr};
                return ops::weighted_sum(ctx, enc.forward(ctx, x), wt);
            },
            inputs, 96);
    }
    {  // encoder layer with active dropout, mask pinned per evaluation
        nn::InitStream init(12);
        nn::TransformerEncoderLayer<double> enc(8, 2, 16, 0.1, init);
        auto x = rand_d({2, 3, 8}, 1091);
        auto wt = rand_d({2 * 3 * 8}, 1092, 0.5, 1.5);
        auto inputs = collect_params(enc, "enc");
        inputs.push_back(&x);
        run("layer TransformerEncoderLayer dropout",
            [&](GradTape<double>* tape) {
                RngStream drop(4242, 0);
                Ctx<double> ctx{Mode::kTrain, tape, &drop};
                return ops::weighted_sum(ctx, enc.forward(ctx, x), wt);
            },
            inputs, 96);
    }
    return out;
}

// ---------------------------------------------------------------------------
// two-class loss identity: softmax cross-entropy vs the binary form with
// yhat = softmax component 1 = sigmoid(l1 - l0), compared in f64 over random
// logit pairs. Returns the worst absolute disagreement.

inline double loss_identity_max_diff(int64_t pairs, uint64_t seed = 515) {
    double worst = 0.0;
    for (int64_t i = 0; i < pairs; ++i) {
        const uint64_t base = static_cast<uint64_t>(4 * i);
        const double l0 = -6.0 + 12.0 * lsp::rng::uniform01(seed, base);
        const double l1 = -6.0 + 12.0 * lsp::rng::uniform01(seed, base + 1);
        const int y = lsp::rng::uniform01(seed, base + 2) < 0.5 ? 0 : 1;

        TensorD logits = TensorD::zeros({1, 2});
        logits.data()[0] = l0;
        logits.data()[1] = l1;
        Ctx<double> ctx;
        const double softmax_ce =
            ops::cross_entropy_with_logits(ctx, logits, std::vector<int>{y}).at(0);

        const double yhat = 1.0 / (1.0 + std::exp(l0 - l1));  // sigmoid(l1 - l0)
        const double binary_ce = y == 1 ? -std::log(yhat) : -std::log(1.0 - yhat);
        worst = std::max(worst, std::abs(softmax_ce - binary_ce));
    }
    return worst;
}

}  // namespace testutil
