// Compares the three 3-D convolution execution paths on probe-sized shapes:
//   reference : serial naive loops (the testing oracle)
//   direct    : OpenMP-parallel direct convolution
//   im2col    : im2col + BLAS GEMM (the path used by the layers)
// Usage: bench_kernels [repeats]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <vector>

#include "lsp/kernels.hpp"
#include "lsp/reference.hpp"
#include "lsp/tensor.hpp"

using namespace lsp;

namespace {

struct Case {
    const char* label;
    int64_t b, ci, t, h, w, co, k, stride, pad;
};

double time_best(int repeats, const std::function<void()>& fn) {
    double best = 1e300;
    for (int r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const double dt =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (dt < best) best = dt;
    }
    return best;
}

}  // namespace

int main(int argc, char** argv) {
    const int repeats = argc > 1 ? std::atoi(argv[1]) : 3;
    const Case cases[] = {
        {"stem 16->64 k3 s1", 1, 16, 13, 60, 90, 64, 3, 1, 1},
        {"stage1 64->128 k3 s2", 1, 64, 13, 60, 90, 128, 3, 2, 1},
        {"stage2 128->256 k3 s2", 1, 128, 7, 30, 45, 256, 3, 2, 1},
        {"small 8->16 k3 s1", 2, 8, 6, 12, 12, 16, 3, 1, 1},
    };
    std::printf("%-24s %12s %12s %12s %10s\n", "case", "reference_s", "direct_s", "im2col_s",
                "speedup");
    for (const Case& c : cases) {
        const Shape x_shape{c.b, c.ci, c.t, c.h, c.w};
        const Shape w_shape{c.co, c.ci, c.k, c.k, c.k};
        const auto spec = kernels::Conv3dSpec::make(x_shape, w_shape, {c.stride, c.stride, c.stride},
                                                    {c.pad, c.pad, c.pad});
        Tensor x = Tensor::normal(x_shape, 0.f, 1.f, 1);
        Tensor wgt = Tensor::normal(w_shape, 0.f, 0.1f, 2);
        std::vector<float> bias(static_cast<size_t>(c.co), 0.f);
        std::vector<float> y(static_cast<size_t>(spec.batch * spec.c_out * spec.out_positions()));

        const double t_ref = time_best(
            repeats, [&] { reference::conv3d(spec, x.data(), wgt.data(), bias.data(), y.data()); });
        const double t_direct = time_best(repeats, [&] {
            kernels::conv3d_forward_direct(spec, x.data(), wgt.data(), bias.data(), y.data());
        });
        std::vector<float> col;
        const double t_im2col = time_best(repeats, [&] {
            kernels::conv3d_forward_im2col(spec, x.data(), wgt.data(), bias.data(), y.data(), col);
        });
        std::printf("%-24s %12.6f %12.6f %12.6f %9.1fx\n", c.label, t_ref, t_direct, t_im2col,
                    t_ref / t_im2col);
    }
    return 0;
}
