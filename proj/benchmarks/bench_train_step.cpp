// Times one optimizer step (forward + backward + AdamW update) and one
// eval-mode forward for each probe at training shapes. Used to budget the
// synthetic-training acceptance run.
// Usage: bench_train_step [batch] [t] [h] [w]

#include <chrono>
#include <cstdio>
#include <cstdlib>

#include "lsp/probes.hpp"
#include "lsp/training.hpp"

using namespace lsp;

namespace {

double time_once(const std::function<void()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void bench_probe_kind(ProbeKind kind, int64_t batch, int64_t t, int64_t h, int64_t w) {
    ProbeConfig pc;
    pc.kind = kind;
    Probe<float> model(pc, /*seed=*/42);
    Tensor x = Tensor::normal({batch, pc.in_channels, t, h, w}, 0.f, 1.f, 7);
    std::vector<int> labels(static_cast<size_t>(batch));
    for (size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 2);

    train::AdamW<float> opt;
    auto params = model.parameters();
    opt.attach(params);

    double fwd_eval = 0, step_time = 0;
    {
        Ctx<float> ctx;
        fwd_eval = time_once([&] { (void)model.forward(ctx, x, true); });
    }
    {
        step_time = time_once([&] {
            GradTape<float> tape;
            params = model.parameters();
            for (auto& p : params) tape.watch(*p.tensor);
            RngStream drop(1234, 0);
            Ctx<float> ctx{Mode::kTrain, &tape, &drop};
            Tensor logits = model.forward(ctx, x, false);
            Tensor loss = ops::cross_entropy_with_logits(ctx, logits, labels);
            tape.backward(loss);
            opt.step(params, tape);
        });
    }
    std::printf("%-16s batch=%lld  eval_fwd=%.3fs  train_step=%.3fs  (%.3fs/clip step)\n",
                std::string(probe_kind_name(kind)).c_str(), static_cast<long long>(batch), fwd_eval,
                step_time, step_time / static_cast<double>(batch));
}

}  // namespace

int main(int argc, char** argv) {
    const int64_t batch = argc > 1 ? std::atoll(argv[1]) : 8;
    const int64_t t = argc > 2 ? std::atoll(argv[2]) : 13;
    const int64_t h = argc > 3 ? std::atoll(argv[3]) : 60;
    const int64_t w = argc > 4 ? std::atoll(argv[4]) : 90;
    bench_probe_kind(ProbeKind::kVanilla3dCnn, batch, t, h, w);
    bench_probe_kind(ProbeKind::kCnnTransformer, batch, t, h, w);
    return 0;
}
