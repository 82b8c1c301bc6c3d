#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lsp/probes.hpp"

// Training loop: mini-batching with a deterministic per-epoch shuffle,
// softmax cross-entropy on logits, AdamW updates, a checkpoint per epoch and
// frozen-parameter validation/test evaluation, logged as JSON lines.
namespace lsp::train {

// ---------------------------------------------------------------------------
// data plumbing

struct Example {
    Tensor latent;  // C x T x H x W
    int label;      // 0 = non-violating, 1 = violating
};

struct SplitStream {
    int64_t count = 0;
    std::function<Example(int64_t)> fetch;
};

struct DatasetStreams {
    SplitStream train, validation, test;
};

/// Stacks examples into a batch tensor plus labels; all clips must agree in
/// shape.
inline std::pair<Tensor, std::vector<int>> stack_batch(SplitStream& split,
                                                       const std::vector<int64_t>& indices,
                                                       int64_t begin, int64_t end) {
    const int64_t b = end - begin;
    Example first = split.fetch(indices[static_cast<size_t>(begin)]);
    if (first.latent.ndim() != 4)
        throw DataError("expected C x T x H x W clip tensors, got " +
                        shape_str(first.latent.shape()));
    Shape batch_shape{b};
    for (size_t a = 0; a < 4; ++a) batch_shape.push_back(first.latent.extent(a));
    Tensor batch = Tensor::zeros(batch_shape);
    std::vector<int> labels(static_cast<size_t>(b));
    const int64_t clip_sz = first.latent.numel();
    std::copy(first.latent.data(), first.latent.data() + clip_sz, batch.data());
    labels[0] = first.label;
    for (int64_t i = 1; i < b; ++i) {
        Example e = split.fetch(indices[static_cast<size_t>(begin + i)]);
        if (!same_shape(e.latent.shape(), first.latent.shape()))
            throw DataError("clip shape " + shape_str(e.latent.shape()) +
                            " differs from batch shape " + shape_str(first.latent.shape()));
        std::copy(e.latent.data(), e.latent.data() + clip_sz, batch.data() + i * clip_sz);
        labels[static_cast<size_t>(i)] = e.label;
    }
    return {std::move(batch), std::move(labels)};
}

/// In-place Fisher-Yates driven by the counter RNG; same seed, same order.
inline void deterministic_shuffle(std::vector<int64_t>& v, uint64_t seed) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
        const uint64_t j = rng::mix(seed, static_cast<uint64_t>(i)) %
                           static_cast<uint64_t>(i + 1);
        std::swap(v[static_cast<size_t>(i)], v[j]);
    }
}

// ---------------------------------------------------------------------------
// loss

/// Softmax cross-entropy against one-hot rows; rows must be exactly one-hot.
template <typename S>
TensorT<S> cross_entropy_loss(Ctx<S>& ctx, const TensorT<S>& logits, const TensorT<S>& onehot) {
    if (onehot.ndim() != 2 || !same_shape(onehot.shape(), logits.shape()))
        throw DataError("one-hot labels must match logits shape " + shape_str(logits.shape()));
    const int64_t rows = onehot.extent(0), classes = onehot.extent(1);
    std::vector<int> labels(static_cast<size_t>(rows), -1);
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < classes; ++j) {
            const S v = onehot.at(r * classes + j);
            if (v == S(1)) {
                if (labels[static_cast<size_t>(r)] != -1)
                    throw DataError("label row " + std::to_string(r) + " has multiple ones");
                labels[static_cast<size_t>(r)] = static_cast<int>(j);
            } else if (v != S(0)) {
                throw DataError("label row " + std::to_string(r) + " is not one-hot");
            }
        }
        if (labels[static_cast<size_t>(r)] == -1)
            throw DataError("label row " + std::to_string(r) + " has no one");
    }
    return ops::cross_entropy_with_logits(ctx, logits, labels);
}

// ---------------------------------------------------------------------------
// optimizer

/// AdamW with decoupled weight decay applied before the bias-corrected
/// moment step.
template <typename S>
class AdamW {
   public:
    S lr = S(5e-3);
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);
    S weight_decay = S(0.01);

    void attach(const nn::ParamList<S>& params) {
        slots_.clear();
        for (const auto& p : params) slots_.push_back({TensorT<S>::zeros(p.tensor->shape()),
                                                       TensorT<S>::zeros(p.tensor->shape())});
        step_count_ = 0;
    }

    int64_t step_count() const { return step_count_; }

    /// One update over all params; missing gradients count as zero.
    void step(const nn::ParamList<S>& params, const GradTape<S>& tape) {
        if (slots_.size() != params.size())
            throw ConfigError("optimizer attached to " + std::to_string(slots_.size()) +
                              " params, stepped with " + std::to_string(params.size()));
        ++step_count_;
        const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1), step_count_));
        const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2), step_count_));
        for (size_t pi = 0; pi < params.size(); ++pi) {
            TensorT<S>& theta = *params[pi].tensor;
            const TensorT<S>* grad = tape.find_grad(theta.id());
            if (grad && !same_shape(grad->shape(), theta.shape()))
                throw ShapeError("gradient shape mismatch for " + params[pi].name);
            S* t = theta.data();
            S* m = slots_[pi].m.data();
            S* v = slots_[pi].v.data();
            const S* g = grad ? grad->data() : nullptr;
            const int64_t n = theta.numel();
            const S decay = S(1) - lr * weight_decay;
            const S lr_ = lr, b1 = beta1, b2 = beta2, eps_ = eps;
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < n; ++i) {
                t[i] *= decay;
                const S gi = g ? g[i] : S(0);
                m[i] = b1 * m[i] + (S(1) - b1) * gi;
                v[i] = b2 * v[i] + (S(1) - b2) * gi * gi;
                const S mhat = m[i] / bc1;
                const S vhat = v[i] / bc2;
                t[i] -= lr_ * mhat / (std::sqrt (vhat) + eps_);
            }
        }
    }

   private:
    struct Slot {
        TensorT<S> m, v;
    };
    std::vector<Slot> slots_;
    int64_t step_count_ = 0;
};

// ---------------------------------------------------------------------------
// metrics

struct Confusion {
    int64_t tp = 0, fp = 0, tn = 0, fn = 0;

    int64_t total() const { return tp + fp + tn + fn; }
};

/// Percent-scale precision/recall/F1 with explicit undefined flags instead of
/// NaN when a denominator is zero.
struct Metrics {
    Confusion confusion;
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    bool precision_defined = false, recall_defined = false, f1_defined = false;
    double mean_loss = 0.0;
};

inline Metrics compute_metrics(const Confusion& c) {
    Metrics m;
    m.confusion = c;
    if (c.tp + c.fp > 0) {
        m.precision = 100.0 * static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
        m.precision_defined = true;
    }
    if (c.tp + c.fn > 0) {
        m.recall = 100.0 * static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
        m.recall_defined = true;
    }
    if (m.precision_defined && m.recall_defined && m.precision + m.recall > 0.0) {
        m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
        m.f1_defined = true;
    }
    return m;
}

/// F1 from already-computed percent precision/recall (the arithmetic the
/// published result tables report).
inline double f1_from_pr(double precision, double recall) {
    return 2.0 * precision * recall / (precision + recall);
}

inline nlohmann::json metrics_to_json(const Metrics& m) {
    nlohmann::json j;
    j["tp"] = m.confusion.tp;
    j["fp"] = m.confusion.fp;
    j["tn"] = m.confusion.tn;
    j["fn"] = m.confusion.fn;
    j["precision"] = m.precision_defined ? nlohmann::json(m.precision) : nlohmann::json(nullptr);
    j["recall"] = m.recall_defined ? nlohmann::json(m.recall) : nlohmann::json(nullptr);
    j["f1"] = m.f1_defined ? nlohmann::json(m.f1) : nlohmann::json(nullptr);
    j["mean_loss"] = m.mean_loss;
    return j;
}

// ---------------------------------------------------------------------------
// evaluation

/// Frozen-parameter evaluation: argmax prediction per row, confusion counts
/// over the whole stream, mean loss.
inline Metrics evaluate(Probe<float>& model, SplitStream& split, int64_t batch_size = 16) {
    if (split.count <= 0) throw ConfigError("cannot evaluate an empty split");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    std::vector<int64_t> order(static_cast<size_t>(split.count));
    for (int64_t i = 0; i < split.count; ++i) order[static_cast<size_t>(i)] = i;
    Confusion conf;
    double loss_total = 0.0;
    for (int64_t begin = 0; begin < split.count; begin += batch_size) {
        const int64_t end = std::min(split.count, begin + batch_size);
        auto [batch, labels] = stack_batch(split, order, begin, end);
        Ctx<float> ctx;  // eval mode, no tape
        Tensor logits = model.forward(ctx, batch, /*apply_softmax=*/false);
        Tensor loss = ops::cross_entropy_with_logits(ctx, logits, labels);
        loss_total += static_cast<double>(loss.at(0)) * static_cast<double>(end - begin);
        for (int64_t r = 0; r < logits.extent(0); ++r) {
            const int pred = logits.at(r * 2 + 1) > logits.at(r * 2) ? 1 : 0;
            const int truth = labels[static_cast<size_t>(r)];
            if (pred == 1 && truth == 1)
                ++conf.tp;
            else if (pred == 1 && truth == 0)
                ++conf.fp;
            else if (pred == 0 && truth == 1)
                ++conf.fn;
            else
                ++conf.tn;
        }
    }
    Metrics m = compute_metrics(conf);
    m.mean_loss = loss_total / static_cast<double>(split.count);
    return m;
}

// ---------------------------------------------------------------------------
// the training loop

struct EpochRecord {
    int64_t epoch = 0;
    double train_loss = 0.0;
    Metrics validation;
    Metrics test;
    std::string checkpoint_path;
};

struct TrainConfig {
    double lr = 5e-3;
    int64_t epochs = 150;
    int64_t batch_size = 16;
    double weight_decay = 0.01;
    uint64_t seed = 0;
    std::string out_dir = "run";
    int64_t eval_batch_size = 16;
    /// Optional budget hook: return true after an epoch to stop the run early
    /// (records stay contiguous; remaining epochs are skipped).
    std::function<bool(const EpochRecord&)> stop_after_epoch;
};

inline nlohmann::json epoch_record_to_json(const EpochRecord& r) {
    nlohmann::json j;
    j["epoch"] = r.epoch;
    j["train_loss"] = r.train_loss;
    j["validation"] = metrics_to_json(r.validation);
    j["test"] = metrics_to_json(r.test);
    j["checkpoint"] = r.checkpoint_path;
    return j;
}

struct TrainRun {
    std::vector<EpochRecord> records;
    std::string out_dir;
    std::string log_path;

    /// Epoch with the highest validation F1 (ties to the earlier epoch).
    const EpochRecord& best_validation() const {
        if (records.empty()) throw ConfigError("empty training run");
        size_t best = 0;
        for (size_t i = 1; i < records.size(); ++i) {
            const double a = records[i].validation.f1_defined ? records[i].validation.f1 : -1.0;
            const double b = records[best].validation.f1_defined ? records[best].validation.f1 : -1.0;
            if (a > b) best = i;
        }
        return records[best];
    }
};

inline std::string checkpoint_name(int64_t epoch) {
    std::ostringstream os;
    os << "epoch_" << std::setfill('0') << std::setw(3) << epoch << ".ckpt";
    return os.str();
}

/// Runs the full loop: per epoch one pass of shuffled train mini-batches
/// (final partial batch B' <= B included), a checkpoint, then frozen
/// validation and test evaluation; every epoch appends one JSON line to
/// epochs.jsonl in the run directory.
inline TrainRun run_training(DatasetStreams& data, const TrainConfig& tc, const ProbeConfig& pc,
                             std::ostream* progress = nullptr) {
    if (!(tc.lr > 0) || !std::isfinite(tc.lr))
        throw ConfigError("learning rate must be positive and finite");
    if (tc.epochs < 1) throw ConfigError("epoch count must be >= 1");
    if (tc.batch_size < 1) throw ConfigError("batch size must be >= 1");
    const std::pair<const char*, SplitStream*> split_checks[] = {
        {"train", &data.train}, {"validation", &data.validation}, {"test", &data.test}};
    for (const auto& [name, split] : split_checks) {
        if (split->count <= 0) throw ConfigError(std::string("split '") + name + "' is empty");
    }
    std::filesystem::create_directories(tc.out_dir);
    TrainRun run;
    run.out_dir = tc.out_dir;
    run.log_path = (std::filesystem::path(tc.out_dir) / "epochs.jsonl").string();
    std::ofstream log(run.log_path, std::ios::trunc);
    if (!log) throw DataError("cannot open " + run.log_path);

    Probe<float> model(pc, tc.seed);
    nn::ParamList<float> params = model.parameters();
    AdamW<float> opt;
    opt.lr = static_cast<float>(tc.lr);
    opt.weight_decay = static_cast<float>(tc.weight_decay);
    opt.attach(params);

    std::vector<int64_t> order(static_cast<size_t>(data.train.count));
    for (int64_t i = 0; i < data.train.count; ++i) order[static_cast<size_t>(i)] = i;
    uint64_t step_counter = 0;

    for (int64_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        deterministic_shuffle(order, rng::mix(tc.seed, 0x9d8e0000u + static_cast<uint64_t>(epoch)));
        double loss_total = 0.0;
        for (int64_t begin = 0; begin < data.train.count; begin += tc.batch_size) {
            const int64_t end = std::min(data.train.count, begin + tc.batch_size);
            auto [batch, labels] = stack_batch(data.train, order, begin, end);
            GradTape<float> tape;
            params = model.parameters();
            for (auto& p : params) tape.watch(*p.tensor);
            RngStream drop_rng{rng::mix(tc.seed, 0xd70c0000u + step_counter), 0};
            Ctx<float> ctx{Mode::kTrain, &tape, &drop_rng};
            Tensor logits = model.forward(ctx, batch, /*apply_softmax=*/false);
            Tensor loss = ops::cross_entropy_with_logits(ctx, logits, labels);
            const double loss_v = static_cast<double>(loss.at(0));
            if (!std::isfinite(loss_v))
                throw std::runtime_error("training aborted: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", batch starting " +
                                         std::to_string(begin));
            tape.backward(loss);
            opt.step(params, tape);
            loss_total += loss_v * static_cast<double>(end - begin);
            ++step_counter;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_total / static_cast<double>(data.train.count);
        rec.checkpoint_path =
            (std::filesystem::path(tc.out_dir) / checkpoint_name(epoch)).string();
        CheckpointMeta meta;
        meta.epoch = epoch;
        meta.seed = tc.seed;
        meta.mode = "eval";
        save_probe(model, rec.checkpoint_path, meta);
        rec.validation = evaluate(model, data.validation, tc.eval_batch_size);
        rec.test = evaluate(model, data.test, tc.eval_batch_size);
        log << epoch_record_to_json(rec).dump() << "\n";
        log.flush();
        if (progress) {
            (*progress) << "epoch " << epoch << "/" << tc.epochs << "  train_loss "
                        << std::fixed << std::setprecision(4) << rec.train_loss << "  val_f1 "
                        << (rec.validation.f1_defined
                                ? std::to_string(rec.validation.f1).substr(0, 5)
                                : std::string("n/a"))
                        << "  test_f1 "
                        << (rec.test.f1_defined ? std::to_string(rec.test.f1).substr(0, 5)
                                                : std::string("n/a"))
                        << "\n";
            progress->flush();
        }
        run.records.push_back(rec);
        if (tc.stop_after_epoch && tc.stop_after_epoch(rec)) break;
    }
    return run;
}

}  // namespace lsp::train
