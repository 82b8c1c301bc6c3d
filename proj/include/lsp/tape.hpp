#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lsp/tensor.hpp"

namespace lsp {

/// Records the forward computation as an ordered list of nodes and replays it
/// in reverse to accumulate gradients. Gradients of tensors feeding several
/// consumers add up; gradients of intermediates are dropped as soon as their
/// producing node has run, so peak memory stays close to one activation set.
template <typename S>
class GradTape {
   public:
    using BackwardFn = std::function<void(GradTape<S>&)>;

    /// Marks a tensor as a gradient root (its gradient is kept after
    /// backward) and makes downstream ops record themselves.
    void watch(const TensorT<S>& t) {
        tracked_.insert(t.id());
        leaves_.insert(t.id());
    }

    bool tracks(int64_t id) const { return tracked_.count(id) != 0; }

    bool any_tracked(std::initializer_list<const TensorT<S>*> ts) const {
        for (const auto* t : ts)
            if (t && t->defined() && tracks(t->id())) return true;
        return false;
    }

    /// Registers a backward step for `out`, produced from `ins`.
    void record(std::string name, const TensorT<S>& out,
                std::initializer_list<const TensorT<S>*> ins, BackwardFn fn) {
        (void)ins;
        tracked_.insert(out.id());
        Node n;
        n.out_id = out.id();
        n.name = std::move(name);
        n.fn = std::move(fn);
        nodes_.push_back(std::move(n));
    }

    /// Get-or-create the gradient accumulation buffer for `t` (zeros).
    TensorT<S>& grad_buf(const TensorT<S>& t) {
        auto it = grads_.find(t.id());
        if (it == grads_.end())
            it = grads_.emplace(t.id(), TensorT<S>::zeros(t.shape())).first;
        return it->second;
    }

    const TensorT<S>* find_grad(int64_t id) const {
        auto it = grads_.find(id);
        return it == grads_.end() ? nullptr : &it->second;
    }

    const TensorT<S>& grad_checked(const TensorT<S>& t) const {
        const auto* g = find_grad(t.id());
        if (!g) throw ShapeError("no gradient recorded for tensor id " + std::to_string(t.id()));
        return *g;
    }

    bool has_grad(int64_t id) const { return grads_.count(id) != 0; }

    /// Runs reverse accumulation from `root`. `seed` defaults to ones and
    /// must match the root's shape when given.
    void backward(const TensorT<S>& root, const TensorT<S>& seed = {}) {
        if (root.numel() != 1)
            throw UsageError("backward root must be a scalar, got " + shape_str(root.shape()));
        if (!tracks(root.id()))
            throw ShapeError("backward root was never recorded on this tape");
        if (seed.defined()) {
            if (!same_shape(seed.shape(), root.shape()))
                throw ShapeError("backward seed shape " + shape_str(seed.shape()) +
                                 " does not match root " + shape_str(root.shape()));
            grad_buf(root) = seed.clone();
        } else {
            grad_buf(root) = TensorT<S>::ones(root.shape());
        }
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (!has_grad(it->out_id)) continue;  // branch not on the path to root
            it->fn(*this);
            if (leaves_.count(it->out_id) == 0) grads_.erase(it->out_id);
        }
    }

    size_t node_count() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        grads_.clear();
        tracked_.clear();
        leaves_.clear();
    }

   private:
    struct Node {
        int64_t out_id;
        std::string name;
        BackwardFn fn;
    };

    std::vector<Node> nodes_;
    std::unordered_set<int64_t> tracked_;
    std::unordered_set<int64_t> leaves_;
    std::unordered_map<int64_t, TensorT<S>> grads_;
};

enum class Mode { kTrain, kEval };

/// Execution context threaded through ops and layers: mode switches dropout
/// and batch-norm behaviour, `tape` (optional) records for backward, and
/// `dropout_rng` supplies counter-addressed randomness for masks.
template <typename S>
struct Ctx {
    Mode mode = Mode::kEval;
    GradTape<S>* tape = nullptr;
    RngStream* dropout_rng = nullptr;

    bool recording(std::initializer_list<const TensorT<S>*> ins) const {
        return tape != nullptr && tape->any_tracked(ins);
    }
};

}  // namespace lsp
