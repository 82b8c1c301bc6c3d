#pragma once

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "lsp/common.hpp"
#include "lsp/rng.hpp"

namespace lsp {

/// Allocator that default-initializes scalars (no zero fill) so buffers whose
/// every element is about to be overwritten skip one full memory pass.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = DefaultInitAllocator<U>;
    };
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) == 0)
            ::new (static_cast<void*>(p)) U;
        else
            ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

namespace detail {

/// Recycles large tensor buffers. Network passes allocate and free the same
/// handful of multi-megabyte activation shapes every step; without reuse each
/// round trip goes back to the OS (mmap, fault-in, munmap) and the fault cost
/// dwarfs the arithmetic on top. Freed buffers are parked in capacity-keyed
/// bins and handed back on the next near-fitting request. The retained total
/// is capped (LSP_POOL_MB, 0 disables pooling).
template <typename S>
class BufferPool {
  public:
    using Buffer = std::vector<S, DefaultInitAllocator<S>>;

    static BufferPool& instance() {
        static BufferPool* pool = new BufferPool;  // immortal: no teardown races
        return *pool;
    }

    std::shared_ptr<Buffer> acquire(size_t n) {
        if (pooled(n)) {
            std::lock_guard<std::mutex> lk(mu_);
            // Exact-size reuse only: network shapes recur, so bins converge to
            // the working set and buffer capacities never drift upward.
            auto it = bins_.find(n);
            if (it != bins_.end() && !it->second.empty()) {
                Buffer* raw = it->second.back().release();
                it->second.pop_back();
                held_bytes_ -= n * sizeof(S);
                if (it->second.empty()) bins_.erase(it);
                raw->resize(n);  // capacity already n: no writes, no realloc
                return wrap(raw);
            }
        }
        Buffer* raw = new Buffer(n);
        return pooled(n) ? wrap(raw) : std::shared_ptr<Buffer>(raw);
    }

    void release(Buffer* b) {
        const size_t bytes = b->capacity() * sizeof(S);
        {
            std::lock_guard<std::mutex> lk(mu_);
            if (held_bytes_ + bytes <= max_bytes_) {
                held_bytes_ += bytes;
                bins_[b->capacity()].emplace_back(b);
                return;
            }
        }
        delete b;
    }

  private:
    struct Returner {
        void operator()(Buffer* b) const { BufferPool::instance().release(b); }
    };

    static std::shared_ptr<Buffer> wrap(Buffer* raw) {
        return std::shared_ptr<Buffer>(raw, Returner{});
    }

    bool pooled(size_t n) const { return max_bytes_ > 0 && n * sizeof(S) >= kMinPooledBytes; }

    static size_t configured_cap() {
        if (const char* env = std::getenv("LSP_POOL_MB")) {
            const long long mb = std::atoll(env);
            return mb <= 0 ? 0 : static_cast<size_t>(mb) << 20;
        }
        return size_t(2048) << 20;
    }

    static constexpr size_t kMinPooledBytes = size_t(1) << 20;

    std::mutex mu_;
    std::map<size_t, std::vector<std::unique_ptr<Buffer>>> bins_;
    size_t held_bytes_ = 0;
    const size_t max_bytes_ = configured_cap();
};

}  // namespace detail

/// Dense row-major tensor. Copies are shallow handles onto shared storage;
/// values produced by an operation are never written again, so concurrent
/// readers are safe. Parameters (graph leaves) may be updated in place by
/// their owner between steps.
template <typename S>
class TensorT {
  public:
    using Buffer = std::vector<S, DefaultInitAllocator<S>>;

    TensorT() = default;

    TensorT(Shape shape, std::vector<S> values) : shape_(std::move(shape)) {
        validate_shape(shape_);
        if (numel_of(shape_) != static_cast<int64_t>(values.size()))
            throw ShapeError("data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape_));
        data_ = detail::BufferPool<S>::instance().acquire(values.size());
        std::copy(values.begin(), values.end(), data_->begin());
        id_ = next_id();
    }

    static TensorT zeros(Shape shape) { return filled(std::move(shape), S(0)); }
    static TensorT ones(Shape shape) { return filled(std::move(shape), S(1)); }

    /// Uninitialized storage (possibly recycled); callers must write every
    /// element.
    static TensorT empty(Shape shape) {
        validate_shape(shape);
        TensorT t;
        t.shape_ = std::move(shape);
        t.data_ =
            detail::BufferPool<S>::instance().acquire(static_cast<size_t>(numel_of(t.shape_)));
        t.id_ = next_id();
        return t;
    }

    static TensorT filled(Shape shape, S value) {
        TensorT t = empty(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), value);
        return t;
    }

    static TensorT uniform(Shape shape, S lo, S hi, uint64_t seed) {
        TensorT t = empty(std::move(shape));
        S* p = t.data();
        const int64_t n = t.numel();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i)
            p[i] = lo + static_cast<S>(rng::uniform01(seed, static_cast<uint64_t>(i))) * (hi - lo);
        return t;
    }

    static TensorT normal(Shape shape, S mean, S stddev, uint64_t seed) {
        TensorT t = empty(std::move(shape));
        S* p = t.data();
        const int64_t n = t.numel();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i)
            p[i] = mean + stddev * static_cast<S>(rng::normal01(seed, static_cast<uint64_t>(i)));
        return t;
    }

    static TensorT scalar(S value) { return filled({1}, value); }

    bool defined() const { return static_cast<bool>(data_); }
    const Shape& shape() const { return shape_; }
    int64_t extent(size_t axis) const { return shape_.at(axis); }
    size_t ndim() const { return shape_.size(); }
    int64_t numel() const { return defined() ? static_cast<int64_t>(data_->size()) : 0; }

    S* data() { return data_->data(); }
    const S* data() const { return data_->data(); }
    S at(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    int64_t id() const { return id_; }
    bool requires_grad() const { return requires_grad_; }
    TensorT& set_requires_grad(bool v) {
        requires_grad_ = v;
        return *this;
    }

    /// New handle over the same storage with a different shape (same numel).
    TensorT reshaped(Shape shape) const {
        validate_shape(shape);
        if (numel_of(shape) != numel())
            throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
        TensorT t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        t.id_ = next_id();
        return t;
    }

    /// Deep copy with fresh storage and identity.
    TensorT clone() const {
        TensorT t = empty(shape_);
        std::memcpy(t.data(), data(), sizeof(S) * static_cast<size_t>(numel()));
        return t;
    }

    bool same_bytes(const TensorT& other) const {
        return shape_ == other.shape_ &&
               std::memcmp(data(), other.data(), sizeof(S) * static_cast<size_t>(numel())) == 0;
    }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> out(static_cast<size_t>(numel()));
        for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = static_cast<U>(at(i));
        return TensorT<U>(shape_, std::move(out));
    }

  private:
    static int64_t next_id() {
        static std::atomic<int64_t> counter{1};
        return counter.fetch_add(1, std::memory_order_relaxed);
    }

    Shape shape_;
    std::shared_ptr<Buffer> data_;
    int64_t id_ = 0;
    bool requires_grad_ = false;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

}  // namespace lsp
