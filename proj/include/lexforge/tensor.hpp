#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lexforge/error.hpp"

namespace lexforge {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Allocator with 64-byte alignment. Vectorized kernels peel a scalar prologue
/// up to the first aligned element, so fixed alignment keeps results
/// independent of where the heap places a buffer.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() noexcept = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct TensorNode {
    Shape shape;
    Buffer<T> value;
    Buffer<T> grad;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

/// Shared handle to a dense row-major array. Copies of a Tensor alias the same
/// storage; use clone() for an independent copy.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, const std::vector<T>& values, bool requires_grad = false)
        : Tensor(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad) {}

    Tensor(Shape shape, std::initializer_list<T> values, bool requires_grad = false)
        : Tensor(std::move(shape), Buffer<T>(values), requires_grad) {}

    Tensor(Shape shape, Buffer<T> values, bool requires_grad = false) : node_(std::make_shared<TensorNode<T>>()) {
        for (const auto d : shape)
            if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
        if (lexforge::numel(shape) != values.size())
            throw ShapeError("shape " + shape_str(shape) + " holds " + std::to_string(lexforge::numel(shape)) +
                             " values, got " + std::to_string(values.size()));
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = lexforge::numel(shape);
        return Tensor(std::move(shape), Buffer<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T v) {
        const auto n = lexforge::numel(shape);
        return Tensor(std::move(shape), Buffer<T>(n, v));
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, Buffer<T>{v}); }

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }

    /// Extent of `axis`; negative values count from the end.
    std::size_t dim(int axis) const {
        const int r = static_cast<int>(rank());
        const int a = axis < 0 ? axis + r : axis;
        if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
        return node_->shape[static_cast<std::size_t>(a)];
    }

    std::span<const T> data() const { return node_->value; }
    std::span<T> mutable_data() { return node_->value; }
    Buffer<T>& values() { return node_->value; }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }

    TensorNode<T>& node() const { return *node_; }
    const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of backward rules. Ops push their rule after computing the
/// forward value, so replaying in reverse visits every op after all of its
/// consumers. A tape supports a single backward pass; it is cleared afterwards.
template <typename T>
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return recording_; }

    bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) const {
        if (!recording_) return false;
        for (const auto* t : inputs)
            if (t->requires_grad()) return true;
        return false;
    }

    void record(std::function<void()> backward) { rules_.push_back(std::move(backward)); }

    std::size_t size() const noexcept { return rules_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and runs every rule newest-first. Gradients
    /// accumulate into existing buffers.
    void backward(Tensor<T>& loss) {
        if (loss.numel() != 1) throw ShapeError("backward() needs a scalar, got " + shape_str(loss.shape()));
        if (!loss.requires_grad()) throw InputError("backward() on a tensor that does not require grad");
        loss.mutable_grad()[0] += T(1);
        for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
        rules_.clear();
    }

    void clear() { rules_.clear(); }

private:
    bool recording_;
    std::vector<std::function<void()>> rules_;
};

} // namespace lexforge
