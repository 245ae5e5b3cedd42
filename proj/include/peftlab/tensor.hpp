// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors and the define-by-run tape that records backward
// rules for them.
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "peftlab/errors.hpp"

namespace peftlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
};

/// Shared handle to a dense row-major array. Copies alias the same storage;
/// use clone() for a deep copy.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<TensorNode<T>>()) {
        if (shape.empty()) {
            shape = {1};
        }
        for (auto extent : shape) {
            if (extent == 0) {
                throw dimension_error("tensor extents must be >= 1, got " + shape_str(shape));
            }
        }
        if (data.size() != shape_size(shape)) {
            throw dimension_error("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    explicit operator bool() const { return static_cast<bool>(node_); }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }
    std::size_t cols() const { return node_->shape.back(); }
    std::size_t rows() const { return size() / cols(); }
    std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::vector<T>& storage() { return node_->data; }
    const std::vector<T>& storage() const { return node_->data; }

    T& operator[](std::size_t i) { return node_->data[i]; }
    const T& operator[](std::size_t i) const { return node_->data[i]; }
    T& at(std::size_t r, std::size_t c) { return node_->data[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

    T item() const {
        if (size() != 1) {
            throw contract_error("item() on non-scalar tensor " + shape_str(shape()));
        }
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }

    bool has_grad() const { return !node_->grad.empty(); }
    // Gradient storage belongs to the shared node, so these are callable on
    // const handles (backward rules capture their inputs by value).
    std::span<T> grad() const { return node_->grad; }
    std::vector<T>& ensure_grad() const {
        if (node_->grad.empty()) {
            node_->grad.assign(size(), T(0));
        }
        return node_->grad;
    }
    void zero_grad() const { node_->grad.assign(size(), T(0)); }
    void clear_grad() const {
        node_->grad.clear();
        node_->grad.shrink_to_fit();
    }

    Tensor clone() const {
        return Tensor(node_->shape, node_->data, node_->requires_grad);
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of backward rules. Backward replays the records in exact
/// reverse order, then clears the tape.
template <class T>
class Tape {
public:
    struct Record {
        const char* op;
        std::function<void()> backward;
    };

    void record(const char* op, std::function<void()> backward) {
        records_.push_back({op, std::move(backward)});
    }

    std::size_t size() const { return records_.size(); }
    const std::vector<Record>& records() const { return records_; }
    void clear() { records_.clear(); }

    void backward(Tensor<T>& loss) {
        if (loss.size() != 1) {
            throw contract_error("backward() requires a scalar loss, got " + shape_str(loss.shape()));
        }
        if (!loss.requires_grad()) {
            throw contract_error("backward() on a loss that was not recorded on the tape");
        }
        loss.ensure_grad()[0] += T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            it->backward();
        }
        clear();
    }

private:
    std::vector<Record> records_;
};

namespace detail {
template <class T>
Tape<T>*& active_tape_slot() {
    thread_local Tape<T>* tape = nullptr;
    return tape;
}
}  // namespace detail

template <class T>
Tape<T>* active_tape() {
    return detail::active_tape_slot<T>();
}

/// Makes a tape the recording target for the current thread while alive.
template <class T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : previous_(detail::active_tape_slot<T>()) {
        detail::active_tape_slot<T>() = &tape;
    }
    ~TapeScope() { detail::active_tape_slot<T>() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* previous_;
};

/// Disables tape recording for the current thread while alive.
template <class T>
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::active_tape_slot<T>()) { detail::active_tape_slot<T>() = nullptr; }
    ~NoGradGuard() { detail::active_tape_slot<T>() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape<T>* previous_;
};

/// Runs backward on the active tape.
template <class T>
void backward(Tensor<T>& loss) {
    auto* tape = active_tape<T>();
    if (tape == nullptr) {
        throw contract_error("backward() called with no active tape");
    }
    tape->backward(loss);
}

}  // namespace peftlab
