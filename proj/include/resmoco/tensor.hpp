#ifndef RESMOCO_TENSOR_HPP
#define RESMOCO_TENSOR_HPP

#include <algorithm>
#include <array>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "resmoco/error.hpp"

namespace resmoco {

/// Dense extents of rank 1 to 4. Scalars are represented as {1}.
class Shape {
public:
    static constexpr std::size_t max_rank = 4;

    Shape() = default;

    Shape(std::initializer_list<std::size_t> dims) { assign(dims.begin(), dims.end()); }

    explicit Shape(std::span<const std::size_t> dims) { assign(dims.begin(), dims.end()); }

    [[nodiscard]] std::size_t rank() const noexcept { return rank_; }
    [[nodiscard]] std::size_t operator[](std::size_t i) const { return dims_.at(i); }
    [[nodiscard]] std::span<const std::size_t> dims() const noexcept { return {dims_.data(), rank_}; }

    [[nodiscard]] std::size_t numel() const noexcept {
        std::size_t n = rank_ == 0 ? 0 : 1;
        for (std::size_t i = 0; i < rank_; ++i) {
            n *= dims_[i];
        }
        return n;
    }

    [[nodiscard]] std::string to_string() const {
        std::string s = "(";
        for (std::size_t i = 0; i < rank_; ++i) {
            s += (i ? "," : "") + std::to_string(dims_[i]);
        }
        return s + ")";
    }

    friend bool operator==(const Shape& a, const Shape& b) noexcept {
        return a.rank_ == b.rank_ && std::equal(a.dims_.begin(), a.dims_.begin() + a.rank_, b.dims_.begin());
    }

private:
    template <typename It>
    void assign(It first, It last) {
        const auto n = static_cast<std::size_t>(std::distance(first, last));
        require(n >= 1 && n <= max_rank, ErrorKind::shape_mismatch,
                "rank must be in [1,4], got " + std::to_string(n));
        rank_ = n;
        std::size_t i = 0;
        for (auto it = first; it != last; ++it, ++i) {
            require(*it >= 1, ErrorKind::shape_mismatch, "every extent must be >= 1");
            dims_[i] = *it;
        }
    }

    std::array<std::size_t, max_rank> dims_{};
    std::size_t rank_ = 0;
};

template <typename T>
struct Node;

/// Recorded operations of one forward pass. Insertion order is a topological
/// order, so backward walks the list in reverse.
///
/// Construction makes the tape active for the calling thread; destruction
/// restores whatever was active before. Operations executed with no active
/// tape produce constants.
template <typename T>
class Tape {
public:
    Tape() : previous_(active_) { active_ = this; }
    ~Tape() { active_ = previous_; }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    [[nodiscard]] static Tape* active() noexcept { return active_; }
    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

    void record(std::shared_ptr<Node<T>> node) { nodes_.push_back(std::move(node)); }

    void backward(const std::shared_ptr<Node<T>>& loss);

private:
    template <typename U>
    friend class NoGradGuard;

    static inline thread_local Tape* active_ = nullptr;
    Tape* previous_;
    std::vector<std::shared_ptr<Node<T>>> nodes_;
};

/// Suspends recording for its lifetime (used for teacher forwards and evaluation).
template <typename T>
class NoGradGuard {
public:
    NoGradGuard() : saved_(Tape<T>::active_) { Tape<T>::active_ = nullptr; }
    ~NoGradGuard() { Tape<T>::active_ = saved_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape<T>* saved_;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this->grad and accumulates into inputs that require grad.
    std::function<void(Node&)> backward_fn;

    std::vector<T>& grad_buffer() {
        if (grad.empty()) {
            grad.assign(value.size(), T(0));
        }
        return grad;
    }
};

/// Handle to a node. Copies alias the same storage; `clone()` makes an
/// independent value copy.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor full(const Shape& shape, T fill) {
        auto node = std::make_shared<Node<T>>();
        node->shape = shape;
        node->value.assign(shape.numel(), fill);
        return Tensor(std::move(node));
    }

    static Tensor zeros(const Shape& shape) { return full(shape, T(0)); }
    static Tensor ones(const Shape& shape) { return full(shape, T(1)); }
    static Tensor scalar(T v) { return full(Shape{1}, v); }

    static Tensor from(const Shape& shape, std::vector<T> values) {
        require(values.size() == shape.numel(), ErrorKind::shape_mismatch,
                "value count " + std::to_string(values.size()) + " does not match shape " + shape.to_string());
        auto node = std::make_shared<Node<T>>();
        node->shape = shape;
        node->value = std::move(values);
        return Tensor(std::move(node));
    }

    /// Trainable leaf: gradients accumulate into it on backward.
    static Tensor parameter(const Shape& shape, std::vector<T> values) {
        auto t = from(shape, std::move(values));
        t.node_->requires_grad = true;
        return t;
    }

    [[nodiscard]] bool defined() const noexcept { return static_cast<bool>(node_); }
    [[nodiscard]] const Shape& shape() const { return node_->shape; }
    [[nodiscard]] std::size_t numel() const { return node_->value.size(); }
    [[nodiscard]] std::span<const T> values() const { return node_->value; }
    [[nodiscard]] std::span<T> mutable_values() { return node_->value; }
    [[nodiscard]] T operator[](std::size_t i) const { return node_->value[i]; }

    [[nodiscard]] T item() const {
        require(numel() == 1, ErrorKind::non_scalar_loss, "item() on tensor of shape " + shape().to_string());
        return node_->value[0];
    }

    [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) {
        require(node_->is_leaf, ErrorKind::invalid_argument, "requires_grad can only be set on leaves");
        node_->requires_grad = flag;
    }

    [[nodiscard]] bool has_grad() const { return !node_->grad.empty(); }
    /// Gradient values; zeros when nothing has been accumulated yet.
    [[nodiscard]] std::span<const T> grad() const { return node_->grad_buffer(); }
    [[nodiscard]] std::span<T> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() {
        if (!node_->grad.empty()) {
            std::fill(node_->grad.begin(), node_->grad.end(), T(0));
        }
    }

    [[nodiscard]] Tensor clone() const { return from(shape(), node_->value); }

    [[nodiscard]] const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

template <typename T>
void Tape<T>::backward(const std::shared_ptr<Node<T>>& loss) {
    require(loss->value.size() == 1, ErrorKind::non_scalar_loss,
            "backward needs a scalar loss, got shape " + loss->shape.to_string());
    if (!loss->requires_grad) {
        return;
    }
    loss->grad_buffer()[0] += T(1);
    if (loss->is_leaf) {
        return;
    }
    auto it = std::find(nodes_.rbegin(), nodes_.rend(), loss);
    require(it != nodes_.rend(), ErrorKind::invalid_argument, "loss was not recorded on the active tape");
    for (; it != nodes_.rend(); ++it) {
        Node<T>& node = **it;
        if (!node.grad.empty() && node.backward_fn) {
            node.backward_fn(node);
        }
    }
}

/// Computes d(loss)/d(leaf) for every requires_grad leaf reachable from `loss`.
template <typename T>
void backward(const Tensor<T>& loss) {
    require(loss.numel() == 1, ErrorKind::non_scalar_loss,
            "backward needs a scalar loss, got shape " + loss.shape().to_string());
    Tape<T>* tape = Tape<T>::active();
    require(tape != nullptr || !loss.requires_grad() || loss.node()->is_leaf, ErrorKind::invalid_argument,
            "backward called without an active tape");
    if (tape == nullptr) {
        if (loss.requires_grad()) {
            loss.node()->grad_buffer()[0] += T(1);
        }
        return;
    }
    tape->backward(loss.node());
}

}  // namespace resmoco

#endif  // RESMOCO_TENSOR_HPP
