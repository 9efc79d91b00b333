// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors of doubles with reverse-mode autodiff.

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace advfusion::numcore {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class OverflowError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until the first backward touches it
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents' grads.
    std::function<void(Node&)> backward;

    bool is_leaf() const { return parents.empty(); }
    std::vector<double>& ensure_grad();
};

}  // namespace detail

/// Handle to a tensor node. Copies share storage; use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad = false);
    static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor identity(std::size_t n, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    /// Direct write access. Reserved for leaves (parameter updates, initialization).
    std::span<double> mutable_data();
    double at(std::size_t row, std::size_t col) const;
    double item() const;

    bool requires_grad() const;
    void set_requires_grad(bool value);
    bool has_grad() const;
    /// All-zero view when no gradient has been accumulated yet.
    std::vector<double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    Tensor clone(bool requires_grad = false) const;
    Tensor detach() const { return clone(false); }
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    /// Reverse sweep from this scalar. Leaf grads accumulate across calls.
    void backward() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

/// Disables tape recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Topologically ordered list of the recorded nodes that reach `loss`;
/// every node appears after all of its inputs.
std::vector<detail::Node*> build_tape(const Tensor& loss);

}  // namespace advfusion::numcore
