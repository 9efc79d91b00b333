// SPDX-License-Identifier: Apache-2.0

#include "advfusion/numcore/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace advfusion::numcore {

namespace {
thread_local bool tl_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            os << 'x';
        }
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::vector<double>& detail::Node::ensure_grad() {
    if (grad.size() != data.size()) {
        grad.assign(data.size(), 0.0);
    }
    return grad;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    for (auto d : shape) {
        if (d == 0) {
            throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        }
    }
    if (shape.empty() || numcore::numel(shape) != values.size()) {
        throw ShapeError("shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = numcore::numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad) {
    std::vector<double> values;
    const std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& row : rows) {
        if (row.size() != cols) {
            throw ShapeError("ragged matrix literal");
        }
        values.insert(values.end(), row.begin(), row.end());
    }
    return from({rows.size(), cols}, std::move(values), requires_grad);
}

Tensor Tensor::vector(std::initializer_list<double> values, bool requires_grad) {
    return from({values.size()}, std::vector<double>(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

Tensor Tensor::identity(std::size_t n, bool requires_grad) {
    std::vector<double> values(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        values[i * n + i] = 1.0;
    }
    return from({n, n}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) {
        throw std::logic_error("use of undefined tensor");
    }
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    }
    return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
    shape();
    return node_->data;
}

std::span<double> Tensor::mutable_data() {
    shape();
    return node_->data;
}

double Tensor::at(std::size_t row, std::size_t col) const {
    const auto& s = shape();
    if (s.size() != 2 || row >= s[0] || col >= s[1]) {
        throw ShapeError("index (" + std::to_string(row) + "," + std::to_string(col) +
                         ") out of range for " + shape_str(s));
    }
    return node_->data[row * s[1] + col];
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
    shape();
    node_->requires_grad = value;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
    shape();
    if (node_->grad.empty()) {
        return std::vector<double>(node_->data.size(), 0.0);
    }
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
    shape();
    return node_->ensure_grad();
}

void Tensor::zero_grad() {
    if (node_) {
        node_->grad.clear();
    }
}

Tensor Tensor::clone(bool requires_grad) const {
    return from(shape(), node_->data, requires_grad);
}

std::vector<detail::Node*> build_tape(const Tensor& loss) {
    std::vector<detail::Node*> order;
    if (!loss.defined() || !loss.requires_grad()) {
        return order;
    }
    std::unordered_set<const detail::Node*> visited;
    // Iterative post-order DFS; recursion depth would scale with graph depth.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

void Tensor::backward() const {
    if (numel() != 1) {
        throw ShapeError("backward() needs a scalar loss, got " + shape_str(shape()));
    }
    if (!node_->requires_grad) {
        throw std::logic_error("backward() on a tensor that is not on the tape");
    }
    auto tape = build_tape(*this);
    // Interior grads are per-sweep scratch; only leaves accumulate across sweeps.
    for (auto* node : tape) {
        if (!node->is_leaf()) {
            node->grad.assign(node->data.size(), 0.0);
        }
    }
    node_->ensure_grad()[0] += 1.0;
    for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
        auto* node = *it;
        if (node->backward) {
            node->backward(*node);
        }
    }
}

NoGradGuard::NoGradGuard() : previous_(tl_grad_enabled) { tl_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tl_grad_enabled = previous_; }

bool grad_enabled() { return tl_grad_enabled; }

}  // namespace advfusion::numcore
