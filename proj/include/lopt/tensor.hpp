// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lopt {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    // Interior nodes only. Reads this->grad, accumulates into parents.
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
    std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Handle to a dense row-major float64 array that may be linked into a
/// reverse-mode graph. Copies share storage; use clone() for a deep copy.
class Tensor {
public:
    Tensor();
    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad = false);
    static Tensor identity(std::size_t n);

    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const;
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const { return node_->data; }
    std::span<double> mutable_data() { return node_->data; }
    double item() const;
    double at(std::size_t i, std::size_t j) const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v);
    bool has_grad() const { return !node_->grad.empty(); }
    /// Empty span when no gradient has been accumulated.
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad();

    /// Deep copy of values; the copy is a leaf.
    Tensor clone(bool requires_grad = false) const;
    /// New leaf sharing no graph history, copy of values.
    Tensor detach() const { return clone(false); }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    // Internal plumbing for ops.
    const std::shared_ptr<detail::Node>& node() const { return node_; }
    static Tensor from_node(std::shared_ptr<detail::Node> n);

private:
    std::shared_ptr<detail::Node> node_;
};

/// Gradient recording is on by default. While a guard is alive on this
/// thread, ops produce plain values with no graph linkage.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

/// Reverse pass from a scalar. Leaf gradients accumulate across calls;
/// interior gradients are recomputed each call.
void backward(const Tensor& loss);

/// Reverse pass from an arbitrary tensor with an explicit upstream gradient.
void backward(const Tensor& root, std::span<const double> seed);

}  // namespace lopt
