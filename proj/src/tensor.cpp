// SPDX-License-Identifier: Apache-2.0
#include "lopt/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace lopt {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::vector<double>& detail::Node::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

Tensor::Tensor() : Tensor(Shape{0}) {}

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
    node_->data.assign(numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
    if (numel(shape) != data.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return Tensor(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
    return Tensor(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows,
                      bool requires_grad) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(m * n);
    for (const auto& r : rows) {
        if (r.size() != n) throw ShapeError("tensor: ragged matrix literal");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor(Shape{m, n}, std::move(data), requires_grad);
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->data[i * n + i] = 1.0;
    return t;
}

std::size_t Tensor::dim(std::size_t i) const {
    if (i >= rank()) throw ShapeError("tensor: dim " + std::to_string(i) + " of " + shape_str(shape()));
    return node_->shape[i];
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw ShapeError("tensor: expected a matrix, got " + shape_str(shape()));
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw ShapeError("tensor: expected a matrix, got " + shape_str(shape()));
    return node_->shape[1];
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("tensor: item() on " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
    return node_->data[i * cols() + j];
}

void Tensor::set_requires_grad(bool v) {
    node_->requires_grad = v;
    if (!v) node_->grad.clear();
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::clone(bool requires_grad) const {
    return Tensor(node_->shape, node_->data, requires_grad);
}

Tensor Tensor::from_node(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

namespace {

// Post-order over nodes that require grad; reversed, it is the replay tape.
std::vector<detail::Node*> topo_order(detail::Node* root) {
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            detail::Node* p = node->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

}  // namespace

void backward(const Tensor& root, std::span<const double> seed) {
    detail::Node* r = root.node().get();
    if (seed.size() != r->data.size()) {
        throw ShapeError("backward: seed of " + std::to_string(seed.size()) + " values for " +
                         shape_str(r->shape));
    }
    if (!r->requires_grad) return;
    auto order = topo_order(r);
    for (auto* n : order) {
        if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
    }
    auto& g = r->grad_buffer();
    for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
    }
}

void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    const double one = 1.0;
    backward(loss, std::span<const double>(&one, 1));
}

}  // namespace lopt
