#include "recursor/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "recursor/errors.hpp"

namespace recursor {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto node = std::make_shared<detail::Node>();
  node->value.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(m * n);
  for (const auto& row : rows) {
    if (row.size() != n) throw DimensionError("Tensor::matrix: ragged rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return from({m, n}, std::move(values));
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return from({n}, std::move(values));
}

detail::Node& Tensor::checked() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("dim: axis out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked().value.size(); }

std::span<const double> Tensor::data() const { return checked().value; }

std::span<double> Tensor::mutable_data() { return checked().value; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t i) const { return checked().value.at(i); }

double Tensor::at(std::size_t i, std::size_t j) const {
  const auto& n = checked();
  if (n.shape.size() != 2) throw DimensionError("at(i,j) on non-matrix");
  return n.value.at(i * n.shape[1] + j);
}

std::vector<double> Tensor::to_vector() const { return checked().value; }

bool Tensor::requires_grad() const { return checked().requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  checked().requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return !checked().grad.empty(); }

std::span<const double> Tensor::grad() const {
  const auto& n = checked();
  if (n.grad.empty()) throw ContractError("tensor has no gradient");
  return n.grad;
}

std::span<double> Tensor::mutable_grad() { return checked().ensure_grad(); }

void Tensor::zero_grad() {
  auto& n = checked();
  if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

void Tensor::clear_grad() { checked().grad.clear(); }

const char* Tensor::op_name() const { return checked().op; }

Tensor Tensor::detach() const {
  const auto& n = checked();
  return from(n.shape, n.value);
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::make_result(Shape shape, std::vector<double> values, const char* op,
                           std::vector<Tensor> inputs,
                           std::function<void(detail::Node&)> backward_fn) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& t : inputs) any = any || (t.defined() && t.node_->requires_grad);
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& t : inputs) node->inputs.push_back(t.node_);
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

namespace {

// Post-order over the graph; reversing it gives a valid backward schedule.
std::vector<detail::Node*> topo_order(detail::Node* root) {
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

void Tensor::backward() const {
  auto& root = checked();
  if (root.value.size() != 1) {
    throw ContractError("backward() needs a scalar root, got " + shape_str(root.shape));
  }
  if (!root.requires_grad) return;
  auto order = topo_order(node_.get());
  root.ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->is_leaf()) continue;
    if (!node->grad.empty()) node->backward_fn(*node);
    // Interior gradients are transient.
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

std::vector<std::string> backward_order(const Tensor& root) {
  std::vector<std::string> names;
  if (!root.defined()) return names;
  auto order = topo_order(root.node().get());
  for (auto it = order.rbegin(); it != order.rend(); ++it) names.emplace_back((*it)->op);
  return names;
}

}  // namespace recursor
