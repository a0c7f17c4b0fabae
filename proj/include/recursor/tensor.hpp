#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace recursor {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  std::vector<double>& ensure_grad();
};

}  // namespace detail

// Dense row-major float64 array with an optional gradient slot. Copies share
// storage; ops build a graph that backward() walks in reverse topological
// order.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writable view; only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag = true);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad();

  // Seeds d(this)/d(this) = 1 and propagates to every reachable tensor that
  // requires grad. Throws ContractError unless this is a single element.
  void backward() const;

  // Same values, no history, no gradient tracking.
  Tensor detach() const;
  Tensor clone() const;

  const char* op_name() const;

  // Builds an op output. `inputs` are recorded only when grad mode is on and
  // at least one input requires grad.
  static Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                            std::vector<Tensor> inputs,
                            std::function<void(detail::Node&)> backward_fn);

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  detail::Node& checked() const;

  std::shared_ptr<detail::Node> node_;
};

// Graph recording switch (thread-local).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Number of distinct nodes reachable from `root`, and the op names in the
// order backward() would visit them.
std::vector<std::string> backward_order(const Tensor& root);

}  // namespace recursor
