#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace captlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the dynamic tape. Leaves have no inputs and no backward rule.
struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::string_view op_kind = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads self.grad and accumulates into the grad of each input that requires it.
  std::function<void(Node& self)> backward_rule;

  void ensure_grad();
};

}  // namespace detail

/// Dense row-major tensor of 64-bit reals.
///
/// A Tensor is a handle: copies share the same storage and tape node, the way
/// framework tensors do. Use clone() or detach() for an independent value.
class Tensor {
 public:
  Tensor();
  explicit Tensor(std::shared_ptr<detail::Node> node);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->values.size(); }
  // Rows/cols view a tensor as a matrix over its last axis.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return node_->values; }
  // Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_values() { return node_->values; }
  double item() const;
  double operator[](std::size_t i) const { return node_->values[i]; }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad();
  void zero_grad();

  std::string_view op_kind() const { return node_->op_kind; }
  bool is_leaf() const { return node_->inputs.empty(); }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  /// Reverse-mode sweep from this scalar. Gradients accumulate.
  void backward() const;

  // Independent leaf with a copy of the values (requires_grad preserved on clone).
  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Thread-local switch: while disabled, operations record nothing on the tape.
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

struct AutogradStats {
  std::uint64_t nodes_recorded = 0;
  std::uint64_t backward_calls = 0;
};

// Per-thread counters, used to prove inference-only paths never touch the tape.
AutogradStats& autograd_stats();

}  // namespace captlab
