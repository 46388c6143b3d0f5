#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cqvpr/rng.hpp"

namespace cqvpr {

using Shape = std::vector<std::size_t>;

class Tensor;
// Checkpointable (name, tensor) pairs in a stable order.
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// One node of the reverse-mode graph. Values are f64; descriptor storage
// downcasts to f32 at the IO boundary, never inside a training graph.
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into parents. Empty for leaves.
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad();
};

// Value-semantics handle over a shared graph node. Copying a Tensor aliases
// the node; tensors are immutable after a forward pass except through the
// optimizer, which owns the parameter update step.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double fill, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t ndim() const;
  bool requires_grad() const;

  const std::vector<double>& value() const;
  // Direct mutation; valid only on leaves (optimizer updates, test setup).
  std::vector<double>& mutable_value();
  // Grad of a leaf after backward(); empty vector when never accumulated.
  const std::vector<double>& grad() const;
  void zero_grad();

  double item() const;
  double at(std::size_t flat_index) const;

  // Reverse pass from a scalar output; accumulates into every reachable
  // leaf with requires_grad. May be called repeatedly to accumulate.
  void backward() const;

  std::shared_ptr<TensorNode> node() const { return node_; }
  TensorNode* raw() const { return node_.get(); }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Thread-local switch: when off, ops record neither parents nor backward
// closures (inference mode). Confined to one worker per graph.
bool grad_mode_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {
// Creates a node; wires parents/backward only if grad mode is on and some
// parent requires grad.
Tensor make_op_node(Shape shape, std::vector<double> value,
                    std::vector<std::shared_ptr<TensorNode>> parents,
                    std::function<void(TensorNode&)> backward_fn);
}  // namespace detail

}  // namespace cqvpr
