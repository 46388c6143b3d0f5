#include "cqvpr/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "cqvpr/errors.hpp"

namespace cqvpr {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (const std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

void TensorNode::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
}

namespace {
thread_local bool g_grad_mode = true;

std::shared_ptr<TensorNode> make_leaf(Shape shape, std::vector<double> data,
                                      bool requires_grad) {
  if (shape_size(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}
}  // namespace

bool grad_mode_enabled() { return g_grad_mode; }

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(make_leaf(shape, std::vector<double>(shape_size(shape), 0.0),
                          requires_grad));
}

Tensor Tensor::full(const Shape& shape, double fill, bool requires_grad) {
  return Tensor(make_leaf(shape, std::vector<double>(shape_size(shape), fill),
                          requires_grad));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data,
                         bool requires_grad) {
  return Tensor(make_leaf(shape, std::move(data), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(make_leaf({1}, std::vector<double>{v}, requires_grad));
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev,
                     bool requires_grad) {
  return Tensor(make_leaf(
      shape, rng.normal_vector(shape_size(shape), 0.0, stddev), requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }
std::size_t Tensor::ndim() const { return node_->shape.size(); }
bool Tensor::requires_grad() const { return node_->requires_grad; }

const std::vector<double>& Tensor::value() const { return node_->value; }
std::vector<double>& Tensor::mutable_value() { return node_->value; }

const std::vector<double>& Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item() requires a single-element tensor, got " +
                     shape_str(shape()));
  }
  return node_->value[0];
}

double Tensor::at(std::size_t flat_index) const {
  return node_->value.at(flat_index);
}

void Tensor::backward() const {
  if (!node_) throw Error("backward() on undefined tensor");
  if (size() != 1) {
    throw ShapeError("backward() requires a scalar output, got " +
                     shape_str(shape()));
  }

  // Iterative post-order DFS; recursion would overflow on deep graphs.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      TensorNode* parent = node->parents[next_child].get();
      ++next_child;
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

namespace detail {
Tensor make_op_node(Shape shape, std::vector<double> value,
                    std::vector<std::shared_ptr<TensorNode>> parents,
                    std::function<void(TensorNode&)> backward_fn) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_mode_enabled()) {
    bool any = false;
    for (const auto& p : parents) {
      if (p->requires_grad) {
        any = true;
        break;
      }
    }
    if (any) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(node);
}
}  // namespace detail

}  // namespace cqvpr
