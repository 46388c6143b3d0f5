#pragma once

#include <cstdint>
#include <vector>

#include "cqvpr/tensor.hpp"

namespace cqvpr {

struct AdamOptions {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moments for one parameter list; shapes mirror the parameters.
struct AdamState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step_count = 0;
  AdamOptions options;
};

// Standard Adam with bias correction applied to `params` in place.
// `grads[i]` must match `params[i]` in length. Initializes empty moments.
void adam_step(std::vector<std::vector<double>*> params,
               const std::vector<const std::vector<double>*>& grads,
               AdamState& state);

// Convenience wrapper over trainable tensors: reads each tensor's grad,
// updates its value, leaves grads untouched (call zero_grad separately).
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, AdamOptions options);

  void step();
  void zero_grad();

  const AdamState& state() const { return state_; }
  AdamState& mutable_state() { return state_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamState state_;
};

}  // namespace cqvpr
