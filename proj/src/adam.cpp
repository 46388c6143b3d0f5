#include "cqvpr/adam.hpp"

#include <cmath>
#include <string>

#include "cqvpr/errors.hpp"

namespace cqvpr {

void adam_step(std::vector<std::vector<double>*> params,
               const std::vector<const std::vector<double>*>& grads,
               AdamState& state) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) +
                     " params vs " + std::to_string(grads.size()) + " grads");
  }
  if (state.first_moment.empty()) {
    state.first_moment.resize(params.size());
    state.second_moment.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first_moment[i].assign(params[i]->size(), 0.0);
      state.second_moment[i].assign(params[i]->size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: state holds " +
                     std::to_string(state.first_moment.size()) +
                     " moment arrays for " + std::to_string(params.size()) +
                     " params");
  }

  state.step_count += 1;
  const AdamOptions& o = state.options;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step_count));

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    const auto& g = *grads[i];
    if (g.size() != p.size() || state.first_moment[i].size() != p.size()) {
      throw ShapeError("adam_step: size mismatch for parameter " +
                       std::to_string(i) + " (" + std::to_string(p.size()) +
                       " values, " + std::to_string(g.size()) + " grads)");
    }
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g[j];
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= o.lr * mhat / (std::sqrt(vhat) + o.eps);
    }
  }
}

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, AdamOptions options)
    : params_(std::move(params)) {
  state_.options = options;
}

void AdamOptimizer::step() {
  std::vector<std::vector<double>*> values;
  std::vector<const std::vector<double>*> grads;
  values.reserve(params_.size());
  grads.reserve(params_.size());
  // a parameter that never entered the graph this step has an empty grad;
  // treat it as zero by materializing on demand
  for (auto& p : params_) {
    values.push_back(&p.mutable_value());
    p.node()->ensure_grad();
    grads.push_back(&p.grad());
  }
  adam_step(std::move(values), grads, state_);
}

void AdamOptimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace cqvpr
