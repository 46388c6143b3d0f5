#include "cqvpr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cqvpr/errors.hpp"

namespace cqvpr {

GradCheckReport grad_check(const GradCheckClosure& closure,
                           const std::vector<Tensor>& inputs, double eps) {
  for (const auto& t : inputs) {
    if (!t.requires_grad()) {
      throw ParameterError("grad_check: all checked inputs must require grad");
    }
  }

  const double base0 = closure(inputs).item();
  const double base1 = closure(inputs).item();
  if (std::memcmp(&base0, &base1, sizeof(double)) != 0) {
    throw DeterminismError(
        "grad_check: two forward passes disagree (non-deterministic closure)");
  }

  // analytic gradients
  for (const auto& t : inputs) const_cast<Tensor&>(t).zero_grad();
  Tensor out = closure(inputs);
  out.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& t : inputs) {
    if (t.grad().empty()) {
      analytic.emplace_back(t.size(), 0.0);
    } else {
      analytic.push_back(t.grad());
    }
  }

  GradCheckReport report;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor t = inputs[ti];
    auto& values = t.mutable_value();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double fp = closure(inputs).item();
      values[i] = saved - eps;
      const double fm = closure(inputs).item();
      values[i] = saved;

      const double fd = (fp - fm) / (2.0 * eps);
      const double ad = analytic[ti][i];
      const double rel =
          std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd));
      report.max_rel_error = std::max(report.max_rel_error, rel);
      ++report.components_checked;
    }
  }
  for (const auto& t : inputs) const_cast<Tensor&>(t).zero_grad();
  return report;
}

double grad_check_max_error(const GradCheckClosure& closure,
                            const std::vector<Tensor>& inputs, double eps) {
  return grad_check(closure, inputs, eps).max_rel_error;
}

}  // namespace cqvpr
