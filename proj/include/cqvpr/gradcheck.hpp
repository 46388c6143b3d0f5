#pragma once

#include <functional>
#include <vector>

#include "cqvpr/tensor.hpp"

namespace cqvpr {

// Scalar-valued closure over the given leaf tensors. The closure must be
// deterministic: it is evaluated twice at the base point and the two values
// are compared bitwise before any differencing happens.
using GradCheckClosure = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t components_checked = 0;
};

// Compares reverse-mode gradients against central finite differences in f64.
// Relative error per component: |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
// Throws DeterminismError when two forward passes disagree.
GradCheckReport grad_check(const GradCheckClosure& closure,
                           const std::vector<Tensor>& inputs,
                           double eps = 1e-3);

double grad_check_max_error(const GradCheckClosure& closure,
                            const std::vector<Tensor>& inputs,
                            double eps = 1e-3);

}  // namespace cqvpr
