#include <doctest.h>

#include <cmath>

#include "cqvpr/errors.hpp"
#include "cqvpr/gradcheck.hpp"
#include "cqvpr/gradsuite.hpp"
#include "cqvpr/ops.hpp"
#include "cqvpr/rng.hpp"

using namespace cqvpr;

TEST_CASE("grad_check on f(x)=sum(x^2) is nearly exact") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  const Tensor out = ops::sum(ops::mul(x, x));
  out.backward();
  CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-12));

  // central differences are exact for quadratics up to round-off
  const double err = grad_check_max_error(
      [&](const std::vector<Tensor>&) { return ops::sum(ops::mul(x, x)); },
      {x});
  CHECK(err <= 1e-8);
}

TEST_CASE("grad_check flags a non-deterministic closure") {
  Tensor x = Tensor::from_data({1}, {1.0}, true);
  int calls = 0;
  const GradCheckClosure closure = [&](const std::vector<Tensor>&) {
    ++calls;
    return ops::scale(x, 1.0 + 1e-9 * calls);
  };
  CHECK_THROWS_AS(grad_check(closure, {x}), DeterminismError);
}

TEST_CASE("grad_check handles hinge kinks when sampled away from them") {
  // |pre-hinge| > 10*eps per the sampling contract
  Rng rng(41);
  const double eps = 1e-3;
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = Tensor::randn({6}, rng, 1.0, true);
    for (auto& v : x.mutable_value()) {
      if (std::abs(v) < 10.0 * eps) v += v < 0 ? -0.05 : 0.05;
    }
    Tensor w = Tensor::randn({6}, rng);
    const double err = grad_check_max_error(
        [&](const std::vector<Tensor>&) {
          return ops::sum(ops::mul(ops::relu(x), w));
        },
        {x}, eps);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("gradient suite passes at 1e-4 over 20 seeds") {
  const auto reports = run_gradient_suite(20);
  CHECK(gradient_suite_passed(reports));
  for (const auto& r : reports) {
    INFO(r.name << " err=" << r.max_rel_error);
    CHECK(r.seeds_run >= 20);
    CHECK(r.max_rel_error <= 1e-4);
  }
}

TEST_CASE("frozen leaves accumulate no gradient") {
  Rng rng(7);
  Tensor frozen = Tensor::randn({3, 3}, rng, 1.0, false);
  Tensor live = Tensor::randn({3, 3}, rng, 1.0, true);
  const Tensor out = ops::sum(ops::mul(frozen, live));
  out.backward();
  CHECK(frozen.grad().empty());
  CHECK(live.grad().size() == 9);
}

TEST_CASE("backward accumulates across calls until zero_grad") {
  Tensor x = Tensor::from_data({1}, {3.0}, true);
  ops::scale(x, 2.0).backward();
  ops::scale(x, 2.0).backward();
  CHECK(x.grad()[0] == doctest::Approx(4.0));
  x.zero_grad();
  ops::scale(x, 2.0).backward();
  CHECK(x.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("NoGradGuard suppresses graph construction") {
  Tensor x = Tensor::from_data({1}, {2.0}, true);
  NoGradGuard guard;
  const Tensor out = ops::scale(x, 3.0);
  CHECK(out.item() == doctest::Approx(6.0));
  CHECK_FALSE(out.requires_grad());
}
