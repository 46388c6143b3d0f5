#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cqvpr/adam.hpp"
#include "cqvpr/errors.hpp"
#include "cqvpr/gradcheck.hpp"
#include "cqvpr/ops.hpp"
#include "cqvpr/rng.hpp"
#include "cqvpr/tensor.hpp"

using namespace cqvpr;

TEST_CASE("matmul identity and forced 1x1 result") {
  const Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  const Tensor b = Tensor::from_data({2, 2}, {3, 4, 5, 6});
  const Tensor prod = ops::matmul(eye, b);
  CHECK(prod.value() == std::vector<double>{3, 4, 5, 6});

  const Tensor row = Tensor::from_data({1, 2}, {1, 2});
  const Tensor col = Tensor::from_data({2, 1}, {3, 4});
  CHECK(ops::matmul(row, col).item() == doctest::Approx(11.0).epsilon(1e-12));
}

TEST_CASE("matmul shape error names both shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({4, 2});
  try {
    ops::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2x3)") != std::string::npos);
    CHECK(msg.find("(4x2)") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum equals column-sum structure") {
  // d/dA sum(A*B) has entry (i,k) = sum_j B[k,j]; checked against both the
  // closed form and central differences
  Rng rng(11);
  Tensor a = Tensor::randn({4, 5}, rng, 1.0, true);
  Tensor b = Tensor::randn({5, 3}, rng, 1.0, true);
  const Tensor out = ops::sum(ops::matmul(a, b));
  out.backward();

  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < 5; ++k) {
      double expected = 0.0;
      for (std::size_t j = 0; j < 3; ++j) expected += b.value()[k * 3 + j];
      CHECK(a.grad()[i * 5 + k] == doctest::Approx(expected).epsilon(1e-12));
    }
  }

  const double fd_err = grad_check_max_error(
      [&](const std::vector<Tensor>&) { return ops::sum(ops::matmul(a, b)); },
      {a, b});
  CHECK(fd_err <= 1e-6);
}

TEST_CASE("softmax spec values") {
  const Tensor uniform = ops::softmax(Tensor::from_data({3}, {0, 0, 0}), 0);
  for (const double v : uniform.value()) {
    CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }

  const Tensor shifted = ops::softmax(Tensor::from_data({2}, {1000, 0}), 0);
  CHECK(shifted.value()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(shifted.value()[1] <= 1e-12);

  const Tensor probs = ops::softmax(Tensor::from_data({3}, {1, 2, 3}), 0);
  CHECK(probs.value()[0] == doctest::Approx(0.09003057).epsilon(1e-6));
  CHECK(probs.value()[1] == doctest::Approx(0.24472847).epsilon(1e-6));
  CHECK(probs.value()[2] == doctest::Approx(0.66524096).epsilon(1e-6));
}

TEST_CASE("softmax sums to one along the chosen axis") {
  Rng rng(5);
  const Tensor x = Tensor::randn({4, 3, 5}, rng, 10.0);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const Tensor s = ops::softmax(x, axis);
    const auto& shape = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < 3; ++i) inner *= shape[i];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        double total = 0.0;
        for (std::size_t l = 0; l < shape[axis]; ++l) {
          total += s.value()[(o * shape[axis] + l) * inner + in];
        }
        CHECK(std::abs(total - 1.0) <= 1e-9);
      }
    }
  }
}

TEST_CASE("layer_norm constant row and two-point row") {
  const Tensor gain = Tensor::full({3}, 1.0);
  const Tensor bias = Tensor::zeros({3});
  const Tensor flat =
      ops::layer_norm(Tensor::from_data({1, 3}, {5, 5, 5}), gain, bias);
  for (const double v : flat.value()) CHECK(std::abs(v) <= 1e-9);

  const Tensor gain2 = Tensor::full({2}, 1.0);
  const Tensor bias2 = Tensor::zeros({2});
  const Tensor two =
      ops::layer_norm(Tensor::from_data({1, 2}, {1, 3}), gain2, bias2);
  CHECK(two.value()[0] == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(two.value()[1] == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("l2_normalize forced values and zero guard") {
  const Tensor v = ops::l2_normalize(Tensor::from_data({2}, {3, 4}), 0);
  CHECK(v.value()[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(v.value()[1] == doctest::Approx(0.8).epsilon(1e-12));

  const Tensor unit = Tensor::from_data({2}, {0.6, 0.8});
  const Tensor same = ops::l2_normalize(unit, 0);
  CHECK(same.value()[0] == doctest::Approx(0.6).epsilon(1e-12));

  std::vector<std::size_t> zero_slices;
  const Tensor z = ops::l2_normalize(Tensor::zeros({3}), 0, &zero_slices);
  CHECK(zero_slices.size() == 1);
  for (const double x : z.value()) CHECK(x == 0.0);
}

TEST_CASE("l2_normalize output norm is 0 or 1") {
  Rng rng(9);
  const Tensor x = Tensor::randn({6, 4}, rng);
  const Tensor n = ops::l2_normalize(x, 1);
  for (std::size_t r = 0; r < 6; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
      sq += n.value()[r * 4 + c] * n.value()[r * 4 + c];
    }
    CHECK(std::abs(std::sqrt(sq) - 1.0) <= 1e-6);
  }
}

TEST_CASE("conv1x1 identity weights and per-pixel matmul oracle") {
  Rng rng(3);
  const Tensor x = Tensor::randn({2, 2, 3}, rng);
  const Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const Tensor zero_bias = Tensor::zeros({3});
  const Tensor same = ops::conv1x1(x, eye, zero_bias);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(same.value()[i] == doctest::Approx(x.value()[i]).epsilon(1e-15));
  }

  const Tensor w = Tensor::randn({3, 2}, rng);
  const Tensor b = Tensor::randn({2}, rng);
  const Tensor out = ops::conv1x1(x, w, b);
  for (std::size_t y = 0; y < 2; ++y) {
    for (std::size_t xx = 0; xx < 2; ++xx) {
      for (std::size_t co = 0; co < 2; ++co) {
        double expect = b.value()[co];
        for (std::size_t ci = 0; ci < 3; ++ci) {
          expect += x.value()[(y * 2 + xx) * 3 + ci] * w.value()[ci * 2 + co];
        }
        CHECK(out.value()[(y * 2 + xx) * 2 + co] ==
              doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("transposed_conv2d output sizes follow the closed form") {
  CHECK(ops::transposed_conv2d_output_size(16, 3, 2, 1) == 31);
  CHECK(ops::transposed_conv2d_output_size(31, 3, 2, 1) == 61);
  // the 14-token reading of the grid lands on 53
  CHECK(ops::transposed_conv2d_output_size(14, 3, 2, 1) == 27);
  CHECK(ops::transposed_conv2d_output_size(27, 3, 2, 1) == 53);
  CHECK(ops::transposed_conv2d_output_size(8, 3, 2, 1) == 15);
  CHECK(ops::transposed_conv2d_output_size(15, 3, 2, 1) == 29);

  for (std::size_t hin = 1; hin <= 24; ++hin) {
    for (std::size_t stride = 1; stride <= 3; ++stride) {
      for (std::size_t pad = 0; pad <= 1; ++pad) {
        const long long expect =
            static_cast<long long>(hin - 1) * stride - 2 * pad + 3;
        if (expect <= 0) continue;
        CHECK(ops::transposed_conv2d_output_size(hin, 3, stride, pad) ==
              static_cast<std::size_t>(expect));
      }
    }
  }
}

TEST_CASE("transposed_conv2d single-pixel scatter oracle") {
  // 1x1x1 input with stride 2, pad 1: only the center kernel tap lands
  const Tensor x = Tensor::from_data({1, 1, 1}, {2.0});
  Tensor k = Tensor::zeros({3, 3, 1, 1});
  for (std::size_t i = 0; i < 9; ++i) {
    k.mutable_value()[i] = static_cast<double>(i + 1);
  }
  const Tensor b = Tensor::from_data({1}, {0.25});
  const Tensor out = ops::transposed_conv2d(x, k, b, 2, 1);
  REQUIRE(out.shape() == Shape{1, 1, 1});
  CHECK(out.value()[0] == doctest::Approx(2.0 * 5.0 + 0.25).epsilon(1e-12));
}

TEST_CASE("transposed_conv2d matches a dense scatter oracle") {
  Rng rng(17);
  const std::size_t hin = 3, win = 3, cin = 2, cout = 2, stride = 2, pad = 1;
  const Tensor x = Tensor::randn({hin, win, cin}, rng);
  const Tensor k = Tensor::randn({3, 3, cin, cout}, rng);
  const Tensor b = Tensor::randn({cout}, rng);
  const Tensor out = ops::transposed_conv2d(x, k, b, stride, pad);
  const std::size_t hout =
      ops::transposed_conv2d_output_size(hin, 3, stride, pad);

  std::vector<double> oracle(hout * hout * cout);
  for (std::size_t p = 0; p < hout * hout; ++p)
    for (std::size_t co = 0; co < cout; ++co)
      oracle[p * cout + co] = b.value()[co];
  for (std::size_t iy = 0; iy < hin; ++iy)
    for (std::size_t ix = 0; ix < win; ++ix)
      for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const long long oy =
              static_cast<long long>(iy * stride + ky) - static_cast<long long>(pad);
          const long long ox =
              static_cast<long long>(ix * stride + kx) - static_cast<long long>(pad);
          if (oy < 0 || ox < 0 || oy >= static_cast<long long>(hout) ||
              ox >= static_cast<long long>(hout))
            continue;
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t co = 0; co < cout; ++co)
              oracle[(static_cast<std::size_t>(oy) * hout +
                      static_cast<std::size_t>(ox)) *
                         cout +
                     co] += x.value()[(iy * win + ix) * cin + ci] *
                            k.value()[((ky * 3 + kx) * cin + ci) * cout + co];
        }
  for (std::size_t i = 0; i < oracle.size(); ++i) {
    CHECK(out.value()[i] == doctest::Approx(oracle[i]).epsilon(1e-12));
  }
}

TEST_CASE("transposed_conv2d rejects non-positive output size") {
  const Tensor x = Tensor::zeros({1, 1, 1});
  const Tensor k = Tensor::zeros({1, 1, 1, 1});
  const Tensor b = Tensor::zeros({1});
  // (1-1)*1 - 2*1 + 1 = -1
  CHECK_THROWS_AS(ops::transposed_conv2d(x, k, b, 1, 1), ShapeError);
}

TEST_CASE("gem_pool p=1 is the arithmetic mean") {
  Rng rng(23);
  Tensor x = Tensor::zeros({6, 3});
  for (auto& v : x.mutable_value()) v = rng.uniform(0.05, 2.0);
  const Tensor pooled = ops::gem_pool(x, Tensor::scalar(1.0));
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < 6; ++r) mean += x.value()[r * 3 + c];
    mean /= 6.0;
    CHECK(pooled.value()[c] == doctest::Approx(mean).epsilon(1e-9));
  }
}

TEST_CASE("gem_pool direct evaluation and max limit") {
  const Tensor x = Tensor::from_data({2, 1}, {1.0, 2.0});
  const Tensor pooled = ops::gem_pool(x, Tensor::scalar(3.0));
  CHECK(pooled.value()[0] == doctest::Approx(std::cbrt(4.5)).epsilon(1e-9));
  CHECK(pooled.value()[0] == doctest::Approx(1.65096).epsilon(1e-5));

  Rng rng(29);
  Tensor pos = Tensor::zeros({10, 4});
  for (auto& v : pos.mutable_value()) v = rng.uniform(0.2, 3.0);
  const Tensor near_max = ops::gem_pool(pos, Tensor::scalar(100.0));
  for (std::size_t c = 0; c < 4; ++c) {
    double mx = 0.0;
    for (std::size_t r = 0; r < 10; ++r)
      mx = std::max(mx, pos.value()[r * 4 + c]);
    CHECK(std::abs(near_max.value()[c] - mx) / mx <= 0.01);
  }
}

TEST_CASE("gem_pool rejects non-positive p") {
  const Tensor x = Tensor::full({2, 2}, 1.0);
  CHECK_THROWS_AS(ops::gem_pool(x, Tensor::scalar(0.0)), ParameterError);
  CHECK_THROWS_AS(ops::gem_pool(x, Tensor::scalar(-1.0)), ParameterError);
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
  std::vector<double> param = {1.0, -2.0, 3.0};
  const std::vector<double> grad = {0.0, 0.0, 0.0};
  AdamState state;
  std::vector<std::vector<double>*> params = {&param};
  adam_step(params, {&grad}, state);
  CHECK(param == std::vector<double>{1.0, -2.0, 3.0});
  CHECK(state.step_count == 1);
}

TEST_CASE("adam first step moves by about lr, bias-corrected") {
  std::vector<double> param = {1.0};
  const std::vector<double> grad = {1.0};
  AdamState state;
  state.options.lr = 1e-5;
  std::vector<std::vector<double>*> params = {&param};
  adam_step(params, {&grad}, state);
  // mhat = vhat = 1 after bias correction: step = lr / (1 + eps)
  CHECK(param[0] == doctest::Approx(1.0 - 1e-5).epsilon(1e-9));
}

TEST_CASE("adam two constant-gradient steps match scalar reference") {
  std::vector<double> param = {0.5};
  const std::vector<double> grad = {0.3};
  AdamState state;
  state.options.lr = 1e-3;
  std::vector<std::vector<double>*> params = {&param};
  adam_step(params, {&grad}, state);
  adam_step(params, {&grad}, state);

  double p = 0.5, m = 0.0, v = 0.0;
  const AdamOptions o = state.options;
  for (int t = 1; t <= 2; ++t) {
    m = o.beta1 * m + (1 - o.beta1) * 0.3;
    v = o.beta2 * v + (1 - o.beta2) * 0.09;
    const double mhat = m / (1 - std::pow(o.beta1, t));
    const double vhat = v / (1 - std::pow(o.beta2, t));
    p -= o.lr * mhat / (std::sqrt(vhat) + o.eps);
  }
  CHECK(param[0] == doctest::Approx(p).epsilon(1e-15));
  CHECK(state.step_count == 2);
}

TEST_CASE("adam rejects shape mismatch") {
  std::vector<double> param = {1.0, 2.0};
  const std::vector<double> grad = {1.0};
  AdamState state;
  std::vector<std::vector<double>*> params = {&param};
  CHECK_THROWS_AS(adam_step(params, {&grad}, state), ShapeError);
}

TEST_CASE("forward passes are deterministic for a fixed seed") {
  auto run = []() {
    Rng rng(77);
    const Tensor x = Tensor::randn({5, 6}, rng);
    const Tensor g = Tensor::full({6}, 1.0);
    const Tensor b = Tensor::zeros({6});
    return ops::softmax(ops::layer_norm(x, g, b), 1).value();
  };
  CHECK(run() == run());
}
