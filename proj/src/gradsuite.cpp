#include "cqvpr/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "cqvpr/gradcheck.hpp"
#include "cqvpr/losses.hpp"
#include "cqvpr/model.hpp"
#include "cqvpr/ops.hpp"
#include "cqvpr/rng.hpp"

namespace cqvpr {

namespace {

Tensor leaf(const Shape& shape, Rng& rng, double stddev = 1.0) {
  return Tensor::randn(shape, rng, stddev, /*requires_grad=*/true);
}

Tensor fixed(const Shape& shape, Rng& rng, double stddev = 1.0) {
  return Tensor::randn(shape, rng, stddev, /*requires_grad=*/false);
}

// away from the relu kink: |x| >= margin
Tensor leaf_kink_free(const Shape& shape, Rng& rng, double margin) {
  Tensor t = leaf(shape, rng);
  for (auto& v : t.mutable_value()) {
    if (std::abs(v) < margin) v = v < 0.0 ? v - margin : v + margin;
  }
  return t;
}

// weighted sum turns any output into a scalar with non-degenerate grads
Tensor weighted(const Tensor& out, const Tensor& weights) {
  return ops::sum(ops::mul(out, weights));
}

struct SuiteCase {
  std::string name;
  // returns max rel error for one seed, or a negative value to skip the seed
  std::function<double(std::uint64_t seed, double eps)> run;
};

double check(const GradCheckClosure& closure, const std::vector<Tensor>& inputs,
             double eps) {
  return grad_check(closure, inputs, eps).max_rel_error;
}

double run_composite_loss_case(std::uint64_t seed, double eps) {
  PipelineConfig cfg = PipelineConfig::from_preset("tiny");
  cfg.seed = seed;
  Model model(cfg);
  Rng rng(seed ^ 0x5eedULL);

  // A fresh model is too symmetric for a meaningful check: adapter
  // up-projections start at zero (vacuously zero grads upstream) and all
  // descriptors nearly coincide, parking every hinge at its kink. Warm the
  // trainable parameters up with larger random values first.
  for (auto& [name, tensor] : model.named_params()) {
    if (!tensor.requires_grad()) continue;
    auto& v = tensor.mutable_value();
    if (name == "head.gem_p") {
      v[0] = rng.uniform(1.8, 3.2);
    } else if (name.ends_with("adapter.scale")) {
      v[0] = rng.uniform(0.4, 1.0);
    } else {
      for (auto& x : v) x = rng.normal(0.0, 0.3);
    }
  }

  const std::size_t s = cfg.backbone.image_size;
  auto random_image = [&]() {
    Image img = make_image(s, s);
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
    return img;
  };
  const Image img_q = random_image();
  const Image img_p = random_image();
  const std::vector<Image> img_negs = {random_image(), random_image()};

  LossConfig loss_cfg;
  loss_cfg.num_negatives = img_negs.size();

  auto flatten = [](const Tensor& local) {
    return ops::reshape(local,
                        {local.shape()[0] * local.shape()[1], local.shape()[2]});
  };

  auto forward_loss = [&](const MnnPlan* query_plan,
                          const MnnPlan* local_plan) {
    const ImageFeatures q = model.forward(img_q, true);
    const ImageFeatures p = model.forward(img_p, true);
    std::vector<Tensor> g_negs, t_negs, l_negs;
    for (const auto& img : img_negs) {
      const ImageFeatures n = model.forward(img, true);
      g_negs.push_back(n.global_desc);
      t_negs.push_back(n.queries);
      l_negs.push_back(flatten(n.local));
    }
    const Tensor l_g = triplet_global_loss(q.global_desc, p.global_desc,
                                           g_negs, loss_cfg.margin);
    const Tensor l_c =
        query_matching_loss(q.queries, p.queries, t_negs, query_plan);
    const Tensor l_l = local_mutual_matching_loss(
        flatten(q.local), flatten(p.local), l_negs, local_plan);
    return total_loss(l_g, l_l, l_c, loss_cfg);
  };

  // pin the MNN selections at the base point
  const ImageFeatures q0 = model.forward(img_q, true);
  const ImageFeatures p0 = model.forward(img_p, true);
  std::vector<Tensor> t_negs0, l_negs0;
  std::vector<ImageFeatures> negs0;
  for (const auto& img : img_negs) negs0.push_back(model.forward(img, true));
  for (const auto& n : negs0) {
    t_negs0.push_back(n.queries);
    l_negs0.push_back(flatten(n.local));
  }
  MnnPlan query_plan =
      build_query_match_plan(q0.queries, p0.queries, t_negs0, true);
  MnnPlan local_plan =
      build_query_match_plan(flatten(q0.local), flatten(p0.local), l_negs0,
                             false);

  // skip seeds where any relu/clamp/hinge sits too close to its kink: the
  // finite-difference window, scaled by parameter sensitivity, must not
  // cross one
  ops::begin_kink_tracking();
  forward_loss(&query_plan, &local_plan);
  const double margin = ops::end_kink_tracking();
  if (margin < 10.0 * eps) return -1.0;

  // perturb a representative subset of trainable parameters; per-op checks
  // cover the rest component by component
  auto& bb = model.backbone().params().blocks[0];
  auto& ctx = model.context().params();
  auto& head = model.head().params();
  const std::vector<Tensor> checked = {
      bb.adapter.down_w, bb.adapter.up_w, bb.adapter.scale, ctx.queries,
      ctx.reduce_w,      ctx.mlp_w1,      head.gem_p,       head.up2_b};

  const GradCheckClosure closure = [&](const std::vector<Tensor>&) {
    return forward_loss(&query_plan, &local_plan);
  };
  return check(closure, checked, eps);
}

}  // namespace

std::vector<OpGradReport> run_gradient_suite(std::size_t seeds, double eps) {
  std::vector<SuiteCase> cases;

  cases.push_back({"add", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor a = leaf({3, 4}, rng), b = leaf({3, 4}, rng);
    Tensor w = fixed({3, 4}, rng);
    return check([&](const auto&) { return weighted(ops::add(a, b), w); },
                 {a, b}, eps);
  }});
  cases.push_back({"sub", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor a = leaf({2, 5}, rng), b = leaf({2, 5}, rng);
    Tensor w = fixed({2, 5}, rng);
    return check([&](const auto&) { return weighted(ops::sub(a, b), w); },
                 {a, b}, eps);
  }});
  cases.push_back({"mul", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor a = leaf({4, 3}, rng), b = leaf({4, 3}, rng);
    Tensor w = fixed({4, 3}, rng);
    return check([&](const auto&) { return weighted(ops::mul(a, b), w); },
                 {a, b}, eps);
  }});
  cases.push_back({"add_n", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor a = leaf({6}, rng), b = leaf({6}, rng), c = leaf({6}, rng);
    Tensor w = fixed({6}, rng);
    return check(
        [&](const auto&) { return weighted(ops::add_n({a, b, c}), w); },
        {a, b, c}, eps);
  }});
  cases.push_back({"scale_add_scalar", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor a = leaf({5}, rng);
    Tensor w = fixed({5}, rng);
    return check(
        [&](const auto&) {
          return weighted(ops::add_scalar(ops::scale(a, -1.7), 0.4), w);
        },
        {a}, eps);
  }});
  cases.push_back({"scale_by", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor a = leaf({3, 3}, rng);
    Tensor s = leaf({1}, rng);
    Tensor w = fixed({3, 3}, rng);
    return check([&](const auto&) { return weighted(ops::scale_by(a, s), w); },
                 {a, s}, eps);
  }});
  cases.push_back({"add_bias", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor x = leaf({4, 3}, rng);
    Tensor b = leaf({3}, rng);
    Tensor w = fixed({4, 3}, rng);
    return check([&](const auto&) { return weighted(ops::add_bias(x, b), w); },
                 {x, b}, eps);
  }});
  cases.push_back({"matmul", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor a = leaf({4, 5}, rng), b = leaf({5, 3}, rng);
    Tensor w = fixed({4, 3}, rng);
    return check([&](const auto&) { return weighted(ops::matmul(a, b), w); },
                 {a, b}, eps);
  }});
  cases.push_back({"transpose_reshape_slice", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor a = leaf({4, 6}, rng);
    Tensor w = fixed({2, 4}, rng);
    return check(
        [&](const auto&) {
          const Tensor t = ops::transpose2d(a);              // 6 x 4
          const Tensor r = ops::reshape(t, {4, 6});
          const Tensor s = ops::slice_last(r, 1, 3);         // 4 x 2
          return weighted(ops::transpose2d(s), w);
        },
        {a}, eps);
  }});
  cases.push_back({"concat_slice_rows", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor a = leaf({2, 3}, rng), b = leaf({3, 3}, rng);
    Tensor w = fixed({4, 3}, rng);
    return check(
        [&](const auto&) {
          const Tensor stacked = ops::concat_rows({a, b});   // 5 x 3
          return weighted(ops::slice_rows(stacked, 1, 5), w);
        },
        {a, b}, eps);
  }});
  cases.push_back({"concat_last", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor a = leaf({3, 2}, rng), b = leaf({3, 4}, rng);
    Tensor w = fixed({3, 6}, rng);
    return check(
        [&](const auto&) { return weighted(ops::concat_last({a, b}), w); },
        {a, b}, eps);
  }});
  cases.push_back({"softmax", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor x = leaf({3, 7}, rng);
    Tensor w = fixed({3, 7}, rng);
    return check([&](const auto&) { return weighted(ops::softmax(x, 1), w); },
                 {x}, eps);
  }});
  cases.push_back({"softmax_axis0", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor x = leaf({4, 3, 2}, rng);
    Tensor w = fixed({4, 3, 2}, rng);
    return check([&](const auto&) { return weighted(ops::softmax(x, 0), w); },
                 {x}, eps);
  }});
  cases.push_back({"layer_norm", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor x = leaf({3, 4}, rng);
    Tensor gain = leaf({4}, rng), bias = leaf({4}, rng);
    Tensor w = fixed({3, 4}, rng);
    return check(
        [&](const auto&) {
          return weighted(ops::layer_norm(x, gain, bias), w);
        },
        {x, gain, bias}, eps);
  }});
  cases.push_back({"l2_normalize", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor x = leaf({8}, rng);
    Tensor w = fixed({8}, rng);
    return check(
        [&](const auto&) { return weighted(ops::l2_normalize(x, 0), w); }, {x},
        eps);
  }});
  cases.push_back({"relu", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor x = leaf_kink_free({4, 4}, rng, 20.0 * eps);
    Tensor w = fixed({4, 4}, rng);
    return check([&](const auto&) { return weighted(ops::relu(x), w); }, {x},
                 eps);
  }});
  cases.push_back({"gelu", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor x = leaf({4, 4}, rng);
    Tensor w = fixed({4, 4}, rng);
    return check([&](const auto&) { return weighted(ops::gelu(x), w); }, {x},
                 eps);
  }});
  cases.push_back({"sum_mean", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor x = leaf({3, 5}, rng);
    return check(
        [&](const auto&) {
          return ops::add(ops::sum(x), ops::scale(ops::mean(x), 2.5));
        },
        {x}, eps);
  }});
  cases.push_back({"conv1x1", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor x = leaf({3, 3, 4}, rng);
    Tensor wgt = leaf({4, 2}, rng);
    Tensor b = leaf({2}, rng);
    Tensor w = fixed({3, 3, 2}, rng);
    return check(
        [&](const auto&) { return weighted(ops::conv1x1(x, wgt, b), w); },
        {x, wgt, b}, eps);
  }});
  cases.push_back({"transposed_conv2d", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor x = leaf({3, 3, 2}, rng);
    Tensor k = leaf({3, 3, 2, 3}, rng);
    Tensor b = leaf({3}, rng);
    Tensor w = fixed({5, 5, 3}, rng);
    return check(
        [&](const auto&) {
          return weighted(ops::transposed_conv2d(x, k, b, 2, 1), w);
        },
        {x, k, b}, eps);
  }});
  cases.push_back({"gem_pool", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    // positive inputs keep the clamp kink far away
    Tensor x = Tensor::zeros({5, 3}, true);
    for (auto& v : x.mutable_value()) v = rng.uniform(0.1, 2.0);
    Tensor p = Tensor::scalar(rng.uniform(1.5, 3.5), true);
    Tensor w = fixed({3}, rng);
    return check([&](const auto&) { return weighted(ops::gem_pool(x, p), w); },
                 {x, p}, eps);
  }});
  cases.push_back({"euclidean_distance", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor a = leaf({6}, rng), b = leaf({6}, rng);
    return check(
        [&](const auto&) { return ops::euclidean_distance(a, b); }, {a, b},
        eps);
  }});
  cases.push_back({"pair_mean_similarity", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    Tensor a = leaf({4, 3}, rng), b = leaf({5, 3}, rng);
    const IndexPairs pairs = {{0, 1}, {2, 4}, {3, 0}};
    return check(
        [&](const auto&) { return ops::pair_mean_similarity(a, b, pairs); },
        {a, b}, eps);
  }});
  cases.push_back({"multi_head_attention", [](std::uint64_t seed, double eps) {
    Rng rng(seed);
    // moderate weights keep the softmax away from saturation, where the
    // finite-difference window would be dominated by curvature
    const std::size_t d = 4;
    Tensor q = leaf({3, d}, rng), kv = leaf({5, d}, rng);
    ops::AttentionParams p;
    p.wq = leaf({d, d}, rng, 0.25);
    p.bq = leaf({d}, rng, 0.25);
    p.wk = leaf({d, d}, rng, 0.25);
    p.bk = leaf({d}, rng, 0.25);
    p.wv = leaf({d, d}, rng, 0.25);
    p.bv = leaf({d}, rng, 0.25);
    p.wo = leaf({d, d}, rng, 0.25);
    p.bo = leaf({d}, rng, 0.25);
    Tensor w = fixed({3, d}, rng);
    return check(
        [&](const auto&) {
          return weighted(ops::multi_head_attention(q, kv, kv, p, 2), w);
        },
        {q, kv, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo}, eps);
  }});
  cases.push_back({"composite_loss", [](std::uint64_t seed, double eps) {
    // smaller step: the composite stacks many nonlinearities
    return run_composite_loss_case(seed, std::min(eps, 5e-5));
  }});

  std::vector<OpGradReport> reports;
  reports.reserve(cases.size());
  for (const auto& suite_case : cases) {
    OpGradReport report;
    report.name = suite_case.name;
    std::uint64_t seed = 1;
    while (report.seeds_run < seeds) {
      const double err = suite_case.run(seed, eps);
      if (err < 0.0) {
        ++report.seeds_skipped;
      } else {
        report.max_rel_error = std::max(report.max_rel_error, err);
        ++report.seeds_run;
      }
      ++seed;
      if (report.seeds_skipped > seeds * 50) break;
    }
    reports.push_back(std::move(report));
  }
  return reports;
}

bool gradient_suite_passed(const std::vector<OpGradReport>& reports,
                           double tolerance) {
  for (const auto& r : reports) {
    if (r.seeds_run == 0 || r.max_rel_error > tolerance) return false;
  }
  return !reports.empty();
}

}  // namespace cqvpr
