#include "cqvpr/context.hpp"

#include <algorithm>
#include <cmath>

#include "cqvpr/errors.hpp"
#include "cqvpr/image.hpp"

namespace cqvpr {

void ContextConfig::validate() const {
  if (num_queries == 0) throw ConfigError("num_queries must be >= 1");
  if (query_dim == 0 || num_heads == 0 || query_dim % num_heads != 0) {
    throw ConfigError("query_dim " + std::to_string(query_dim) +
                      " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
}

namespace {
constexpr double kInitStd = 0.02;

Tensor trainable_randn(const Shape& shape, Rng& rng) {
  return Tensor::randn(shape, rng, kInitStd, /*requires_grad=*/true);
}
}  // namespace

ContextModule::ContextModule(const ContextConfig& config, std::size_t input_dim,
                             Rng& rng)
    : config_(config), input_dim_(input_dim) {
  config_.validate();
  const std::size_t k = config_.num_queries;
  const std::size_t dt = config_.query_dim;
  const std::size_t hidden = config_.mlp_hidden();

  params_.queries = trainable_randn({k, dt}, rng);
  params_.reduce_w = trainable_randn({input_dim, dt}, rng);
  params_.reduce_b = Tensor::zeros({dt}, true);
  params_.cross.wq = trainable_randn({dt, dt}, rng);
  params_.cross.bq = Tensor::zeros({dt}, true);
  params_.cross.wk = trainable_randn({dt, dt}, rng);
  params_.cross.bk = Tensor::zeros({dt}, true);
  params_.cross.wv = trainable_randn({dt, dt}, rng);
  params_.cross.bv = Tensor::zeros({dt}, true);
  params_.cross.wo = trainable_randn({dt, dt}, rng);
  params_.cross.bo = Tensor::zeros({dt}, true);
  params_.mlp_w1 = trainable_randn({k, hidden}, rng);
  params_.mlp_b1 = Tensor::zeros({hidden}, true);
  params_.mlp_w2 = trainable_randn({hidden, dt}, rng);
  params_.mlp_b2 = Tensor::zeros({dt}, true);
}

Tensor ContextModule::reduce_features(const Tensor& pixel_features) const {
  return ops::conv1x1(pixel_features, params_.reduce_w, params_.reduce_b);
}

Tensor ContextModule::update_queries(const Tensor& reduced) const {
  return update_queries_from(params_.queries, reduced);
}

Tensor ContextModule::update_queries_from(const Tensor& t_init,
                                          const Tensor& reduced) const {
  if (reduced.ndim() != 3 || reduced.shape()[2] != config_.query_dim) {
    throw ShapeError("update_queries: reduced grid " +
                     shape_str(reduced.shape()) + " does not end in D_T=" +
                     std::to_string(config_.query_dim));
  }
  const std::size_t n = reduced.shape()[0] * reduced.shape()[1];
  const Tensor flat = ops::reshape(reduced, {n, config_.query_dim});
  const Tensor updated = ops::multi_head_attention(t_init, flat, flat,
                                                   params_.cross,
                                                   config_.num_heads);
  return config_.residual ? ops::add(updated, t_init) : updated;
}

Tensor ContextModule::compute_heatmap(const Tensor& queries,
                                      const Tensor& reduced) const {
  if (queries.ndim() != 2 || reduced.ndim() != 3 ||
      queries.shape()[1] != reduced.shape()[2]) {
    throw ShapeError("compute_heatmap: queries " + shape_str(queries.shape()) +
                     " vs grid " + shape_str(reduced.shape()));
  }
  const std::size_t g0 = reduced.shape()[0], g1 = reduced.shape()[1];
  const Tensor flat = ops::reshape(reduced, {g0 * g1, reduced.shape()[2]});
  const Tensor sims = ops::matmul(queries, ops::transpose2d(flat));  // K x N
  return ops::reshape(sims, {queries.shape()[0], g0, g1});
}

namespace {
// K x G x G -> N x K with the channel normalization applied along K.
Tensor normalized_positions(const Tensor& heatmap, HeatmapNorm norm) {
  const std::size_t k = heatmap.shape()[0];
  const std::size_t n = heatmap.shape()[1] * heatmap.shape()[2];
  const Tensor flat = ops::reshape(heatmap, {k, n});
  const Tensor normed = norm == HeatmapNorm::kSoftmax
                            ? ops::softmax(flat, 0)
                            : ops::l2_normalize(flat, 0);
  return ops::transpose2d(normed);
}
}  // namespace

Tensor ContextModule::context_feature(const Tensor& heatmap) const {
  if (heatmap.ndim() != 3 || heatmap.shape()[0] != config_.num_queries) {
    throw ShapeError("context_feature: heatmap " + shape_str(heatmap.shape()) +
                     " does not lead with K=" +
                     std::to_string(config_.num_queries));
  }
  const std::size_t g0 = heatmap.shape()[1], g1 = heatmap.shape()[2];
  const Tensor by_position = normalized_positions(heatmap, config_.norm);
  const Tensor hidden = ops::gelu(
      ops::add_bias(ops::matmul(by_position, params_.mlp_w1), params_.mlp_b1));
  const Tensor expanded =
      ops::add_bias(ops::matmul(hidden, params_.mlp_w2), params_.mlp_b2);
  return ops::reshape(expanded, {g0, g1, config_.query_dim});
}

Tensor ContextModule::context_feature_weighted(const Tensor& heatmap,
                                               const Tensor& queries) const {
  if (heatmap.ndim() != 3 || queries.ndim() != 2 ||
      heatmap.shape()[0] != queries.shape()[0]) {
    throw ShapeError("context_feature_weighted: heatmap " +
                     shape_str(heatmap.shape()) + " vs queries " +
                     shape_str(queries.shape()));
  }
  const std::size_t g0 = heatmap.shape()[1], g1 = heatmap.shape()[2];
  // weights over K per position, then a convex combination of embeddings
  const Tensor weights = normalized_positions(heatmap, HeatmapNorm::kSoftmax);
  const Tensor mixed = ops::matmul(weights, queries);  // N x D_T
  return ops::reshape(mixed, {g0, g1, queries.shape()[1]});
}

void ContextModule::collect_named_params(const std::string& prefix,
                                         NamedParams& out) const {
  out.emplace_back(prefix + "queries", params_.queries);
  out.emplace_back(prefix + "reduce_w", params_.reduce_w);
  out.emplace_back(prefix + "reduce_b", params_.reduce_b);
  out.emplace_back(prefix + "cross.wq", params_.cross.wq);
  out.emplace_back(prefix + "cross.bq", params_.cross.bq);
  out.emplace_back(prefix + "cross.wk", params_.cross.wk);
  out.emplace_back(prefix + "cross.bk", params_.cross.bk);
  out.emplace_back(prefix + "cross.wv", params_.cross.wv);
  out.emplace_back(prefix + "cross.bv", params_.cross.bv);
  out.emplace_back(prefix + "cross.wo", params_.cross.wo);
  out.emplace_back(prefix + "cross.bo", params_.cross.bo);
  out.emplace_back(prefix + "mlp_w1", params_.mlp_w1);
  out.emplace_back(prefix + "mlp_b1", params_.mlp_b1);
  out.emplace_back(prefix + "mlp_w2", params_.mlp_w2);
  out.emplace_back(prefix + "mlp_b2", params_.mlp_b2);
}

std::vector<std::filesystem::path> export_heatmap_pgm(
    const Tensor& heatmap, const std::filesystem::path& directory) {
  if (heatmap.ndim() != 3) {
    throw ShapeError("export_heatmap_pgm: expected K x G x G heatmap, got " +
                     shape_str(heatmap.shape()));
  }
  std::filesystem::create_directories(directory);
  const std::size_t k = heatmap.shape()[0];
  const std::size_t g0 = heatmap.shape()[1], g1 = heatmap.shape()[2];
  const auto& v = heatmap.value();
  std::vector<std::filesystem::path> written;
  for (std::size_t q = 0; q < k; ++q) {
    const double* slice = v.data() + q * g0 * g1;
    double lo = slice[0], hi = slice[0];
    for (std::size_t i = 1; i < g0 * g1; ++i) {
      lo = std::min(lo, slice[i]);
      hi = std::max(hi, slice[i]);
    }
    const double span = hi - lo;
    std::vector<std::uint8_t> gray(g0 * g1, 0);
    if (span > 0.0) {
      for (std::size_t i = 0; i < g0 * g1; ++i) {
        gray[i] = static_cast<std::uint8_t>(
            std::lround((slice[i] - lo) / span * 255.0));
      }
    }
    const auto path = directory / ("heatmap_q" + std::to_string(q) + ".pgm");
    write_pgm(path, g0, g1, gray);
    written.push_back(path);
  }
  return written;
}

}  // namespace cqvpr
