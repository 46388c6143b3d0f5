#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cqvpr/ops.hpp"
#include "cqvpr/rng.hpp"
#include "cqvpr/tensor.hpp"

namespace cqvpr {

// How the per-position K-vector of heatmap values is normalized before the
// expansion MLP, and which context feature variant is produced.
enum class HeatmapNorm { kSoftmax, kL2 };
enum class ContextFeatureMode { kMlp, kWeightedQueries };

struct ContextConfig {
  std::size_t num_queries = 10;  // K
  std::size_t query_dim = 32;    // D_T
  std::size_t num_heads = 8;
  bool residual = false;  // Eq-style single cross-attention layer, no residual
  HeatmapNorm norm = HeatmapNorm::kSoftmax;
  ContextFeatureMode feature_mode = ContextFeatureMode::kMlp;

  std::size_t mlp_hidden() const { return 4 * num_queries; }
  void validate() const;
};

struct ContextParams {
  Tensor queries;             // T_init, K x D_T, trainable
  Tensor reduce_w, reduce_b;  // D_C -> D_T, shared by heatmap and attention
  ops::AttentionParams cross;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // K -> 4K -> D_T
};

// Learnable contextual queries: one shared K x D_T parameter updated per
// image by cross attention into an image-conditioned embedding.
class ContextModule {
 public:
  ContextModule(const ContextConfig& config, std::size_t input_dim, Rng& rng);

  // G x G x D_C -> G x G x D_T via the shared 1x1 reduction.
  Tensor reduce_features(const Tensor& pixel_features) const;

  // Cross attention: queries = T, keys = values = flattened reduced grid.
  Tensor update_queries(const Tensor& reduced) const;
  Tensor update_queries_from(const Tensor& t_init, const Tensor& reduced) const;

  // H[k, i, j] = dot(T[k], reduced[i, j]); K x G x G.
  Tensor compute_heatmap(const Tensor& queries, const Tensor& reduced) const;

  // Per position: normalize the K heatmap channels, then expand K -> D_T.
  Tensor context_feature(const Tensor& heatmap) const;

  // Ablation variant: softmax weights over K combine the query embeddings.
  Tensor context_feature_weighted(const Tensor& heatmap,
                                  const Tensor& queries) const;

  const ContextConfig& config() const { return config_; }
  ContextParams& params() { return params_; }
  const ContextParams& params() const { return params_; }
  std::size_t input_dim() const { return input_dim_; }

  void collect_named_params(const std::string& prefix, NamedParams& out) const;

 private:
  ContextConfig config_;
  std::size_t input_dim_;  // D_C
  ContextParams params_;
};

// One min-max normalized 8-bit PGM per query slice: heatmap_q<k>.pgm.
std::vector<std::filesystem::path> export_heatmap_pgm(
    const Tensor& heatmap, const std::filesystem::path& directory);

}  // namespace cqvpr
