#pragma once

#include <utility>
#include <vector>

#include "cqvpr/tensor.hpp"

namespace cqvpr {

struct LossConfig {
  double margin = 0.1;  // m in the global triplet hinge
  double alpha = 1.0;   // weight of the local matching loss
  double beta = 1.0;    // weight of the query matching loss
  std::size_t num_negatives = 5;

  void validate() const;
};

using IndexPairs = std::vector<std::pair<std::size_t, std::size_t>>;

// MNN selections for one (query, positive, negatives...) tuple. Selections
// are recomputed each forward pass but held constant during backward;
// passing a plan pins them across closure re-evaluations (gradcheck).
struct MnnPlan {
  IndexPairs positive_pairs;
  std::vector<IndexPairs> negative_pairs;
};

// sum_j max(||G_q - G_p|| + m - ||G_q - G_nj||, 0), Euclidean distances.
Tensor triplet_global_loss(const Tensor& g_q, const Tensor& g_p,
                           const std::vector<Tensor>& g_negs, double margin);

// Hinge over MNN mean cosine similarity of contextual embeddings (K x D_T).
// Rows are L2-normalized before similarities.
Tensor query_matching_loss(const Tensor& t_q, const Tensor& t_p,
                           const std::vector<Tensor>& t_negs,
                           const MnnPlan* fixed_plan = nullptr);

// Same hinge-over-MNN-mean structure applied to flattened local descriptor
// grids (rows already unit-norm).
Tensor local_mutual_matching_loss(const Tensor& l_q, const Tensor& l_p,
                                  const std::vector<Tensor>& l_negs,
                                  const MnnPlan* fixed_plan = nullptr);

// L = L_g + alpha * L_l + beta * L_c
Tensor total_loss(const Tensor& l_g, const Tensor& l_l, const Tensor& l_c,
                  const LossConfig& config);

// MNN selection over row-dot-product similarities of two 2D tensors, with
// the same tie rules as the f32 matcher (lowest index wins).
IndexPairs mnn_pairs_values(const Tensor& a, const Tensor& b,
                            bool normalize_rows);

// Builds the full selection plan for one tuple; used for pinned gradchecks.
MnnPlan build_query_match_plan(const Tensor& t_q, const Tensor& t_p,
                               const std::vector<Tensor>& t_negs,
                               bool normalize_rows);

}  // namespace cqvpr
