#include "cqvpr/losses.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "cqvpr/errors.hpp"
#include "cqvpr/ops.hpp"

namespace cqvpr {

void LossConfig::validate() const {
  if (margin <= 0.0) throw ConfigError("loss margin must be > 0");
  if (alpha < 0.0 || beta < 0.0) throw ConfigError("alpha/beta must be >= 0");
  if (num_negatives == 0) throw ConfigError("num_negatives must be >= 1");
}

Tensor triplet_global_loss(const Tensor& g_q, const Tensor& g_p,
                           const std::vector<Tensor>& g_negs, double margin) {
  if (g_q.shape() != g_p.shape()) {
    throw ShapeError("triplet_global_loss: query/positive dims differ, " +
                     shape_str(g_q.shape()) + " vs " + shape_str(g_p.shape()));
  }
  const Tensor d_pos = ops::euclidean_distance(g_q, g_p);
  std::vector<Tensor> terms;
  terms.reserve(g_negs.size());
  for (const auto& g_n : g_negs) {
    if (g_n.shape() != g_q.shape()) {
      throw ShapeError("triplet_global_loss: negative dims differ, " +
                       shape_str(g_n.shape()) + " vs " + shape_str(g_q.shape()));
    }
    const Tensor d_neg = ops::euclidean_distance(g_q, g_n);
    terms.push_back(ops::relu(
        ops::add_scalar(ops::sub(d_pos, d_neg), margin)));
  }
  if (terms.empty()) return Tensor::scalar(0.0);
  return terms.size() == 1 ? terms[0] : ops::add_n(terms);
}

namespace {
// row-dot-product similarity with MNN selection on plain values; ties break
// to the lowest index, mirroring the f32 matcher
IndexPairs mnn_from_values(const std::vector<double>& a_rows,
                           const std::vector<double>& b_rows, std::size_t na,
                           std::size_t nb, std::size_t d) {
  std::vector<std::size_t> row_arg(na, 0);
  std::vector<double> row_val(na, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> col_arg(nb, 0);
  std::vector<double> col_val(nb, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < na; ++i) {
    for (std::size_t j = 0; j < nb; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k)
        dot += a_rows[i * d + k] * b_rows[j * d + k];
      if (dot > row_val[i]) {
        row_val[i] = dot;
        row_arg[i] = j;
      }
      if (dot > col_val[j]) {
        col_val[j] = dot;
        col_arg[j] = i;
      }
    }
  }
  IndexPairs pairs;
  for (std::size_t i = 0; i < na; ++i) {
    if (col_arg[row_arg[i]] == i) pairs.emplace_back(i, row_arg[i]);
  }
  return pairs;
}

std::vector<double> normalized_rows(const Tensor& t) {
  const std::size_t rows = t.shape()[0], d = t.shape()[1];
  std::vector<double> out(t.value());
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t k = 0; k < d; ++k) sq += out[r * d + k] * out[r * d + k];
    const double norm = std::sqrt(sq);
    if (norm >= 1e-12) {
      for (std::size_t k = 0; k < d; ++k) out[r * d + k] /= norm;
    } else {
      for (std::size_t k = 0; k < d; ++k) out[r * d + k] = 0.0;
    }
  }
  return out;
}

// Shared structure of Eq-9-style losses: hinge over per-negative MNN mean
// similarity minus the positive MNN mean similarity.
Tensor mnn_hinge_loss(const Tensor& e_q, const Tensor& e_p,
                      const std::vector<Tensor>& e_negs, bool normalize_rows_first,
                      const MnnPlan* fixed_plan) {
  if (e_q.ndim() != 2 || e_p.ndim() != 2 || e_q.shape() != e_p.shape()) {
    throw ShapeError("matching loss: embeddings must share shape, " +
                     shape_str(e_q.shape()) + " vs " + shape_str(e_p.shape()));
  }
  if (fixed_plan && fixed_plan->negative_pairs.size() != e_negs.size()) {
    throw ParameterError("matching loss: plan holds " +
                         std::to_string(fixed_plan->negative_pairs.size()) +
                         " negative selections for " +
                         std::to_string(e_negs.size()) + " negatives");
  }

  const Tensor q = normalize_rows_first ? ops::l2_normalize(e_q, 1) : e_q;
  const Tensor p = normalize_rows_first ? ops::l2_normalize(e_p, 1) : e_p;

  const IndexPairs pos_pairs = fixed_plan
                                   ? fixed_plan->positive_pairs
                                   : mnn_pairs_values(e_q, e_p, normalize_rows_first);
  const Tensor s_p = ops::pair_mean_similarity(q, p, pos_pairs);

  std::vector<Tensor> terms;
  terms.reserve(e_negs.size());
  for (std::size_t k = 0; k < e_negs.size(); ++k) {
    const auto& e_n = e_negs[k];
    if (e_n.shape() != e_q.shape()) {
      throw ShapeError("matching loss: negative shape " +
                       shape_str(e_n.shape()) + " differs from query " +
                       shape_str(e_q.shape()));
    }
    const Tensor n = normalize_rows_first ? ops::l2_normalize(e_n, 1) : e_n;
    const IndexPairs neg_pairs =
        fixed_plan ? fixed_plan->negative_pairs[k]
                   : mnn_pairs_values(e_q, e_n, normalize_rows_first);
    const Tensor s_n = ops::pair_mean_similarity(q, n, neg_pairs);
    terms.push_back(ops::relu(ops::sub(s_n, s_p)));
  }
  if (terms.empty()) return Tensor::scalar(0.0);
  return terms.size() == 1 ? terms[0] : ops::add_n(terms);
}
}  // namespace

IndexPairs mnn_pairs_values(const Tensor& a, const Tensor& b,
                            bool normalize_rows) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1]) {
    throw ShapeError("mnn_pairs_values: incompatible shapes " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t d = a.shape()[1];
  if (normalize_rows) {
    return mnn_from_values(normalized_rows(a), normalized_rows(b),
                           a.shape()[0], b.shape()[0], d);
  }
  return mnn_from_values(a.value(), b.value(), a.shape()[0], b.shape()[0], d);
}

MnnPlan build_query_match_plan(const Tensor& t_q, const Tensor& t_p,
                               const std::vector<Tensor>& t_negs,
                               bool normalize_rows) {
  MnnPlan plan;
  plan.positive_pairs = mnn_pairs_values(t_q, t_p, normalize_rows);
  plan.negative_pairs.reserve(t_negs.size());
  for (const auto& t_n : t_negs) {
    plan.negative_pairs.push_back(mnn_pairs_values(t_q, t_n, normalize_rows));
  }
  return plan;
}

Tensor query_matching_loss(const Tensor& t_q, const Tensor& t_p,
                           const std::vector<Tensor>& t_negs,
                           const MnnPlan* fixed_plan) {
  return mnn_hinge_loss(t_q, t_p, t_negs, /*normalize_rows_first=*/true,
                        fixed_plan);
}

Tensor local_mutual_matching_loss(const Tensor& l_q, const Tensor& l_p,
                                  const std::vector<Tensor>& l_negs,
                                  const MnnPlan* fixed_plan) {
  // grids arrive flattened U^2 x dim with unit-norm rows
  return mnn_hinge_loss(l_q, l_p, l_negs, /*normalize_rows_first=*/false,
                        fixed_plan);
}

Tensor total_loss(const Tensor& l_g, const Tensor& l_l, const Tensor& l_c,
                  const LossConfig& config) {
  Tensor result = l_g;
  if (config.alpha != 0.0) {
    result = ops::add(result, ops::scale(l_l, config.alpha));
  }
  if (config.beta != 0.0) {
    result = ops::add(result, ops::scale(l_c, config.beta));
  }
  return result;
}

}  // namespace cqvpr
