#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "cqvpr/tensor.hpp"

namespace cqvpr::ops {

// Elementwise; shapes must match exactly. The only broadcast in the library
// is add_bias over the last dimension plus the explicit scalar-tensor ops.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_n(const std::vector<Tensor>& terms);

Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
// Elementwise multiply by a trainable single-element tensor.
Tensor scale_by(const Tensor& a, const Tensor& s);

// x: [... x C], bias: [C]
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);

Tensor concat_last(const std::vector<Tensor>& parts);
// Half-open column range along the last axis.
Tensor slice_last(const Tensor& a, std::size_t from, std::size_t to);

// 2D row stacking / half-open row range.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t from, std::size_t to);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-6);

// Slices of zero norm map to zero; indices of such slices are reported
// through `zero_slices` when non-null.
Tensor l2_normalize(const Tensor& x, std::size_t axis,
                    std::vector<std::size_t>* zero_slices = nullptr);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// x: [H x W x Cin], weights: [Cin x Cout], bias: [Cout]
Tensor conv1x1(const Tensor& x, const Tensor& weights, const Tensor& bias);

std::size_t transposed_conv2d_output_size(std::size_t input_size,
                                          std::size_t kernel_size,
                                          std::size_t stride,
                                          std::size_t padding);

// x: [H x W x Cin], kernel: [kh x kw x Cin x Cout], bias: [Cout]
Tensor transposed_conv2d(const Tensor& x, const Tensor& kernel,
                         const Tensor& bias, std::size_t stride,
                         std::size_t padding);

// x: [N x C], p: trainable positive scalar. Inputs are clamped to >= 1e-6
// before the p-th power.
Tensor gem_pool(const Tensor& x, const Tensor& p);

Tensor euclidean_distance(const Tensor& a, const Tensor& b);

// Mean of dot(A[i], B[j]) over the given row pairs; 0 for an empty set.
// The pair list is a constant of the graph: gradients flow through the
// similarity values, never through the selection.
Tensor pair_mean_similarity(const Tensor& a, const Tensor& b,
                            const std::vector<std::pair<std::size_t, std::size_t>>& pairs);

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// Standard scaled dot-product attention over 2D token matrices
// (queries [Nq x D], keys/values [Nk x D]); no dropout.
Tensor multi_head_attention(const Tensor& queries, const Tensor& keys,
                            const Tensor& values, const AttentionParams& params,
                            std::size_t num_heads);

// Kink tracking for finite-difference checks: while enabled (thread-local),
// relu, gem_pool and euclidean_distance record how close any value came to
// their non-differentiable points. Sampling loops skip seeds whose margin
// is too small instead of comparing subgradients.
void begin_kink_tracking();
double end_kink_tracking();  // min distance observed; +inf if none

}  // namespace cqvpr::ops
