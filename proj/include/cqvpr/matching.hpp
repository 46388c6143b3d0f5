#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "cqvpr/descriptors.hpp"

namespace cqvpr {

struct MatchPair {
  std::size_t index_a = 0;
  std::size_t index_b = 0;
  float similarity = 0.0f;
};

// Mutual-nearest-neighbor pairs; one-to-one by construction, ordered by
// index_a. The pair count is the re-ranking score.
struct MatchSet {
  std::vector<MatchPair> pairs;
  std::size_t count() const { return pairs.size(); }
};

// (i, j) is kept iff j is the argmax of row i AND i is the argmax of column
// j; ties resolve to the lowest index. Pairs below min_sim are dropped when
// the threshold is set. An empty matrix yields an empty set.
MatchSet mnn_match(const float* similarities, std::size_t rows,
                   std::size_t cols,
                   std::optional<float> min_sim = std::nullopt);
MatchSet mnn_match(const std::vector<float>& similarities, std::size_t rows,
                   std::size_t cols,
                   std::optional<float> min_sim = std::nullopt);

// Cosine MNN between two local grids. The U^2 x U^2 similarity matrix is
// materialized in row blocks of at most block_rows to bound memory; the
// result is identical to the single-block computation.
MatchSet match_grids(const LocalGrid& a, const LocalGrid& b,
                     std::optional<float> min_sim = std::nullopt,
                     std::size_t block_rows = 1024);

}  // namespace cqvpr
