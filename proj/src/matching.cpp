#include "cqvpr/matching.hpp"

#include <algorithm>
#include <limits>
#include <string>

#include "cqvpr/errors.hpp"

namespace cqvpr {

namespace {
// first-strictly-greater keeps the lowest index on ties
struct ArgMax {
  float value = -std::numeric_limits<float>::infinity();
  std::size_t index = 0;
  bool seen = false;

  void update(float v, std::size_t i) {
    if (!seen || v > value) {
      value = v;
      index = i;
      seen = true;
    }
  }
};

MatchSet collect_mutual(const std::vector<ArgMax>& row_best,
                        const std::vector<ArgMax>& col_best,
                        std::optional<float> min_sim) {
  MatchSet result;
  for (std::size_t i = 0; i < row_best.size(); ++i) {
    if (!row_best[i].seen) continue;
    const std::size_t j = row_best[i].index;
    if (col_best[j].index != i) continue;
    if (min_sim && row_best[i].value < *min_sim) continue;
    result.pairs.push_back({i, j, row_best[i].value});
  }
  return result;
}
}  // namespace

MatchSet mnn_match(const float* similarities, std::size_t rows,
                   std::size_t cols, std::optional<float> min_sim) {
  if (rows == 0 || cols == 0) return {};
  std::vector<ArgMax> row_best(rows);
  std::vector<ArgMax> col_best(cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const float* row = similarities + i * cols;
    for (std::size_t j = 0; j < cols; ++j) {
      row_best[i].update(row[j], j);
      col_best[j].update(row[j], i);
    }
  }
  return collect_mutual(row_best, col_best, min_sim);
}

MatchSet mnn_match(const std::vector<float>& similarities, std::size_t rows,
                   std::size_t cols, std::optional<float> min_sim) {
  if (similarities.size() != rows * cols) {
    throw ShapeError("mnn_match: matrix size " +
                     std::to_string(similarities.size()) + " != " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
  return mnn_match(similarities.data(), rows, cols, min_sim);
}

MatchSet match_grids(const LocalGrid& a, const LocalGrid& b,
                     std::optional<float> min_sim, std::size_t block_rows) {
  if (a.dim != b.dim) {
    throw ShapeError("match_grids: descriptor dims differ, " +
                     std::to_string(a.dim) + " vs " + std::to_string(b.dim));
  }
  if (block_rows == 0) block_rows = 1;
  const std::size_t na = a.count(), nb = b.count(), d = a.dim;
  if (na == 0 || nb == 0) return {};

  std::vector<ArgMax> row_best(na);
  std::vector<ArgMax> col_best(nb);
  std::vector<float> tile(std::min(block_rows, na) * nb);

  for (std::size_t start = 0; start < na; start += block_rows) {
    const std::size_t stop = std::min(start + block_rows, na);
    // f32 dot products, sequential accumulation: bit-identical across
    // block sizes and to the unblocked oracle
    for (std::size_t i = start; i < stop; ++i) {
      const float* arow = a.data.data() + i * d;
      float* trow = tile.data() + (i - start) * nb;
      for (std::size_t j = 0; j < nb; ++j) {
        const float* brow = b.data.data() + j * d;
        float acc = 0.0f;
        for (std::size_t k = 0; k < d; ++k) acc += arow[k] * brow[k];
        trow[j] = acc;
      }
    }
    for (std::size_t i = start; i < stop; ++i) {
      const float* trow = tile.data() + (i - start) * nb;
      for (std::size_t j = 0; j < nb; ++j) {
        row_best[i].update(trow[j], j);
        col_best[j].update(trow[j], i);
      }
    }
  }
  return collect_mutual(row_best, col_best, min_sim);
}

}  // namespace cqvpr
