#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cqvpr/descriptors.hpp"
#include "cqvpr/matching.hpp"

namespace cqvpr {

struct RankedEntry {
  std::string image_id;
  double score = 0.0;
};

struct RankedList {
  std::string query_id;
  std::string stage;  // "global" | "reranked"
  bool k_clamped = false;  // k exceeded the index size; all entries returned
  std::vector<RankedEntry> entries;
};

// Exact in-memory index over unit-norm global descriptors.
class DescriptorIndex {
 public:
  static DescriptorIndex build(const GlobalStore& store);
  static DescriptorIndex build_from_file(const std::filesystem::path& path);

  // Exact top-k by cosine (dot product on unit norms); ties keep insertion
  // order. k larger than the index returns everything, flagged.
  RankedList search(const std::vector<float>& query, std::size_t k,
                    const std::string& query_id = "") const;

  std::size_t count() const { return store_.count(); }
  std::size_t dim() const { return store_.dim; }
  const std::vector<std::string>& ids() const { return store_.ids; }

 private:
  GlobalStore store_;
};

using LocalGridProvider = std::function<LocalGrid(const std::string& image_id)>;

// Reorders candidates by descending MNN match count between local grids;
// ties keep the global-stage order. Scoring parallelizes across candidates,
// merged deterministically by candidate order.
RankedList rerank(const LocalGrid& query_grid, const RankedList& candidates,
                  const LocalGridProvider& provider, std::size_t workers = 1,
                  std::optional<float> min_sim = std::nullopt);

// CSV schema: query_id,rank,image_id,score,stage (header included).
void write_ranked_csv(const std::filesystem::path& path,
                      const std::vector<RankedList>& lists);
std::vector<RankedList> read_ranked_csv(const std::filesystem::path& path);

}  // namespace cqvpr
