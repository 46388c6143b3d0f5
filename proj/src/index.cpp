#include "cqvpr/index.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "cqvpr/errors.hpp"
#include "cqvpr/workers.hpp"

namespace cqvpr {

DescriptorIndex DescriptorIndex::build(const GlobalStore& store) {
  if (store.data.size() != store.count() * store.dim) {
    throw FormatError("descriptor store payload does not match count*dim");
  }
  std::unordered_map<std::string, std::size_t> seen;
  for (std::size_t i = 0; i < store.ids.size(); ++i) {
    const auto [it, inserted] = seen.emplace(store.ids[i], i);
    if (!inserted) {
      throw DataError("duplicate image id '" + store.ids[i] + "' at rows " +
                      std::to_string(it->second) + " and " + std::to_string(i));
    }
  }
  DescriptorIndex index;
  index.store_ = store;
  return index;
}

DescriptorIndex DescriptorIndex::build_from_file(
    const std::filesystem::path& path) {
  return build(load_global_store(path));
}

RankedList DescriptorIndex::search(const std::vector<float>& query,
                                   std::size_t k,
                                   const std::string& query_id) const {
  if (k == 0) throw ParameterError("search: k must be >= 1");
  RankedList result;
  result.query_id = query_id;
  result.stage = "global";
  if (store_.count() == 0) return result;
  if (query.size() != store_.dim) {
    throw ShapeError("search: query dim " + std::to_string(query.size()) +
                     " != index dim " + std::to_string(store_.dim));
  }

  const std::size_t n = store_.count();
  std::vector<float> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = store_.row(i);
    float acc = 0.0f;
    for (std::size_t d = 0; d < store_.dim; ++d) acc += row[d] * query[d];
    scores[i] = acc;
  }

  if (k >= n) {
    result.k_clamped = k > n;
    k = n;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  // score descending, insertion order on ties
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&scores](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  result.entries.reserve(k);
  for (std::size_t r = 0; r < k; ++r) {
    result.entries.push_back(
        {store_.ids[order[r]], static_cast<double>(scores[order[r]])});
  }
  return result;
}

RankedList rerank(const LocalGrid& query_grid, const RankedList& candidates,
                  const LocalGridProvider& provider, std::size_t workers,
                  std::optional<float> min_sim) {
  const std::size_t n = candidates.entries.size();
  std::vector<std::size_t> counts(n, 0);
  parallel_for(n, workers, [&](std::size_t i) {
    const LocalGrid grid = provider(candidates.entries[i].image_id);
    counts[i] = match_grids(query_grid, grid, min_sim).count();
  });

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  // stable: ties keep the global-stage relative order
  std::stable_sort(order.begin(), order.end(),
                   [&counts](std::size_t a, std::size_t b) {
                     return counts[a] > counts[b];
                   });

  RankedList result;
  result.query_id = candidates.query_id;
  result.stage = "reranked";
  result.k_clamped = candidates.k_clamped;
  result.entries.reserve(n);
  for (const std::size_t i : order) {
    result.entries.push_back({candidates.entries[i].image_id,
                              static_cast<double>(counts[i])});
  }
  return result;
}

namespace {
std::string format_score(double score, const std::string& stage) {
  char buf[64];
  if (stage == "reranked") {
    // match counts are integers
    std::snprintf(buf, sizeof(buf), "%.0f", score);
  } else {
    std::snprintf(buf, sizeof(buf), "%.6f", score);
  }
  return buf;
}
}  // namespace

void write_ranked_csv(const std::filesystem::path& path,
                      const std::vector<RankedList>& lists) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "query_id,rank,image_id,score,stage\n";
  for (const auto& list : lists) {
    for (std::size_t r = 0; r < list.entries.size(); ++r) {
      f << list.query_id << ',' << (r + 1) << ',' << list.entries[r].image_id
        << ',' << format_score(list.entries[r].score, list.stage) << ','
        << list.stage << '\n';
    }
  }
  if (!f) throw IoError("short write to " + path.string());
}

std::vector<RankedList> read_ranked_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != "query_id,rank,image_id,score,stage") {
    throw FormatError(path.string() + ": missing ranked-CSV header");
  }
  std::vector<RankedList> lists;
  // (query_id, stage) runs are contiguous in files we write
  std::size_t line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string query_id, rank_s, image_id, score_s, stage;
    if (!std::getline(ss, query_id, ',') || !std::getline(ss, rank_s, ',') ||
        !std::getline(ss, image_id, ',') || !std::getline(ss, score_s, ',') ||
        !std::getline(ss, stage)) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": malformed row");
    }
    double score = 0.0;
    try {
      score = std::stod(score_s);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": bad score '" + score_s + "'");
    }
    if (lists.empty() || lists.back().query_id != query_id ||
        lists.back().stage != stage) {
      RankedList list;
      list.query_id = query_id;
      list.stage = stage;
      lists.push_back(std::move(list));
    }
    lists.back().entries.push_back({image_id, score});
  }
  return lists;
}

}  // namespace cqvpr
