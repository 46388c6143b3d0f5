#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "cqvpr/image.hpp"
#include "cqvpr/index.hpp"

namespace cqvpr {

// Planar UTM-style coordinates in meters; all thresholds are Euclidean.
struct GeoImageRecord {
  std::string id;
  std::string path;
  double easting = 0.0;
  double northing = 0.0;
  std::string split;  // "query" | "reference"
};

struct Dataset {
  std::vector<GeoImageRecord> records;
  std::vector<std::size_t> query_indices;
  std::vector<std::size_t> reference_indices;
  std::unordered_map<std::string, std::size_t> id_to_index;
  std::filesystem::path base_dir;  // manifest directory, resolves rel paths

  std::filesystem::path image_path(std::size_t index) const;
  Image load_image(std::size_t index) const;
};

double geo_distance(const GeoImageRecord& a, const GeoImageRecord& b);

// Manifest CSV with header id,path,easting,northing,split. Errors carry
// 1-based line numbers; duplicate ids name both lines.
Dataset load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path,
                    const std::vector<GeoImageRecord>& records);
Dataset dataset_from_records(std::vector<GeoImageRecord> records,
                             std::filesystem::path base_dir);

struct SyntheticConfig {
  std::uint64_t seed = 42;
  std::size_t num_places = 50;
  std::size_t views_per_place = 8;
  std::size_t image_size = 56;
  double place_spacing_m = 150.0;
};

// Seeded procedural places (oriented gratings + blob landmarks), one view
// per place held out as the query. Same seed => byte-identical output.
Dataset generate_synthetic_dataset(const SyntheticConfig& config,
                                   const std::filesystem::path& out_dir);

struct EvalConfig {
  double distance_threshold_m = 25.0;
  std::vector<std::size_t> recall_ns = {1, 5, 10, 20};
  std::size_t top_k_retrieve = 100;
  bool rerank_enabled = true;

  void validate() const;
};

// R@N = fraction of queries whose top-N contains a reference within the
// distance threshold. Every dataset query must have a ranked list.
std::map<std::size_t, double> recall_at_n(const std::vector<RankedList>& results,
                                          const Dataset& dataset,
                                          const EvalConfig& config);

void write_metrics_csv(const std::filesystem::path& path,
                       const std::map<std::size_t, double>& recalls);

struct MiningConfig {
  double positive_radius_m = 10.0;
  double negative_radius_m = 25.0;
  std::size_t num_negatives = 5;
  std::uint64_t seed = 42;
};

struct TrainingTuple {
  std::size_t query_index = 0;
  std::size_t positive_index = 0;
  std::vector<std::size_t> negative_indices;
};

struct MiningResult {
  std::vector<TrainingTuple> tuples;
  std::size_t skipped_no_positive = 0;
  std::size_t skipped_no_negative = 0;
};

// Weak supervision: the positive is the most descriptor-similar reference
// within the positive radius; negatives are sampled uniformly (seeded)
// beyond the negative radius. descriptors_by_record is indexed like
// dataset.records and must hold unit-norm vectors for queries/references.
MiningResult mine_tuples(const Dataset& dataset,
                         const std::vector<std::vector<float>>& descriptors_by_record,
                         const MiningConfig& config);

}  // namespace cqvpr
