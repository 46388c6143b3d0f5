#include "cqvpr/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "cqvpr/errors.hpp"
#include "cqvpr/rng.hpp"

namespace cqvpr {

std::filesystem::path Dataset::image_path(std::size_t index) const {
  const std::filesystem::path p = records.at(index).path;
  return p.is_absolute() ? p : base_dir / p;
}

Image Dataset::load_image(std::size_t index) const {
  return read_ppm(image_path(index));
}

double geo_distance(const GeoImageRecord& a, const GeoImageRecord& b) {
  const double de = a.easting - b.easting;
  const double dn = a.northing - b.northing;
  return std::sqrt(de * de + dn * dn);
}

namespace {
std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}
}  // namespace

Dataset dataset_from_records(std::vector<GeoImageRecord> records,
                             std::filesystem::path base_dir) {
  Dataset ds;
  ds.records = std::move(records);
  ds.base_dir = std::move(base_dir);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    if (!ds.id_to_index.emplace(r.id, i).second) {
      throw DataError("duplicate image id '" + r.id + "'");
    }
    if (r.split == "query") {
      ds.query_indices.push_back(i);
    } else if (r.split == "reference") {
      ds.reference_indices.push_back(i);
    } else {
      throw DataError("record '" + r.id + "' has unknown split '" + r.split +
                      "'");
    }
  }
  return ds;
}

Dataset load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line)) {
    throw FormatError(path.string() + ":1: empty manifest, expected header");
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "id,path,easting,northing,split") {
    throw FormatError(path.string() +
                      ":1: bad header, expected id,path,easting,northing,split");
  }

  std::vector<GeoImageRecord> records;
  std::unordered_map<std::string, std::size_t> first_line_of_id;
  std::size_t line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 5) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": expected 5 columns, got " +
                        std::to_string(fields.size()));
    }
    GeoImageRecord rec;
    rec.id = fields[0];
    rec.path = fields[1];
    try {
      std::size_t consumed = 0;
      rec.easting = std::stod(fields[2], &consumed);
      if (consumed != fields[2].size()) throw std::invalid_argument(fields[2]);
      rec.northing = std::stod(fields[3], &consumed);
      if (consumed != fields[3].size()) throw std::invalid_argument(fields[3]);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": unparsable coordinate for id '" + rec.id + "'");
    }
    if (!std::isfinite(rec.easting) || !std::isfinite(rec.northing)) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": non-finite coordinate for id '" + rec.id + "'");
    }
    rec.split = fields[4];
    const auto [it, inserted] = first_line_of_id.emplace(rec.id, line_no);
    if (!inserted) {
      throw DataError(path.string() + ": duplicate id '" + rec.id +
                      "' at lines " + std::to_string(it->second) + " and " +
                      std::to_string(line_no));
    }
    if (rec.split != "query" && rec.split != "reference") {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": unknown split '" + rec.split + "'");
    }
    records.push_back(std::move(rec));
  }
  return dataset_from_records(std::move(records),
                              path.has_parent_path() ? path.parent_path()
                                                     : std::filesystem::path("."));
}

void write_manifest(const std::filesystem::path& path,
                    const std::vector<GeoImageRecord>& records) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "id,path,easting,northing,split\n";
  char buf[64];
  for (const auto& r : records) {
    f << r.id << ',' << r.path << ',';
    std::snprintf(buf, sizeof(buf), "%.3f", r.easting);
    f << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.3f", r.northing);
    f << buf << ',' << r.split << '\n';
  }
  if (!f) throw IoError("short write to " + path.string());
}

namespace {
struct Grating {
  double fx, fy, phase;
  double amp[3];
};

struct Blob {
  double cy, cx, sigma;
  double color[3];
};

// Mixture of oriented gratings plus blob landmarks on a canvas larger than
// the crop so views can shift.
Image render_place_canvas(Rng& rng, std::size_t canvas) {
  Image img = make_image(canvas, canvas);

  double base[3], tilt[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.25, 0.75);
    tilt[c] = rng.uniform(-0.2, 0.2);
  }
  const double gdir = rng.uniform(0.0, 6.283185307179586);

  std::vector<Grating> gratings(4);
  for (auto& g : gratings) {
    const double theta = rng.uniform(0.0, 6.283185307179586);
    const double freq = rng.uniform(2.0, 9.0);
    g.fx = std::cos(theta) * freq;
    g.fy = std::sin(theta) * freq;
    g.phase = rng.uniform(0.0, 6.283185307179586);
    for (int c = 0; c < 3; ++c) g.amp[c] = rng.uniform(-0.16, 0.16);
  }
  std::vector<Blob> blobs(3);
  for (auto& b : blobs) {
    b.cy = rng.uniform(0.15, 0.85) * static_cast<double>(canvas);
    b.cx = rng.uniform(0.15, 0.85) * static_cast<double>(canvas);
    b.sigma = rng.uniform(0.06, 0.16) * static_cast<double>(canvas);
    for (int c = 0; c < 3; ++c) b.color[c] = rng.uniform(-0.45, 0.45);
  }

  const double inv = 1.0 / static_cast<double>(canvas);
  for (std::size_t y = 0; y < canvas; ++y) {
    for (std::size_t x = 0; x < canvas; ++x) {
      const double u = (static_cast<double>(x) * std::cos(gdir) +
                        static_cast<double>(y) * std::sin(gdir)) *
                       inv;
      for (int c = 0; c < 3; ++c) {
        double v = base[c] + tilt[c] * u;
        for (const auto& g : gratings) {
          v += g.amp[c] * std::sin(6.283185307179586 *
                                       (g.fx * static_cast<double>(x) +
                                        g.fy * static_cast<double>(y)) *
                                       inv +
                                   g.phase);
        }
        for (const auto& b : blobs) {
          const double dy = static_cast<double>(y) - b.cy;
          const double dx = static_cast<double>(x) - b.cx;
          v += b.color[c] *
               std::exp(-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma));
        }
        img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

Image crop_view(const Image& canvas, Rng& rng, std::size_t size) {
  const std::size_t margin = canvas.height - size;
  const std::size_t oy = static_cast<std::size_t>(rng.uniform_index(margin + 1));
  const std::size_t ox = static_cast<std::size_t>(rng.uniform_index(margin + 1));
  const double brightness = rng.uniform(0.75, 1.25);
  Image view = make_image(size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c)
        view.at(y, x, c) = static_cast<float>(std::clamp(
            static_cast<double>(canvas.at(oy + y, ox + x, c)) * brightness, 0.0,
            1.0));
  return view;
}
}  // namespace

Dataset generate_synthetic_dataset(const SyntheticConfig& config,
                                   const std::filesystem::path& out_dir) {
  if (config.num_places == 0 || config.views_per_place < 2 ||
      config.image_size == 0) {
    throw ConfigError(
        "synthetic dataset needs >= 1 place, >= 2 views per place and a "
        "positive image size");
  }
  const auto image_dir = out_dir / "images";
  std::filesystem::create_directories(image_dir);

  Rng root(config.seed);
  const std::size_t cols = static_cast<std::size_t>(
      std::ceil(std::sqrt(static_cast<double>(config.num_places))));
  const std::size_t canvas_size = config.image_size + 16;

  std::vector<GeoImageRecord> records;
  records.reserve(config.num_places * config.views_per_place);
  for (std::size_t place = 0; place < config.num_places; ++place) {
    Rng place_rng = root.fork(place + 1);
    const Image canvas = render_place_canvas(place_rng, canvas_size);
    const double center_e =
        static_cast<double>(place % cols) * config.place_spacing_m;
    const double center_n =
        static_cast<double>(place / cols) * config.place_spacing_m;

    for (std::size_t view = 0; view < config.views_per_place; ++view) {
      const Image img = crop_view(canvas, place_rng, config.image_size);
      GeoImageRecord rec;
      rec.id = "p" + std::to_string(place) + "_v" + std::to_string(view);
      rec.path = "images/" + rec.id + ".ppm";
      rec.easting = center_e + place_rng.uniform(-2.0, 2.0);
      rec.northing = center_n + place_rng.uniform(-2.0, 2.0);
      rec.split = view == 0 ? "query" : "reference";
      write_ppm(out_dir / rec.path, img);
      records.push_back(std::move(rec));
    }
  }
  write_manifest(out_dir / "manifest.csv", records);
  return dataset_from_records(std::move(records), out_dir);
}

void EvalConfig::validate() const {
  if (distance_threshold_m <= 0.0) {
    throw ConfigError("distance threshold must be > 0");
  }
  if (recall_ns.empty() || !std::is_sorted(recall_ns.begin(), recall_ns.end())) {
    throw ConfigError("recall_ns must be non-empty and sorted ascending");
  }
  if (recall_ns.front() == 0) throw ConfigError("recall N must be >= 1");
  if (top_k_retrieve == 0) throw ConfigError("top_k_retrieve must be >= 1");
}

std::map<std::size_t, double> recall_at_n(const std::vector<RankedList>& results,
                                          const Dataset& dataset,
                                          const EvalConfig& config) {
  config.validate();
  std::unordered_map<std::string, const RankedList*> by_query;
  for (const auto& list : results) by_query[list.query_id] = &list;

  std::map<std::size_t, double> recalls;
  for (const std::size_t n : config.recall_ns) recalls[n] = 0.0;
  if (dataset.query_indices.empty()) return recalls;

  for (const std::size_t qi : dataset.query_indices) {
    const auto& query = dataset.records[qi];
    const auto it = by_query.find(query.id);
    if (it == by_query.end()) {
      throw DataError("query '" + query.id + "' missing from results");
    }
    const auto& entries = it->second->entries;
    // rank of the first entry within the threshold, if any
    std::size_t first_hit = 0;
    bool hit = false;
    for (std::size_t r = 0; r < entries.size(); ++r) {
      const auto ref_it = dataset.id_to_index.find(entries[r].image_id);
      if (ref_it == dataset.id_to_index.end()) {
        throw DataError("ranked image '" + entries[r].image_id +
                        "' not present in manifest");
      }
      if (geo_distance(query, dataset.records[ref_it->second]) <=
          config.distance_threshold_m) {
        first_hit = r + 1;
        hit = true;
        break;
      }
    }
    if (!hit) continue;
    for (const std::size_t n : config.recall_ns) {
      if (first_hit <= n) recalls[n] += 1.0;
    }
  }
  const double denom = static_cast<double>(dataset.query_indices.size());
  for (auto& [n, v] : recalls) v /= denom;
  return recalls;
}

void write_metrics_csv(const std::filesystem::path& path,
                       const std::map<std::size_t, double>& recalls) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "metric,N,value\n";
  char buf[32];
  for (const auto& [n, v] : recalls) {
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    f << "recall," << n << ',' << buf << '\n';
  }
  if (!f) throw IoError("short write to " + path.string());
}

MiningResult mine_tuples(const Dataset& dataset,
                         const std::vector<std::vector<float>>& descriptors_by_record,
                         const MiningConfig& config) {
  if (descriptors_by_record.size() != dataset.records.size()) {
    throw ShapeError("mine_tuples: got " +
                     std::to_string(descriptors_by_record.size()) +
                     " descriptors for " +
                     std::to_string(dataset.records.size()) + " records");
  }
  if (config.num_negatives == 0) {
    throw ConfigError("mine_tuples: num_negatives must be >= 1");
  }

  MiningResult result;
  Rng rng(config.seed);
  for (const std::size_t qi : dataset.query_indices) {
    const auto& query = dataset.records[qi];
    // partition references by the two radii
    std::vector<std::size_t> positives, negatives;
    for (const std::size_t ri : dataset.reference_indices) {
      const double d = geo_distance(query, dataset.records[ri]);
      if (d <= config.positive_radius_m) {
        positives.push_back(ri);
      } else if (d > config.negative_radius_m) {
        negatives.push_back(ri);
      }
    }
    if (positives.empty()) {
      ++result.skipped_no_positive;
      continue;
    }
    if (negatives.empty()) {
      ++result.skipped_no_negative;
      continue;
    }

    // weak supervision: most descriptor-similar candidate wins
    std::size_t best = positives.front();
    if (positives.size() > 1) {
      const auto& qd = descriptors_by_record[qi];
      double best_sim = -std::numeric_limits<double>::infinity();
      for (const std::size_t pi : positives) {
        const auto& pd = descriptors_by_record[pi];
        if (qd.size() != pd.size() || qd.empty()) {
          throw ShapeError("mine_tuples: descriptor missing or dim mismatch "
                           "for '" +
                           dataset.records[pi].id + "'");
        }
        double sim = 0.0;
        for (std::size_t k = 0; k < qd.size(); ++k)
          sim += static_cast<double>(qd[k]) * static_cast<double>(pd[k]);
        if (sim > best_sim) {
          best_sim = sim;
          best = pi;
        }
      }
    }

    TrainingTuple tuple;
    tuple.query_index = qi;
    tuple.positive_index = best;
    const std::size_t want = std::min(config.num_negatives, negatives.size());
    // seeded uniform sample without replacement
    for (std::size_t k = 0; k < want; ++k) {
      const std::size_t j =
          k + static_cast<std::size_t>(rng.uniform_index(negatives.size() - k));
      std::swap(negatives[k], negatives[j]);
      tuple.negative_indices.push_back(negatives[k]);
    }
    result.tuples.push_back(std::move(tuple));
  }
  return result;
}

}  // namespace cqvpr
