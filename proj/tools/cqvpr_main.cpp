// cqvpr command-line front end: extract / index / retrieve / eval / train /
// gradcheck / synth / heatmaps / ablate. Batch artifacts only; every run
// echoes its resolved configuration next to its outputs.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cqvpr/dataset.hpp"
#include "cqvpr/errors.hpp"
#include "cqvpr/gradsuite.hpp"
#include "cqvpr/index.hpp"
#include "cqvpr/model.hpp"
#include "cqvpr/train.hpp"
#include "cqvpr/workers.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// resolved flag values for one subcommand, written as run_config_<cmd>.json
void echo_config(const CLI::App* cmd, const fs::path& out_dir) {
  json j;
  j["command"] = cmd->get_name();
  for (const CLI::Option* opt : cmd->get_options()) {
    const auto& lnames = opt->get_lnames();
    if (lnames.empty()) continue;
    const std::string& name = lnames.front();
    if (name == "help" || name == "config") continue;
    const auto& results = opt->results();
    if (results.empty()) {
      j[name] = opt->get_default_str();
    } else if (results.size() == 1) {
      j[name] = results.front();
    } else {
      j[name] = results;
    }
  }
  fs::create_directories(out_dir);
  std::ofstream f(out_dir / ("run_config_" + cmd->get_name() + ".json"),
                  std::ios::binary);
  f << j.dump(2) << '\n';
}

fs::path parent_or_dot(const fs::path& p) {
  return p.has_parent_path() ? p.parent_path() : fs::path(".");
}

cqvpr::PipelineConfig resolve_model_config(const std::string& preset,
                                           std::uint64_t seed) {
  cqvpr::PipelineConfig cfg = cqvpr::PipelineConfig::from_preset(preset);
  cfg.seed = seed;
  return cfg;
}

cqvpr::Model make_model(const std::string& preset, const std::string& checkpoint,
                        std::uint64_t seed) {
  if (!checkpoint.empty()) return cqvpr::Model::load_checkpoint(checkpoint);
  return cqvpr::Model(resolve_model_config(preset, seed));
}

void check_id_is_filename_safe(const std::string& id) {
  if (id.empty() || id.find('/') != std::string::npos ||
      id.find('\\') != std::string::npos) {
    throw cqvpr::DataError("image id unusable as a file name: '" + id + "'");
  }
}

cqvpr::Tensor pixel_features_for(const cqvpr::Dataset& dataset, std::size_t i,
                                 const cqvpr::Model& model,
                                 const std::string& features_dir) {
  if (!features_dir.empty()) {
    const fs::path p =
        fs::path(features_dir) / (dataset.records[i].id + ".cqvf");
    return cqvpr::load_features_cqvf(p, model.config().backbone.grid_size(),
                                     model.config().backbone.embed_dim);
  }
  cqvpr::NoGradGuard guard;
  return model.backbone().extract_pixel_features(dataset.load_image(i));
}

// ---------------------------------------------------------------- commands

int cmd_synth(const std::string& out_dir, std::uint64_t seed,
              std::size_t places, std::size_t views, std::size_t image_size,
              double spacing) {
  cqvpr::SyntheticConfig cfg;
  cfg.seed = seed;
  cfg.num_places = places;
  cfg.views_per_place = views;
  cfg.image_size = image_size;
  cfg.place_spacing_m = spacing;
  const cqvpr::Dataset ds = cqvpr::generate_synthetic_dataset(cfg, out_dir);
  std::printf("synth: %zu records (%zu queries, %zu references) -> %s\n",
              ds.records.size(), ds.query_indices.size(),
              ds.reference_indices.size(), out_dir.c_str());
  return 0;
}

int cmd_extract(const std::string& manifest, const std::string& preset,
                const std::string& checkpoint, const std::string& features_dir,
                const std::string& out_dir, std::size_t workers,
                std::uint64_t seed, bool no_local) {
  const cqvpr::Dataset ds = cqvpr::load_manifest(manifest);
  if (ds.records.empty()) {
    std::fprintf(stderr, "warning: manifest %s has no records\n",
                 manifest.c_str());
  }
  for (const auto& r : ds.records) check_id_is_filename_safe(r.id);
  const cqvpr::Model model = make_model(preset, checkpoint, seed);

  const fs::path out(out_dir);
  fs::create_directories(out / "locals");

  std::vector<cqvpr::Extraction> extractions(ds.records.size());
  cqvpr::parallel_for(ds.records.size(), workers, [&](std::size_t i) {
    const cqvpr::Tensor fv = pixel_features_for(ds, i, model, features_dir);
    extractions[i] = model.extract_from_pixel_features(fv, !no_local);
  });

  auto build_store = [&](const std::vector<std::size_t>& indices) {
    cqvpr::GlobalStore store;
    for (const std::size_t i : indices) {
      const auto& d = extractions[i].global_descriptor;
      if (store.dim == 0) store.dim = d.size();
      store.ids.push_back(ds.records[i].id);
      store.data.insert(store.data.end(), d.begin(), d.end());
    }
    return store;
  };
  cqvpr::save_global_store(out / "references.cqvd",
                           build_store(ds.reference_indices));
  cqvpr::save_global_store(out / "queries.cqvd", build_store(ds.query_indices));
  if (!no_local) {
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
      cqvpr::save_local_grid(out / "locals" / (ds.records[i].id + ".cqvl"),
                             extractions[i].local_grid);
    }
  }
  std::printf("extract: %zu references, %zu queries -> %s\n",
              ds.reference_indices.size(), ds.query_indices.size(),
              out_dir.c_str());
  return 0;
}

int cmd_index(const std::string& store_path, const std::string& stats_path) {
  const cqvpr::DescriptorIndex index =
      cqvpr::DescriptorIndex::build_from_file(store_path);
  std::printf("index: %zu descriptors, dim %zu\n", index.count(), index.dim());
  if (!stats_path.empty()) {
    json j;
    j["store"] = store_path;
    j["count"] = index.count();
    j["dim"] = index.dim();
    std::ofstream f(stats_path, std::ios::binary);
    if (!f) throw cqvpr::IoError("cannot open " + stats_path + " for writing");
    f << j.dump(2) << '\n';
  }
  return 0;
}

int cmd_retrieve(const std::string& refs_path, const std::string& queries_path,
                 std::size_t k, bool rerank_enabled,
                 const std::string& locals_dir, const std::string& out_csv,
                 std::size_t workers, double min_sim, bool has_min_sim) {
  const cqvpr::DescriptorIndex index =
      cqvpr::DescriptorIndex::build_from_file(refs_path);
  const cqvpr::GlobalStore queries = cqvpr::load_global_store(queries_path);
  if (queries.count() > 0 && queries.dim != index.dim()) {
    throw cqvpr::ShapeError("query dim " + std::to_string(queries.dim) +
                            " != reference dim " + std::to_string(index.dim()));
  }
  if (rerank_enabled && locals_dir.empty()) {
    throw cqvpr::ConfigError("--rerank requires --locals <dir>");
  }
  const std::optional<float> threshold =
      has_min_sim ? std::optional<float>(static_cast<float>(min_sim))
                  : std::nullopt;

  cqvpr::LocalGridProvider provider = [&](const std::string& id) {
    const fs::path p = fs::path(locals_dir) / (id + ".cqvl");
    if (!fs::exists(p)) {
      throw cqvpr::DataError("missing local store for image '" + id + "'");
    }
    return cqvpr::load_local_grid(p);
  };

  std::vector<cqvpr::RankedList> global_lists(queries.count());
  cqvpr::parallel_for(queries.count(), workers, [&](std::size_t qi) {
    const std::vector<float> q(queries.row(qi), queries.row(qi) + queries.dim);
    global_lists[qi] = index.search(q, k, queries.ids[qi]);
  });

  std::vector<cqvpr::RankedList> output;
  for (std::size_t qi = 0; qi < queries.count(); ++qi) {
    output.push_back(global_lists[qi]);
    if (rerank_enabled) {
      const cqvpr::LocalGrid query_grid = provider(queries.ids[qi]);
      output.push_back(cqvpr::rerank(query_grid, global_lists[qi], provider,
                                     workers, threshold));
    }
  }
  cqvpr::write_ranked_csv(out_csv, output);
  std::printf("retrieve: %zu queries, k=%zu%s -> %s\n", queries.count(), k,
              rerank_enabled ? " (+rerank)" : "", out_csv.c_str());
  return 0;
}

int cmd_eval(const std::string& ranked_csv, const std::string& manifest,
             double threshold, const std::string& ns_csv,
             const std::string& stage, const std::string& out_csv) {
  const cqvpr::Dataset ds = cqvpr::load_manifest(manifest);
  const auto all_lists = cqvpr::read_ranked_csv(ranked_csv);

  std::string chosen = stage;
  if (chosen.empty()) {
    chosen = "global";
    for (const auto& l : all_lists) {
      if (l.stage == "reranked") {
        chosen = "reranked";
        break;
      }
    }
  }
  std::vector<cqvpr::RankedList> lists;
  for (const auto& l : all_lists) {
    if (l.stage == chosen) lists.push_back(l);
  }

  cqvpr::EvalConfig cfg;
  cfg.distance_threshold_m = threshold;
  cfg.recall_ns.clear();
  std::stringstream ss(ns_csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    cfg.recall_ns.push_back(std::stoul(tok));
  }
  const auto recalls = cqvpr::recall_at_n(lists, ds, cfg);
  cqvpr::write_metrics_csv(out_csv, recalls);
  for (const auto& [n, v] : recalls) {
    std::printf("R@%zu = %.4f (%s)\n", n, v, chosen.c_str());
  }
  return 0;
}

int cmd_train(const std::string& manifest, const std::string& preset,
              const std::string& out_dir, const cqvpr::TrainConfig& tc,
              std::uint64_t seed) {
  const cqvpr::Dataset ds = cqvpr::load_manifest(manifest);
  cqvpr::Model model(resolve_model_config(preset, seed));
  fs::create_directories(out_dir);
  const fs::path ckpt = fs::path(out_dir) / "checkpoint.cqvk";
  const fs::path log = fs::path(out_dir) / "training_log.csv";
  const cqvpr::TrainResult result =
      cqvpr::train_model(model, ds, tc, ckpt, log);
  for (const auto& e : result.history) {
    std::printf("epoch %zu: L=%.4f (L_g=%.4f L_l=%.4f L_c=%.4f) val_R@5=%.4f\n",
                e.epoch, e.loss_total, e.loss_global, e.loss_local,
                e.loss_context, e.val_recall5);
  }
  if (result.diverged) {
    throw cqvpr::Error("training diverged (NaN loss); last good checkpoint: " +
                       ckpt.string());
  }
  std::printf("train: best epoch %zu (val_R@5=%.4f) -> %s\n", result.best_epoch,
              result.best_val_recall5, ckpt.string().c_str());
  return 0;
}

int cmd_gradcheck(std::size_t seeds, double eps) {
  const auto reports = cqvpr::run_gradient_suite(seeds, eps);
  bool ok = true;
  for (const auto& r : reports) {
    const bool pass =
        r.seeds_run > 0 && r.max_rel_error <= cqvpr::kGradSuiteTolerance;
    ok = ok && pass;
    std::printf("%-24s max_rel_err=%.3e seeds=%zu skipped=%zu %s\n",
                r.name.c_str(), r.max_rel_error, r.seeds_run, r.seeds_skipped,
                pass ? "ok" : "FAIL");
  }
  if (!ok) {
    std::fprintf(stderr, "error: gradient suite failed\n");
    return 1;
  }
  return 0;
}

int cmd_heatmaps(const std::string& image_path, const std::string& preset,
                 const std::string& checkpoint, const std::string& out_dir,
                 std::uint64_t seed) {
  const cqvpr::Model model = make_model(preset, checkpoint, seed);
  const cqvpr::Image image = cqvpr::read_ppm(image_path);
  cqvpr::NoGradGuard guard;
  const cqvpr::ImageFeatures f = model.forward(image, /*with_local=*/false);
  const auto paths = cqvpr::export_heatmap_pgm(f.heatmap, out_dir);
  for (const auto& p : paths) std::printf("%s\n", p.string().c_str());
  return 0;
}

int cmd_ablate(const std::string& manifest, const std::string& preset,
               const std::string& out_csv, const cqvpr::TrainConfig& tc,
               std::uint64_t seed, std::size_t top_k) {
  const cqvpr::Dataset ds = cqvpr::load_manifest(manifest);
  const cqvpr::PipelineConfig base = resolve_model_config(preset, seed);
  cqvpr::EvalConfig eval_cfg;
  eval_cfg.top_k_retrieve = top_k;
  eval_cfg.rerank_enabled = false;  // directional report, global stage
  const fs::path work = parent_or_dot(out_csv) / "ablate_work";
  const auto rows = cqvpr::ablation_report(ds, base, tc, eval_cfg, work);
  cqvpr::write_ablation_csv(out_csv, rows, eval_cfg.recall_ns);
  for (const auto& row : rows) {
    std::printf("%s/%s: %s", row.table.c_str(), row.variant.c_str(),
                row.status.c_str());
    for (const auto& [n, v] : row.recalls) std::printf(" R@%zu=%.3f", n, v);
    std::printf("\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CQVPR: contextual-query visual place recognition pipeline"};
  app.require_subcommand(1);

  std::string manifest, preset = "desk", checkpoint, features_dir, out;
  std::string refs, queries, locals_dir, ranked, stage, ns_csv = "1,5,10,20";
  std::string image_path;
  std::uint64_t seed = 42;
  std::size_t workers = 1, k = 100;
  bool rerank_flag = false, no_local = false;
  double threshold = 25.0, min_sim = 0.0;
  std::size_t places = 50, views = 8, image_size = 56;
  double spacing = 150.0;
  std::size_t gc_seeds = 20;
  double gc_eps = 1e-3;

  cqvpr::TrainConfig tc;
  tc.adam.lr = 1e-3;  // desk-scale default; the optimizer itself defaults 1e-5

  auto add_common = [&](CLI::App* cmd) {
    cmd->set_config("--config");
    cmd->add_option("--seed", seed, "deterministic seed")->capture_default_str();
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth);
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--places", places)->capture_default_str();
  synth->add_option("--views", views)->capture_default_str();
  synth->add_option("--image-size", image_size)->capture_default_str();
  synth->add_option("--spacing", spacing, "inter-place distance, meters")
      ->capture_default_str();

  CLI::App* extract =
      app.add_subcommand("extract", "compute descriptor stores from a manifest");
  add_common(extract);
  extract->add_option("--manifest", manifest)->required();
  extract->add_option("--preset", preset)->capture_default_str();
  extract->add_option("--checkpoint", checkpoint, "trained model checkpoint");
  extract->add_option("--features-dir", features_dir,
                      "directory of <id>.cqvf pixel-feature files");
  extract->add_option("--out", out, "output directory")->required();
  extract->add_option("--workers", workers)->capture_default_str();
  extract->add_flag("--no-local", no_local, "skip local descriptor grids");

  CLI::App* index_cmd =
      app.add_subcommand("index", "validate a global descriptor store");
  add_common(index_cmd);
  index_cmd->add_option("--store", refs, "CQVD store path")->required();
  index_cmd->add_option("--out", out, "stats JSON path");

  CLI::App* retrieve = app.add_subcommand(
      "retrieve", "global search plus optional local re-ranking");
  add_common(retrieve);
  retrieve->add_option("--refs", refs, "reference CQVD store")->required();
  retrieve->add_option("--queries", queries, "query CQVD store")->required();
  retrieve->add_option("--k", k, "candidates per query")->capture_default_str();
  retrieve->add_flag("--rerank", rerank_flag, "re-rank by MNN match count");
  retrieve->add_option("--locals", locals_dir, "directory of <id>.cqvl grids");
  CLI::Option* min_sim_opt = retrieve->add_option(
      "--min-sim", min_sim, "drop matches below this similarity");
  retrieve->add_option("--out", out, "ranked CSV path")->required();
  retrieve->add_option("--workers", workers)->capture_default_str();

  CLI::App* eval_cmd = app.add_subcommand("eval", "Recall@N against a manifest");
  add_common(eval_cmd);
  eval_cmd->add_option("--ranked", ranked, "ranked CSV from retrieve")->required();
  eval_cmd->add_option("--manifest", manifest)->required();
  eval_cmd->add_option("--threshold", threshold, "distance threshold, meters")
      ->capture_default_str();
  eval_cmd->add_option("--ns", ns_csv, "comma-separated recall cutoffs")
      ->capture_default_str();
  eval_cmd->add_option("--stage", stage, "global or reranked");
  eval_cmd->add_option("--out", out, "metrics CSV path")->required();

  CLI::App* train_cmd = app.add_subcommand("train", "weakly supervised training");
  add_common(train_cmd);
  train_cmd->add_option("--manifest", manifest)->required();
  train_cmd->add_option("--preset", preset)->capture_default_str();
  train_cmd->add_option("--out", out, "output directory")->required();
  train_cmd->add_option("--epochs", tc.max_epochs)->capture_default_str();
  train_cmd->add_option("--batch-size", tc.batch_size)->capture_default_str();
  train_cmd->add_option("--lr", tc.adam.lr)->capture_default_str();
  train_cmd->add_option("--margin", tc.loss.margin)->capture_default_str();
  train_cmd->add_option("--alpha", tc.loss.alpha)->capture_default_str();
  train_cmd->add_option("--beta", tc.loss.beta)->capture_default_str();
  train_cmd->add_option("--negatives", tc.loss.num_negatives)
      ->capture_default_str();
  train_cmd->add_option("--patience", tc.patience)->capture_default_str();
  train_cmd->add_option("--max-tuples", tc.max_tuples_per_epoch)
      ->capture_default_str();
  train_cmd->add_option("--workers", workers)->capture_default_str();

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(gradcheck);
  gradcheck->add_option("--preset", preset)->capture_default_str();
  gradcheck->add_option("--seeds", gc_seeds)->capture_default_str();
  gradcheck->add_option("--eps", gc_eps)->capture_default_str();

  CLI::App* heatmaps =
      app.add_subcommand("heatmaps", "export per-query heatmap PGM slices");
  add_common(heatmaps);
  heatmaps->add_option("--image", image_path, "input PPM image")->required();
  heatmaps->add_option("--preset", preset)->capture_default_str();
  heatmaps->add_option("--checkpoint", checkpoint);
  heatmaps->add_option("--out", out, "output directory")->required();

  CLI::App* ablate =
      app.add_subcommand("ablate", "contribution / variant / query-count report");
  add_common(ablate);
  ablate->add_option("--manifest", manifest)->required();
  ablate->add_option("--preset", preset)->capture_default_str();
  ablate->add_option("--out", out, "report CSV path")->required();
  ablate->add_option("--epochs", tc.max_epochs)->capture_default_str();
  ablate->add_option("--lr", tc.adam.lr)->capture_default_str();
  ablate->add_option("--max-tuples", tc.max_tuples_per_epoch)
      ->capture_default_str();
  ablate->add_option("--k", k, "top-k retrieved for the report")
      ->capture_default_str();
  ablate->add_option("--workers", workers)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    tc.workers = workers;
    tc.seed = seed;
    tc.mining.seed = seed;

    if (synth->parsed()) {
      echo_config(synth, out);
      return cmd_synth(out, seed, places, views, image_size, spacing);
    }
    if (extract->parsed()) {
      echo_config(extract, out);
      return cmd_extract(manifest, preset, checkpoint, features_dir, out,
                         workers, seed, no_local);
    }
    if (index_cmd->parsed()) {
      if (!out.empty()) echo_config(index_cmd, parent_or_dot(out));
      return cmd_index(refs, out);
    }
    if (retrieve->parsed()) {
      echo_config(retrieve, parent_or_dot(out));
      return cmd_retrieve(refs, queries, k, rerank_flag, locals_dir, out,
                          workers, min_sim, min_sim_opt->count() > 0);
    }
    if (eval_cmd->parsed()) {
      echo_config(eval_cmd, parent_or_dot(out));
      return cmd_eval(ranked, manifest, threshold, ns_csv, stage, out);
    }
    if (train_cmd->parsed()) {
      echo_config(train_cmd, out);
      return cmd_train(manifest, preset, out, tc, seed);
    }
    if (gradcheck->parsed()) {
      return cmd_gradcheck(gc_seeds, gc_eps);
    }
    if (heatmaps->parsed()) {
      echo_config(heatmaps, out);
      return cmd_heatmaps(image_path, preset, checkpoint, out, seed);
    }
    if (ablate->parsed()) {
      echo_config(ablate, parent_or_dot(out));
      return cmd_ablate(manifest, preset, out, tc, seed, k);
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& c : msg) {
      if (c == '\n') c = ' ';
    }
    std::fprintf(stderr, "error: %s\n", msg.c_str());
    return 1;
  }
  return 0;
}
