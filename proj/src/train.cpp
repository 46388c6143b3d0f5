#include "cqvpr/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "cqvpr/errors.hpp"
#include "cqvpr/ops.hpp"
#include "cqvpr/workers.hpp"

namespace cqvpr {

std::vector<std::vector<float>> extract_global_descriptors(
    const Model& model, const Dataset& dataset, std::size_t workers) {
  std::vector<std::vector<float>> out(dataset.records.size());
  parallel_for(dataset.records.size(), workers, [&](std::size_t i) {
    out[i] = model.extract(dataset.load_image(i), /*with_local=*/false)
                 .global_descriptor;
  });
  return out;
}

std::vector<RankedList> retrieve_global(
    const Model& model, const Dataset& dataset, std::size_t top_k,
    std::size_t workers, const std::vector<std::vector<float>>* precomputed) {
  std::vector<std::vector<float>> local_storage;
  const std::vector<std::vector<float>>* descs = precomputed;
  if (!descs) {
    local_storage = extract_global_descriptors(model, dataset, workers);
    descs = &local_storage;
  }

  GlobalStore store;
  for (const std::size_t ri : dataset.reference_indices) {
    const auto& d = (*descs)[ri];
    if (store.dim == 0) store.dim = d.size();
    store.ids.push_back(dataset.records[ri].id);
    store.data.insert(store.data.end(), d.begin(), d.end());
  }
  const DescriptorIndex index = DescriptorIndex::build(store);

  std::vector<RankedList> results(dataset.query_indices.size());
  parallel_for(dataset.query_indices.size(), workers, [&](std::size_t qi) {
    const std::size_t record = dataset.query_indices[qi];
    results[qi] = index.search((*descs)[record], top_k,
                               dataset.records[record].id);
  });
  return results;
}

namespace {
Tensor flatten_local(const Tensor& local) {
  const std::size_t u0 = local.shape()[0], u1 = local.shape()[1];
  return ops::reshape(local, {u0 * u1, local.shape()[2]});
}

struct TupleLosses {
  double global = 0.0, local = 0.0, context = 0.0, total = 0.0;
};

// Builds the Eq-10 composite for one tuple and runs backward.
TupleLosses tuple_backward(const Model& model, const Dataset& dataset,
                           const TrainingTuple& tuple, const LossConfig& loss_cfg) {
  const bool with_local = loss_cfg.alpha != 0.0;
  const ImageFeatures q =
      model.forward(dataset.load_image(tuple.query_index), with_local);
  const ImageFeatures p =
      model.forward(dataset.load_image(tuple.positive_index), with_local);
  std::vector<ImageFeatures> negs;
  negs.reserve(tuple.negative_indices.size());
  for (const std::size_t ni : tuple.negative_indices) {
    negs.push_back(model.forward(dataset.load_image(ni), with_local));
  }

  std::vector<Tensor> g_negs, t_negs, l_negs;
  for (const auto& n : negs) {
    g_negs.push_back(n.global_desc);
    t_negs.push_back(n.queries);
    if (with_local) l_negs.push_back(flatten_local(n.local));
  }

  const Tensor l_g = triplet_global_loss(q.global_desc, p.global_desc, g_negs,
                                         loss_cfg.margin);
  const Tensor l_l =
      with_local ? local_mutual_matching_loss(flatten_local(q.local),
                                              flatten_local(p.local), l_negs)
                 : Tensor::scalar(0.0);
  const Tensor l_c = loss_cfg.beta != 0.0
                         ? query_matching_loss(q.queries, p.queries, t_negs)
                         : Tensor::scalar(0.0);
  const Tensor total = total_loss(l_g, l_l, l_c, loss_cfg);
  total.backward();

  return {l_g.item(), l_l.item(), l_c.item(), total.item()};
}

void write_train_log(const std::filesystem::path& path,
                     const std::vector<EpochStats>& history) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "epoch,L_g,L_l,L_c,L,val_R@5\n";
  char buf[160];
  for (const auto& e : history) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.6f,%.6f,%.6f", e.epoch,
                  e.loss_global, e.loss_local, e.loss_context, e.loss_total,
                  e.val_recall5);
    f << buf << '\n';
  }
}
}  // namespace

TrainResult train_model(Model& model, const Dataset& dataset,
                        const TrainConfig& config,
                        const std::filesystem::path& checkpoint_path,
                        const std::filesystem::path& log_csv_path) {
  config.loss.validate();
  std::vector<Tensor> trainable = model.trainable_params(config.train_adapters);
  AdamOptimizer optimizer(trainable, config.adam);

  EvalConfig val_eval;
  val_eval.recall_ns = {5};
  val_eval.distance_threshold_m = 25.0;

  TrainResult result;
  std::size_t stale_epochs = 0;
  Rng epoch_rng(config.seed);

  // descriptors double as mining input and validation input for the next
  // epoch boundary
  std::vector<std::vector<float>> descriptors =
      extract_global_descriptors(model, dataset, config.workers);

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    MiningConfig mining = config.mining;
    mining.seed = config.seed * 1000003ULL + epoch;
    mining.num_negatives = config.loss.num_negatives;
    MiningResult mined = mine_tuples(dataset, descriptors, mining);
    if (mined.tuples.empty()) {
      throw DataError("no training tuples could be mined");
    }

    // fixed-seed shuffle; optional per-epoch budget
    Rng shuffle_rng = epoch_rng.fork(epoch);
    const auto perm = shuffle_rng.permutation(mined.tuples.size());
    std::vector<TrainingTuple> tuples;
    const std::size_t budget =
        config.max_tuples_per_epoch == 0
            ? mined.tuples.size()
            : std::min(config.max_tuples_per_epoch, mined.tuples.size());
    tuples.reserve(budget);
    for (std::size_t i = 0; i < budget; ++i)
      tuples.push_back(mined.tuples[perm[i]]);

    EpochStats stats;
    stats.epoch = epoch;
    stats.tuples = tuples.size();
    bool nan_seen = false;

    for (std::size_t start = 0; start < tuples.size() && !nan_seen;
         start += config.batch_size) {
      const std::size_t stop =
          std::min(start + config.batch_size, tuples.size());
      optimizer.zero_grad();
      for (std::size_t t = start; t < stop; ++t) {
        const TupleLosses losses =
            tuple_backward(model, dataset, tuples[t], config.loss);
        if (!std::isfinite(losses.total)) {
          nan_seen = true;
          break;
        }
        stats.loss_global += losses.global;
        stats.loss_local += losses.local;
        stats.loss_context += losses.context;
        stats.loss_total += losses.total;
      }
      if (!nan_seen) optimizer.step();
    }

    if (nan_seen) {
      result.diverged = true;
      break;  // checkpoint on disk is the last good one
    }

    const double inv = 1.0 / static_cast<double>(stats.tuples);
    stats.loss_global *= inv;
    stats.loss_local *= inv;
    stats.loss_context *= inv;
    stats.loss_total *= inv;

    // validation R@5, global stage only
    descriptors = extract_global_descriptors(model, dataset, config.workers);
    const auto ranked =
        retrieve_global(model, dataset, 5, config.workers, &descriptors);
    stats.val_recall5 = recall_at_n(ranked, dataset, val_eval).at(5);
    result.history.push_back(stats);

    if (stats.val_recall5 > result.best_val_recall5 ||
        result.best_epoch == 0) {
      result.best_val_recall5 = stats.val_recall5;
      result.best_epoch = epoch;
      stale_epochs = 0;
      model.save_checkpoint(checkpoint_path, &optimizer.state());
    } else {
      ++stale_epochs;
      if (stale_epochs >= config.patience) break;
    }
  }

  if (result.best_epoch == 0 && !result.diverged) {
    // never improved; persist the final state so a checkpoint always exists
    model.save_checkpoint(checkpoint_path, &optimizer.state());
  }
  if (!log_csv_path.empty()) write_train_log(log_csv_path, result.history);
  return result;
}

namespace {
struct VariantSpec {
  std::string table;
  std::string variant;
  bool train_adapters = true;
  bool use_pixel = true;
  bool use_context = true;
  bool use_query_loss = true;
  ContextFeatureMode mode = ContextFeatureMode::kMlp;
  std::size_t num_queries = 0;  // 0 = keep base
  // rows whose configuration equals an earlier row reuse its results
  int same_as = -1;
};
}  // namespace

std::vector<AblationRow> ablation_report(const Dataset& dataset,
                                         const PipelineConfig& base_config,
                                         const TrainConfig& base_train,
                                         const EvalConfig& eval_config,
                                         const std::filesystem::path& work_dir) {
  std::filesystem::create_directories(work_dir);
  const std::size_t base_k = base_config.context.num_queries;

  std::vector<VariantSpec> specs = {
      {"t4", "pixel_frozen", false, true, false, false},
      {"t4", "pixel_adapted", true, true, false, false},
      {"t4", "context_frozen", false, false, true, true},
      {"t4", "pixel_context_no_lc", true, true, true, false},
      {"t4", "full", true, true, true, true},
      {"t5", "ft_mlp", true, true, true, true, ContextFeatureMode::kMlp, 0, 4},
      {"t5", "ft_star_weighted", true, true, true, true,
       ContextFeatureMode::kWeightedQueries},
      {"t6", "k5", true, true, true, true, ContextFeatureMode::kMlp, 5},
      {"t6", "k" + std::to_string(base_k), true, true, true, true,
       ContextFeatureMode::kMlp, base_k, 4},
      {"t6", "k20", true, true, true, true, ContextFeatureMode::kMlp, 20},
  };

  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& spec = specs[i];
    AblationRow row;
    row.table = spec.table;
    row.variant = spec.variant;

    if (spec.same_as >= 0) {
      row.status = rows[spec.same_as].status;
      row.recalls = rows[spec.same_as].recalls;
      rows.push_back(std::move(row));
      continue;
    }

    PipelineConfig cfg = base_config;
    cfg.descriptor.use_pixel = spec.use_pixel;
    cfg.descriptor.use_context = spec.use_context;
    cfg.context.feature_mode = spec.mode;
    if (spec.num_queries != 0) cfg.context.num_queries = spec.num_queries;

    TrainConfig tc = base_train;
    tc.train_adapters = spec.train_adapters;
    tc.loss.beta = spec.use_query_loss ? base_train.loss.beta : 0.0;

    try {
      Model model(cfg);
      const auto ckpt = work_dir / (spec.table + "_" + spec.variant + ".cqvk");
      const TrainResult tr = train_model(model, dataset, tc, ckpt,
                                         work_dir / (spec.table + "_" +
                                                     spec.variant + "_log.csv"));
      if (tr.diverged) {
        row.status = "absent";
      } else {
        Model best = Model::load_checkpoint(ckpt);
        const auto ranked = retrieve_global(
            best, dataset, eval_config.top_k_retrieve, base_train.workers);
        row.recalls = recall_at_n(ranked, dataset, eval_config);
        row.status = "ok";
      }
    } catch (const Error&) {
      row.status = "absent";
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_csv(const std::filesystem::path& path,
                        const std::vector<AblationRow>& rows,
                        const std::vector<std::size_t>& recall_ns) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "table,variant,status";
  for (const std::size_t n : recall_ns) f << ",R@" << n;
  f << '\n';
  char buf[32];
  for (const auto& row : rows) {
    f << row.table << ',' << row.variant << ',' << row.status;
    for (const std::size_t n : recall_ns) {
      if (row.status == "ok" && row.recalls.count(n)) {
        std::snprintf(buf, sizeof(buf), "%.6f", row.recalls.at(n));
        f << ',' << buf;
      } else {
        f << ",";
      }
    }
    f << '\n';
  }
}

}  // namespace cqvpr
