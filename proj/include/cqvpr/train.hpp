#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cqvpr/dataset.hpp"
#include "cqvpr/losses.hpp"
#include "cqvpr/model.hpp"

namespace cqvpr {

struct TrainConfig {
  std::size_t batch_size = 4;
  std::size_t max_epochs = 12;
  std::size_t patience = 3;  // early stop on stalled validation R@5
  AdamOptions adam;          // lr 1e-5 unless the preset overrides
  LossConfig loss;
  MiningConfig mining;
  std::size_t max_tuples_per_epoch = 0;  // 0 = use every mined tuple
  bool train_adapters = true;
  std::size_t workers = 1;
  std::uint64_t seed = 42;
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double loss_global = 0.0;
  double loss_local = 0.0;
  double loss_context = 0.0;
  double loss_total = 0.0;
  double val_recall5 = 0.0;
  std::size_t tuples = 0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  bool diverged = false;
  std::size_t best_epoch = 0;  // 1-based; 0 = never improved
  double best_val_recall5 = 0.0;
};

// Extracts global descriptors for every record (inference mode, parallel
// across images); rows are unit-norm f32.
std::vector<std::vector<float>> extract_global_descriptors(
    const Model& model, const Dataset& dataset, std::size_t workers);

// Epoch loop: re-mine tuples with the current model, accumulate the total
// loss over batches, Adam-step the trainable parameters, early-stop on
// validation R@5. The best checkpoint (params + optimizer state) lands at
// checkpoint_path; per-epoch rows at log_csv_path
// (epoch,L_g,L_l,L_c,L,val_R@5).
TrainResult train_model(Model& model, const Dataset& dataset,
                        const TrainConfig& config,
                        const std::filesystem::path& checkpoint_path,
                        const std::filesystem::path& log_csv_path);

// Global-stage retrieval for every dataset query against the references.
std::vector<RankedList> retrieve_global(
    const Model& model, const Dataset& dataset, std::size_t top_k,
    std::size_t workers,
    const std::vector<std::vector<float>>* precomputed = nullptr);

struct AblationRow {
  std::string table;    // t4 | t5 | t6
  std::string variant;
  std::string status;   // ok | absent
  std::map<std::size_t, double> recalls;
};

// Tables 4/5/6-style report on the given dataset: contribution toggles,
// context-feature variant, query-count sweep. Each variant trains from
// scratch under `base_train` (typically with a reduced tuple budget).
std::vector<AblationRow> ablation_report(const Dataset& dataset,
                                         const PipelineConfig& base_config,
                                         const TrainConfig& base_train,
                                         const EvalConfig& eval_config,
                                         const std::filesystem::path& work_dir);

void write_ablation_csv(const std::filesystem::path& path,
                        const std::vector<AblationRow>& rows,
                        const std::vector<std::size_t>& recall_ns);

}  // namespace cqvpr
