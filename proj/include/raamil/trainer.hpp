#pragma once

// Per-fold training (one bag per optimizer step), cross-validation and
// inference over saved fold models.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "raamil/dataio.hpp"
#include "raamil/metrics.hpp"
#include "raamil/mil.hpp"
#include "raamil/objective.hpp"
#include "raamil/optim.hpp"

namespace raamil {

struct TrainConfig {
  std::size_t folds = 5;
  std::uint64_t seed = 0;
  std::size_t max_epochs = 100;
  ModelConfig model;
  LossConfig loss;
  /// Recompute class weights from each fold's training partition; when false
  /// loss.class_weights is used as given.
  bool auto_class_weights = true;
  AdamWConfig adamw;
  PlateauConfig plateau;
  EarlyStopConfig early_stop;
  std::vector<std::string> test_ids;
  bool parallel_folds = false;

  void validate() const;

  /// Flat key/value form; see README for the key list.
  json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const json& j);
  /// Applies one `key=value` override. The value is parsed as JSON when
  /// possible and taken as a string otherwise.
  void set(const std::string& key, const std::string& value);
};

struct BagData {
  std::string id;
  std::size_t label = 0;
  std::size_t patches = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  Tensor tokens;  // (patches * rows * cols) x D

  static BagData from_bag(const TokenBag& bag);
};

using BagStore = std::map<std::string, BagData>;

/// Loads the listed patients, or all of them when `ids` is empty.
BagStore load_bag_store(const DatasetManifest& manifest, const std::vector<std::string>& ids = {});

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double val_f1 = 0.0;
  double lr = 0.0;
};

struct RunHistory {
  std::vector<EpochRecord> epochs;

  std::string to_csv() const;
  void save_csv(const fs::path& path) const;
};

struct FoldResult {
  std::size_t fold = 0;
  Model model;  // weights from the best-F1 epoch
  RunHistory history;
  std::size_t best_epoch = 0;
  double best_val_f1 = 0.0;
  double best_val_acc = 0.0;
  ClassWeights class_weights{};
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;

  json checkpoint_meta(const TrainConfig& cfg) const;
};

/// Trains on every fold except `fold`, validating on `fold`. Patients in
/// cfg.test_ids or plan.test_ids must not appear in the plan's folds.
FoldResult train_fold(const BagStore& bags, const FoldPlan& plan, std::size_t fold,
                      const TrainConfig& cfg);
FoldResult train_fold(const DatasetManifest& manifest, const FoldPlan& plan, std::size_t fold,
                      const TrainConfig& cfg);

struct CvResult {
  std::vector<FoldResult> folds;
  json report;
};

json cv_report(const std::vector<FoldResult>& folds);

/// Runs every fold of the plan. With `run_dir` set, writes config.json,
/// plan.json, fold_<i>.raac, fold_<i>_history.csv and cv_report.json there.
CvResult run_cv(const DatasetManifest& manifest, const FoldPlan& plan, const TrainConfig& cfg,
                const std::optional<fs::path>& run_dir = std::nullopt);

/// Inference without dropout: result[m][b] is model m's ProbVector for bag b.
std::vector<std::vector<ProbVector>> predict(const std::vector<Model>& models,
                                             const std::vector<const BagData*>& bags);

/// Writes a double with full round-trip precision.
std::string format_double(double v);

}  // namespace raamil
