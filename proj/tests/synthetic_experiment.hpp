#pragma once

// Shared end-to-end driver: synthesize, hold out a stratified test split, run
// cross-validation on the rest and score the fold ensemble on the test split.

#include <chrono>
#include <string>
#include <vector>

#include "raamil/trainer.hpp"

namespace raamil::testing {

struct ExperimentResult {
  double ensemble_accuracy = 0.0;
  MetricsReport test_report;
  json cv_report;
  double seconds = 0.0;
};

inline ExperimentResult run_synthetic_experiment(const SynthConfig& synth, TrainConfig cfg,
                                                 const fs::path& dir, double test_fraction = 0.2) {
  const auto start = std::chrono::steady_clock::now();
  const DatasetManifest manifest = generate_synthetic_dataset(synth, dir);
  std::vector<std::pair<std::string, int>> labeled;
  for (const auto& e : manifest.patients) labeled.emplace_back(e.patient_id, e.label);
  const auto test_ids = stratified_holdout(labeled, test_fraction, cfg.seed);
  std::erase_if(labeled, [&](const auto& p) {
    return std::find(test_ids.begin(), test_ids.end(), p.first) != test_ids.end();
  });
  FoldPlan plan = stratified_kfold(labeled, cfg.folds, cfg.seed);
  plan.test_ids = test_ids;
  cfg.test_ids = test_ids;

  const CvResult cv = run_cv(manifest, plan, cfg);
  std::vector<Model> models;
  for (const auto& f : cv.folds) models.push_back(f.model);
  const BagStore test = load_bag_store(manifest, test_ids);
  std::vector<const BagData*> bags;
  std::vector<std::size_t> truth;
  for (const auto& id : test_ids) {
    bags.push_back(&test.at(id));
    truth.push_back(test.at(id).label);
  }
  const EnsembleResult ens = ensemble_average(predict(models, bags));

  ExperimentResult r;
  r.test_report = evaluate(ens.probs, truth);
  r.ensemble_accuracy = r.test_report.core.accuracy;
  r.cv_report = cv.report;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace raamil::testing
