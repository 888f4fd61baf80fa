#pragma once

// Evaluation: confusion-based scores, one-vs-rest ROC-AUC, average precision,
// fold ensembling and attention-map export.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "raamil/dataio.hpp"
#include "raamil/mil.hpp"

namespace raamil {

using Confusion = std::array<std::array<std::size_t, kNumClasses>, kNumClasses>;

struct ClassStats {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct ConfusionReport {
  Confusion confusion{};  // [truth][pred]
  std::size_t n = 0;
  double accuracy = 0.0;
  std::array<ClassStats, kNumClasses> per_class{};
  /// Support-weighted F1; zero-support classes get zero weight.
  double weighted_f1 = 0.0;
};

/// Zero denominators give 0 for precision, recall and F1.
ConfusionReport confusion_and_f1(std::span<const std::size_t> predicted,
                                 std::span<const std::size_t> truth);

/// Mann-Whitney statistic; ties count one half. Needs both classes present.
double binary_roc_auc(std::span<const double> scores, std::span<const bool> positive);

/// Step-wise average precision over descending score thresholds, with equal
/// scores grouped into one threshold. nullopt when there are no positives.
std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const bool> positive);

struct ClassCurveReport {
  std::array<std::optional<double>, kNumClasses> per_class{};
  std::optional<double> weighted;
};

/// One-vs-rest AUC per class. Classes lacking positives or negatives are
/// undefined and dropped from the support-weighted mean. Throws when no class
/// is eligible.
ClassCurveReport roc_auc_ovr_weighted(std::span<const ProbVector> probs,
                                      std::span<const std::size_t> truth);
/// Per-class average precision and its support-weighted mean over classes with
/// at least one positive.
ClassCurveReport pr_auc_per_class(std::span<const ProbVector> probs,
                                  std::span<const std::size_t> truth);

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax_class(const ProbVector& p, bool* tied = nullptr);

struct EnsembleResult {
  std::vector<ProbVector> probs;
  std::vector<std::size_t> labels;
  std::size_t argmax_ties = 0;
};

/// Arithmetic mean over folds, summed in ascending fold-id order.
EnsembleResult ensemble_average(const std::map<std::size_t, std::vector<ProbVector>>& by_fold);
EnsembleResult ensemble_average(const std::vector<std::vector<ProbVector>>& folds);

struct MetricsReport {
  ConfusionReport core;
  ClassCurveReport roc_auc;
  ClassCurveReport pr_auc;
  std::size_t argmax_ties = 0;

  json to_json() const;
};

/// Scores argmax predictions of `probs` against `truth`.
MetricsReport evaluate(std::span<const ProbVector> probs, std::span<const std::size_t> truth);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

MeanStd mean_std(std::span<const double> values);
/// "0.619 ± 0.062"
std::string format_mean_std(const MeanStd& s, int decimals = 3);

/// | Model | Accuracy | F1 (Weighted) | AUPRC (Weighted) |, then ROC-AUC.
std::string format_summary_table(const std::vector<std::pair<std::string, MetricsReport>>& rows);
/// | Model | Benign | Healthy | OPMD | OSCC | with per-class PR-AUC.
std::string format_pr_auc_table(const std::vector<std::pair<std::string, MetricsReport>>& rows);

// --- attention maps ------------------------------------------------------------

/// Bilinear resize of a rows x cols grid (row-major) to out_h x out_w using
/// half-pixel centres with edge clamping.
std::vector<double> bilinear_resize(std::span<const double> grid, std::size_t rows,
                                    std::size_t cols, std::size_t out_h, std::size_t out_w);

void write_pgm(const fs::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> pixels);

struct AttentionFiles {
  fs::path pgm;
  fs::path csv;
};

/// Writes, per patch, <stem>_patch<p>.csv with the raw rows x cols weights and
/// <stem>_patch<p>.pgm with the map min-max normalized over the whole bag and
/// upsampled to size x size. A constant map renders as mid-gray.
std::vector<AttentionFiles> export_attention_maps(std::span<const double> weights,
                                                  std::size_t patches, std::size_t rows,
                                                  std::size_t cols, const fs::path& out_dir,
                                                  const std::string& stem, std::size_t size = 224);

}  // namespace raamil
