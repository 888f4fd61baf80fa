#pragma once

#include <cstddef>
#include <limits>
#include <map>
#include <string>

#include "raamil/graph.hpp"

namespace raamil {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  /// Global L2 gradient-norm clip; 0 disables clipping.
  double clip_norm = 0.0;

  void validate() const;
};

/// Decoupled weight decay: theta <- theta (1 - lr lambda), then the
/// bias-corrected Adam step.
class AdamW {
 public:
  explicit AdamW(const AdamWConfig& config);

  /// Updates every entry of `params` from the matching entry of `grads`. A
  /// non-finite gradient aborts the step before anything is modified.
  void step(NamedTensors& params, const NamedTensors& grads);

  double lr() const noexcept { return config_.lr; }
  void set_lr(double lr);
  std::size_t steps() const noexcept { return t_; }
  const AdamWConfig& config() const noexcept { return config_; }

 private:
  AdamWConfig config_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

struct PlateauConfig {
  double factor = 0.5;
  std::size_t patience = 5;
  double threshold = 1e-4;
  double min_lr = 1e-6;

  void validate() const;
};

/// Reduce-on-plateau in maximize mode. A metric counts as an improvement only
/// if it exceeds best + threshold. After `patience` consecutive epochs without
/// improvement the rate is multiplied by `factor` (floored at min_lr) and the
/// counter resets.
class PlateauScheduler {
 public:
  PlateauScheduler(const PlateauConfig& config, double initial_lr);

  /// Returns the learning rate for the next epoch.
  double update(double metric);

  double lr() const noexcept { return lr_; }
  double best() const noexcept { return best_; }
  std::size_t bad_epochs() const noexcept { return bad_; }

 private:
  PlateauConfig config_;
  double lr_;
  double best_ = -std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
};

struct EarlyStopConfig {
  std::size_t patience = 15;
  double min_delta = 0.0;

  void validate() const;
};

class EarlyStopping {
 public:
  explicit EarlyStopping(const EarlyStopConfig& config);

  /// Records the metric for `epoch`; true means stop. `improved()` tells
  /// whether this epoch became the new best.
  bool update(double metric, std::size_t epoch);

  bool improved() const noexcept { return improved_; }
  double best() const noexcept { return best_; }
  std::size_t best_epoch() const noexcept { return best_epoch_; }
  std::size_t bad_epochs() const noexcept { return bad_; }

 private:
  EarlyStopConfig config_;
  double best_ = -std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t bad_ = 0;
  bool improved_ = false;
};

}  // namespace raamil
