#pragma once

// Class-weighted focal loss on label-smoothed targets:
//
//   t_c = (1 - eps) [c == label] + eps / 4
//   loss = sum_c w_c t_c (1 - p_c)^gamma (-log p_c),   p = softmax(logits)

#include <array>
#include <cstddef>
#include <span>

#include "raamil/dataio.hpp"
#include "raamil/graph.hpp"

namespace raamil {

using ClassWeights = std::array<double, kNumClasses>;

struct LossConfig {
  double focal_gamma = 2.0;
  double smoothing = 0.05;
  ClassWeights class_weights{1.0, 1.0, 1.0, 1.0};

  void validate() const;
};

std::array<double, kNumClasses> smoothed_targets(std::size_t label, double smoothing);

/// `logits` is a 1 x 4 node. Returns the scalar loss node.
NodeId add_focal_loss(Graph& g, NodeId logits, std::size_t label, const LossConfig& cfg);

double focal_loss(std::span<const double> logits, std::size_t label, const LossConfig& cfg);

/// total / (4 count_c), clipped to [0.1, 10]; classes with no members get 1.
ClassWeights class_weights_from_counts(const std::array<std::size_t, kNumClasses>& counts);

}  // namespace raamil
