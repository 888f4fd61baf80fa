#include "raamil/objective.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace raamil {

void LossConfig::validate() const {
  if (!(focal_gamma >= 0.0) || !std::isfinite(focal_gamma)) {
    throw Error("focal_gamma must be finite and >= 0");
  }
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw Error("smoothing must lie in [0, 1)");
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (!(class_weights[c] > 0.0) || !std::isfinite(class_weights[c])) {
      throw Error("class weight " + std::to_string(c) + " must be finite and > 0");
    }
  }
}

std::array<double, kNumClasses> smoothed_targets(std::size_t label, double smoothing) {
  if (label >= kNumClasses) {
    throw Error("label " + std::to_string(label) + " out of range [0, " +
                std::to_string(kNumClasses) + ")");
  }
  std::array<double, kNumClasses> t{};
  t.fill(smoothing / kNumClasses);
  t[label] += 1.0 - smoothing;
  return t;
}

NodeId add_focal_loss(Graph& g, NodeId logits, std::size_t label, const LossConfig& cfg) {
  cfg.validate();
  const auto t = smoothed_targets(label, cfg.smoothing);
  Tensor coeff = Tensor::matrix(1, kNumClasses);
  for (std::size_t c = 0; c < kNumClasses; ++c) coeff[c] = cfg.class_weights[c] * t[c];

  const NodeId logp = g.log_softmax_rows(logits);
  const NodeId q = g.sub(g.constant(Tensor::matrix(1, kNumClasses, 1.0)), g.exp(logp));
  const NodeId modulated = g.mul(g.pow(q, cfg.focal_gamma), logp);
  return g.scale(g.sum(g.mul(modulated, g.constant(coeff))), -1.0);
}

double focal_loss(std::span<const double> logits, std::size_t label, const LossConfig& cfg) {
  if (logits.size() != kNumClasses) {
    throw ShapeError("focal loss expects " + std::to_string(kNumClasses) + " logits, got " +
                     std::to_string(logits.size()));
  }
  Graph g;
  const NodeId x = g.input("logits");
  const NodeId loss = add_focal_loss(g, x, label, cfg);
  g.mark_output("loss", loss);
  Tensor t(Shape{1, kNumClasses}, std::vector<double>(logits.begin(), logits.end()));
  return g.forward({{"logits", t}}).at("loss").item();
}

ClassWeights class_weights_from_counts(const std::array<std::size_t, kNumClasses>& counts) {
  std::size_t total = 0;
  for (std::size_t n : counts) total += n;
  if (total == 0) throw Error("class weights need at least one labelled example");
  ClassWeights w{};
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (counts[c] == 0) {
      w[c] = 1.0;
    } else {
      const double raw = static_cast<double>(total) / (kNumClasses * static_cast<double>(counts[c]));
      w[c] = std::clamp(raw, 0.1, 10.0);
    }
  }
  return w;
}

}  // namespace raamil
