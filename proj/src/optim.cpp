#include "raamil/optim.hpp"

#include <algorithm>
#include <cmath>

namespace raamil {

namespace {

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw Error(std::string("metric passed to ") + what + " is not finite");
}

}  // namespace

void AdamWConfig::validate() const {
  if (!(lr > 0.0)) throw Error("lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw Error("betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw Error("eps must be > 0");
  if (!(weight_decay >= 0.0)) throw Error("weight_decay must be >= 0");
  if (!(clip_norm >= 0.0)) throw Error("clip_norm must be >= 0");
}

AdamW::AdamW(const AdamWConfig& config) : config_(config) { config_.validate(); }

void AdamW::set_lr(double lr) {
  if (!(lr > 0.0)) throw Error("lr must be > 0");
  config_.lr = lr;
}

void AdamW::step(NamedTensors& params, const NamedTensors& grads) {
  double sq = 0.0;
  for (const auto& [name, theta] : params) {
    const auto it = grads.find(name);
    if (it == grads.end()) throw Error("no gradient for parameter '" + name + "'");
    if (!it->second.same_shape(theta)) {
      throw ShapeError("gradient for '" + name + "' has shape " + shape_str(it->second.shape()) +
                       ", parameter has " + shape_str(theta.shape()));
    }
    if (const auto bad = it->second.first_non_finite(); bad != it->second.numel()) {
      throw NumericError("non-finite gradient for '" + name + "' at index " +
                         std::to_string(bad) + "; step aborted");
    }
    for (double g : it->second.data()) sq += g * g;
  }
  double clip = 1.0;
  if (config_.clip_norm > 0.0) {
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) clip = config_.clip_norm / norm;
  }

  ++t_;
  const double lr = config_.lr;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double decay = 1.0 - lr * config_.weight_decay;

  for (auto& [name, theta] : params) {
    const Tensor& grad = grads.at(name);
    auto [mit, fresh] = m_.try_emplace(name, Tensor(theta.shape()));
    if (fresh) v_.emplace(name, Tensor(theta.shape()));
    auto m = mit->second.data();
    auto v = v_.at(name).data();
    auto x = theta.data();
    const auto g = grad.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      x[i] = x[i] * decay - lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

void PlateauConfig::validate() const {
  if (!(factor > 0.0 && factor < 1.0)) throw Error("plateau factor must lie in (0, 1)");
  if (patience < 1) throw Error("plateau patience must be >= 1");
  if (!(threshold >= 0.0)) throw Error("plateau threshold must be >= 0");
  if (!(min_lr >= 0.0)) throw Error("min_lr must be >= 0");
}

PlateauScheduler::PlateauScheduler(const PlateauConfig& config, double initial_lr)
    : config_(config), lr_(initial_lr) {
  config_.validate();
}

double PlateauScheduler::update(double metric) {
  require_finite(metric, "plateau scheduler");
  if (metric > best_ + config_.threshold) {
    best_ = metric;
    bad_ = 0;
  } else if (++bad_ >= config_.patience) {
    lr_ = std::max(lr_ * config_.factor, config_.min_lr);
    bad_ = 0;
  }
  return lr_;
}

void EarlyStopConfig::validate() const {
  if (patience < 1) throw Error("early-stop patience must be >= 1");
  if (!(min_delta >= 0.0)) throw Error("min_delta must be >= 0");
}

EarlyStopping::EarlyStopping(const EarlyStopConfig& config) : config_(config) {
  config_.validate();
}

bool EarlyStopping::update(double metric, std::size_t epoch) {
  require_finite(metric, "early stopping");
  improved_ = metric > best_ + config_.min_delta;
  if (improved_) {
    best_ = metric;
    best_epoch_ = epoch;
    bad_ = 0;
    return false;
  }
  return ++bad_ >= config_.patience;
}

}  // namespace raamil
