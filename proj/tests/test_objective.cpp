#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "raamil/objective.hpp"
#include "test_support.hpp"

using namespace raamil;
using namespace raamil::testing;

namespace {

double oracle_focal(const std::vector<double>& z, std::size_t label, const LossConfig& cfg) {
  double top = z[0];
  for (double v : z) top = std::max(top, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - top);
  double loss = 0.0;
  for (std::size_t c = 0; c < 4; ++c) {
    const double logp = z[c] - top - std::log(s);
    const double p = std::exp(logp);
    const double t = (c == label ? 1.0 - cfg.smoothing : 0.0) + cfg.smoothing / 4.0;
    loss -= cfg.class_weights[c] * t * std::pow(1.0 - p, cfg.focal_gamma) * logp;
  }
  return loss;
}

LossConfig plain_ce() {
  LossConfig cfg;
  cfg.focal_gamma = 0.0;
  cfg.smoothing = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("reduces to cross-entropy") {
  const double e2 = std::exp(2.0);
  CHECK(focal_loss(std::vector<double>{2, 0, 0, 0}, 0, plain_ce()) ==
        doctest::Approx(-std::log(e2 / (e2 + 3.0))).epsilon(1e-14));

  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> z(4);
    for (auto& v : z) v = rng.uniform(-5, 5);
    const std::size_t label = rng.below(4);
    double s = 0.0;
    for (double v : z) s += std::exp(v);
    CHECK(std::abs(focal_loss(z, label, plain_ce()) - (std::log(s) - z[label])) < 1e-12);
  }
}

TEST_CASE("loss vanishes at a confident correct prediction") {
  LossConfig cfg;
  cfg.smoothing = 0.0;
  CHECK(focal_loss(std::vector<double>{40, 0, 0, 0}, 0, cfg) <= 1e-9);
  CHECK(focal_loss(std::vector<double>{40, 0, 0, 0}, 0, plain_ce()) <= 1e-9);
}

TEST_CASE("doubling the class weights doubles the loss") {
  Rng rng(2);
  LossConfig cfg;
  cfg.class_weights = {0.5, 3.0, 1.2, 0.9};
  LossConfig twice = cfg;
  for (auto& w : twice.class_weights) w *= 2.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> z(4);
    for (auto& v : z) v = rng.uniform(-4, 4);
    const std::size_t label = rng.below(4);
    CHECK(focal_loss(z, label, twice) == 2.0 * focal_loss(z, label, cfg));
  }
}

TEST_CASE("matches a scalar oracle and is non-negative") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    LossConfig cfg;
    cfg.focal_gamma = rng.uniform(0.0, 4.0);
    cfg.smoothing = rng.uniform(0.0, 0.5);
    for (auto& w : cfg.class_weights) w = rng.uniform(0.1, 5.0);
    std::vector<double> z(4);
    for (auto& v : z) v = rng.uniform(-6, 6);
    const std::size_t label = rng.below(4);
    const double got = focal_loss(z, label, cfg);
    CHECK(got >= 0.0);
    CHECK(std::abs(got - oracle_focal(z, label, cfg)) < 1e-12);
  }
}

TEST_CASE("raising the true-class logit lowers the unsmoothed loss") {
  // With smoothing the optimum sits at a finite logit gap, so this only holds at eps = 0.
  Rng rng(4);
  LossConfig cfg;
  cfg.smoothing = 0.0;
  cfg.class_weights = {0.5, 2.0, 1.0, 3.0};
  for (int trial = 0; trial < 20; ++trial) {
    cfg.focal_gamma = rng.uniform(0.0, 3.0);
    std::vector<double> z(4);
    for (auto& v : z) v = rng.uniform(-3, 3);
    const std::size_t label = rng.below(4);
    double prev = focal_loss(z, label, cfg);
    for (int step = 0; step < 30; ++step) {
      z[label] += 0.2;
      const double next = focal_loss(z, label, cfg);
      CHECK(next < prev);
      prev = next;
    }
  }
}

TEST_CASE("gradient matches finite differences") {
  Rng rng(5);
  LossConfig cfg;
  cfg.class_weights = {1.5, 0.4, 2.0, 1.0};
  for (std::size_t label = 0; label < 4; ++label) {
    const Tensor point = random_tensor(rng, 1, 4, -3, 3);
    Graph g;
    const NodeId x = g.parameter("z", point);
    const NodeId l = add_focal_loss(g, x, label, cfg);
    g.forward({});
    const Tensor analytic = g.backward(l).at("z");
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& z) { return focal_loss(z.data(), label, cfg); }, point);
    CHECK(relative_error(analytic, numeric) < 1e-6);
  }
}

TEST_CASE("errors") {
  CHECK_THROWS_AS(focal_loss(std::vector<double>{0, 0, 0, 0}, 4, LossConfig{}), Error);
  CHECK_THROWS_AS(focal_loss(std::vector<double>{0, 0, 0}, 0, LossConfig{}), ShapeError);
  LossConfig bad;
  bad.smoothing = 1.0;
  CHECK_THROWS(bad.validate());
  bad = LossConfig{};
  bad.class_weights[2] = 0.0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("class weights from counts") {
  CHECK(class_weights_from_counts({10, 10, 10, 10}) == ClassWeights{1, 1, 1, 1});

  const auto w = class_weights_from_counts({30, 3, 30, 30});
  CHECK(w[1] == doctest::Approx(7.75).epsilon(1e-15));
  for (std::size_t c : {0, 2, 3}) CHECK(w[c] == doctest::Approx(0.775).epsilon(1e-15));

  const auto z = class_weights_from_counts({10, 0, 10, 10});
  CHECK(z[0] == 0.75);
  CHECK(z[1] == 1.0);

  const auto clipped = class_weights_from_counts({1000, 1, 1000, 1000});
  CHECK(clipped[1] == 10.0);
  CHECK(class_weights_from_counts({1, 0, 0, 0})[0] == 0.25);
  CHECK(class_weights_from_counts({1, 1000, 0, 0})[1] == doctest::Approx(0.25025).epsilon(1e-15));
  CHECK_THROWS(class_weights_from_counts({0, 0, 0, 0}));
}
