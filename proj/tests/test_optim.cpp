#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "raamil/optim.hpp"
#include "test_support.hpp"

using namespace raamil;
using namespace raamil::testing;

namespace {

NamedTensors one(double v) { return {{"x", Tensor::scalar(v)}}; }

struct ScalarAdam {
  double lr, b1, b2, eps;
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double x, double g) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return x - lr * mh / (std::sqrt(vh) + eps);
  }
};

}  // namespace

TEST_CASE("zero gradient") {
  AdamWConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.0;
  AdamW plain(cfg);
  NamedTensors p = one(1.5);
  plain.step(p, one(0.0));
  CHECK(p.at("x").item() == 1.5);

  cfg.weight_decay = 0.3;
  AdamW decayed(cfg);
  p = one(1.5);
  decayed.step(p, one(0.0));
  CHECK(p.at("x").item() == 1.5 * (1.0 - 0.01 * 0.3));
}

TEST_CASE("single step from theta = 1") {
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  AdamW opt(cfg);
  NamedTensors p = one(1.0);
  opt.step(p, one(1.0));
  CHECK(std::abs(p.at("x").item() - 0.9) < 1e-6);
  CHECK(opt.steps() == 1);
}

TEST_CASE("without weight decay AdamW is Adam") {
  Rng rng(1);
  AdamWConfig cfg;
  cfg.lr = 0.05;
  cfg.weight_decay = 0.0;
  AdamW opt(cfg);
  ScalarAdam ref{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps};
  NamedTensors p = one(0.7);
  double x = 0.7;
  for (int i = 0; i < 100; ++i) {
    const double g = rng.uniform(-2, 2);
    opt.step(p, one(g));
    x = ref.step(x, g);
    CHECK(std::abs(p.at("x").item() - x) < 1e-12);
  }
}

TEST_CASE("decay is applied separately from the adaptive step") {
  Rng rng(2);
  AdamWConfig cfg;
  cfg.lr = 0.02;
  cfg.weight_decay = 0.1;
  AdamW opt(cfg);
  ScalarAdam ref{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps};
  NamedTensors p = one(-1.2);
  double x = -1.2;
  for (int i = 0; i < 50; ++i) {
    const double g = rng.uniform(-1, 1);
    opt.step(p, one(g));
    x = ref.step(x * (1.0 - cfg.lr * cfg.weight_decay), g);
    CHECK(std::abs(p.at("x").item() - x) < 1e-12);
  }
}

TEST_CASE("non-finite gradient aborts the whole step") {
  AdamW opt(AdamWConfig{});
  NamedTensors p{{"a", Tensor::scalar(1.0)}, {"b", Tensor::scalar(2.0)}};
  NamedTensors g{{"a", Tensor::scalar(0.5)},
                 {"b", Tensor::scalar(std::numeric_limits<double>::quiet_NaN())}};
  CHECK_THROWS_WITH_AS(opt.step(p, g), doctest::Contains("'b'"), NumericError);
  CHECK(p.at("a").item() == 1.0);
  CHECK(opt.steps() == 0);
  CHECK_THROWS_AS(opt.step(p, NamedTensors{{"a", Tensor::scalar(0.1)}}), Error);
}

TEST_CASE("gradient clipping caps the global norm") {
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  cfg.clip_norm = 1.0;
  AdamW clipped(cfg);
  cfg.clip_norm = 0.0;
  AdamW plain(cfg);
  NamedTensors a{{"x", Tensor::from_rows({{3.0, 4.0}})}};
  NamedTensors b = a;
  clipped.step(a, NamedTensors{{"x", Tensor::from_rows({{30.0, 40.0}})}});
  plain.step(b, NamedTensors{{"x", Tensor::from_rows({{0.6, 0.8}})}});
  CHECK(max_abs_diff(a.at("x"), b.at("x")) < 1e-15);
}

TEST_CASE("plateau scheduler") {
  SUBCASE("improving metric keeps the rate") {
    PlateauScheduler s(PlateauConfig{}, 1e-3);
    for (int e = 0; e < 40; ++e) CHECK(s.update(0.01 * e) == 1e-3);
  }
  SUBCASE("flat metric halves the rate on the sixth epoch") {
    PlateauScheduler s(PlateauConfig{}, 1e-3);
    for (int e = 1; e <= 5; ++e) CHECK(s.update(0.5) == 1e-3);
    CHECK(s.update(0.5) == 5e-4);
    for (int e = 7; e <= 10; ++e) CHECK(s.update(0.5) == 5e-4);
    CHECK(s.update(0.5) == 2.5e-4);
  }
  SUBCASE("gains below the threshold do not count") {
    PlateauScheduler s(PlateauConfig{}, 1e-3);
    s.update(0.5);
    for (int e = 0; e < 4; ++e) s.update(0.5 + 2e-5 * (e + 1));
    CHECK(s.update(0.50009) == 5e-4);
  }
  SUBCASE("rate never drops below min_lr and never increases") {
    PlateauScheduler s(PlateauConfig{}, 3e-6);
    double prev = s.lr();
    Rng rng(3);
    for (int e = 0; e < 100; ++e) {
      const double lr = s.update(rng.uniform(0.0, 0.2));
      CHECK(lr <= prev);
      CHECK(lr >= 1e-6);
      prev = lr;
    }
    CHECK(s.lr() == 1e-6);
  }
  CHECK_THROWS(PlateauScheduler(PlateauConfig{}, 1e-3).update(std::nan("")));
}

TEST_CASE("early stopping") {
  SUBCASE("improving metric never stops") {
    EarlyStopping es(EarlyStopConfig{});
    for (std::size_t e = 0; e < 100; ++e) CHECK_FALSE(es.update(0.001 * e, e));
    CHECK(es.best_epoch() == 99);
  }
  SUBCASE("flat metric stops on the sixteenth epoch") {
    EarlyStopping es(EarlyStopConfig{});
    for (std::size_t e = 1; e <= 15; ++e) CHECK_FALSE(es.update(0.4, e));
    CHECK(es.update(0.4, 16));
    CHECK(es.best_epoch() == 1);
  }
  SUBCASE("ties at the boundary are not improvements") {
    EarlyStopConfig cfg;
    cfg.min_delta = 0.125;
    EarlyStopping es(cfg);
    es.update(0.5, 0);
    es.update(0.625, 1);
    CHECK_FALSE(es.improved());
    CHECK(es.best_epoch() == 0);
    es.update(0.6251, 2);
    CHECK(es.improved());
  }
  SUBCASE("best epoch is the argmax of the history") {
    Rng rng(4);
    EarlyStopConfig cfg;
    cfg.patience = 1000;
    EarlyStopping es(cfg);
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t e = 0; e < 60; ++e) {
      const double m = rng.uniform();
      if (m > best) best = m, arg = e;
      es.update(m, e);
    }
    CHECK(es.best_epoch() == arg);
    CHECK(es.best() == best);
  }
}
