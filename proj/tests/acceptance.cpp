// Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "metrics_oracle.hpp"
#include "raamil/cli.hpp"
#include "raamil/metrics.hpp"
#include "raamil/objective.hpp"
#include "raamil/trainer.hpp"
#include "synthetic_experiment.hpp"
#include "test_support.hpp"

using namespace raamil;
using namespace raamil::testing;

namespace {

// Tolerances and thresholds.
constexpr double kGradRelErr = 1e-4;
constexpr double kGradSeconds = 10.0;
constexpr double kSimplexTol = 1e-12;
constexpr double kPermutationTol = 1e-9;
constexpr double kOracleTol = 1e-12;
constexpr double kE2eMinAccuracy = 0.90;
constexpr double kE2eSeconds = 600.0;
constexpr double kNullCenter = 0.25;
constexpr double kNullHalfWidth = 0.15;
constexpr double kVanillaBandLo = 0.6;
constexpr double kVanillaBandHi = 0.8;

// Synthetic experiments run on 8x8 grids of 16-dim tokens so the whole gate
// fits a single-core budget; the calibrated strength puts vanilla MIL in band.
constexpr double kCalibratedStrength = 1.4;

const fs::path kWork = fs::temp_directory_path() / "raamil_acceptance";

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

TokenBag random_bag(Rng& rng, std::size_t patches, std::size_t r, std::size_t c, std::size_t d) {
  TokenBag bag{"bag", static_cast<int>(rng.below(kNumClasses)), {}};
  for (std::size_t p = 0; p < patches; ++p) {
    GridTokens g{r, c, d, {}};
    for (std::size_t i = 0; i < r * c * d; ++i) g.values.push_back(static_cast<float>(rng.normal()));
    bag.grids.push_back(std::move(g));
  }
  return bag;
}

/// A model away from its initialization so every parameter carries signal.
Model perturbed_model(Rng& rng, std::size_t dim, const ModelConfig& cfg) {
  Model m = Model::init(cfg, dim, rng.next_u64());
  m.for_each([&](const std::string& name, Tensor& t) {
    const double spread = name == "raa.gamma" ? 1.0 : 0.3;
    for (auto& v : t.storage()) v += rng.uniform(-spread, spread);
  });
  return m;
}

SynthConfig synth(double strength, std::uint64_t seed) {
  SynthConfig s;
  s.patients_per_class = 50;
  s.rows = s.cols = 8;
  s.dim = 16;
  s.min_patches = 1;
  s.max_patches = 2;
  s.motif_strength = strength;
  s.seed = seed;
  return s;
}

TrainConfig train_config(std::uint64_t seed, bool raa) {
  TrainConfig c;
  c.seed = seed;
  c.max_epochs = 25;
  c.adamw.lr = 2e-3;
  c.early_stop.patience = 10;
  c.model.raa_enabled = raa;
  c.model.mil.attention_hidden = 32;
  c.model.mil.classifier_hidden = 32;
  return c;
}

// --- criteria --------------------------------------------------------------------

Outcome gradient_suite() {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(101);
  const TokenBag bag = random_bag(rng, 2, 4, 4, 8);
  const Tensor tokens = bag.tokens();
  const Model base = perturbed_model(rng, 8, ModelConfig{});
  Tensor mask = Tensor::matrix(1, 8, 1.0 / 0.75);
  mask[5] = 0.0;
  LossConfig loss;
  loss.class_weights = {0.7, 2.5, 1.0, 1.3};

  auto eval = [&](const NamedTensors& values, NamedTensors* grads) {
    Model m = base;
    m.assign(values);
    BagGraph bg = build_bag_graph(m, 2, 4, 4, &mask);
    const NodeId l = add_focal_loss(bg.graph, bg.mil.logits, 2, loss);
    bg.graph.forward({{"tokens", tokens}});
    if (grads) *grads = bg.graph.backward(l);
    return bg.graph.value(l).item();
  };
  const NamedTensors point = base.parameters();
  NamedTensors analytic;
  eval(point, &analytic);
  const NamedTensors numeric =
      finite_diff_grad([&](const NamedTensors& v) { return eval(v, nullptr); }, point, 1e-5);

  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, g] : analytic) {
    const double e = relative_error(g, numeric.at(name));
    if (e > worst) worst = e, worst_name = name;
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst < kGradRelErr && secs < kGradSeconds && analytic.size() == point.size(),
          fmt("%zu parameters, max rel err %.2e (%s), %.2fs", analytic.size(), worst,
              worst_name.c_str(), secs)};
}

Outcome identity_at_init() {
  Rng rng(102);
  std::size_t identical = 0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t dim = 4 + rng.below(13);
    ModelConfig with;
    with.mil.attention_hidden = with.mil.classifier_hidden = 16;
    ModelConfig without = with;
    without.raa_enabled = false;
    const std::uint64_t seed = rng.next_u64();
    const TokenBag bag = random_bag(rng, 1 + rng.below(3), 3 + rng.below(4), 3 + rng.below(4), dim);
    const BagForward a = forward_bag(bag, Model::init(with, dim, seed));
    const BagForward b = forward_bag(bag, Model::init(without, dim, seed));
    identical += a.probs == b.probs && a.weights == b.weights && a.logits == b.logits;
  }
  return {identical == 20, fmt("%zu/20 bags bitwise identical", identical)};
}

Outcome simplex_suite() {
  Rng rng(103);
  double alpha = 0.0, w = 0.0, probs = 0.0, ens = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t dim = 2 + rng.below(15);
    const std::size_t rows = 2 + rng.below(6), cols = 2 + rng.below(6);
    const Model m = perturbed_model(rng, dim, ModelConfig{});
    const TokenBag bag = random_bag(rng, 1, rows, cols, dim);

    const auto idx = NeighborhoodIndex::build(rows, cols, 3, true);
    const auto a = affinity_weights(pairwise_neighbor_distances(bag.grids[0], idx), idx, *m.raa);
    for (std::size_t cell = 0; cell + 1 < idx.offsets.size(); ++cell) {
      double s = 0.0;
      for (std::size_t p = idx.offsets[cell]; p < idx.offsets[cell + 1]; ++p) s += a[p];
      alpha = std::max(alpha, std::abs(s - 1.0));
    }
    const auto weights = gated_attention_weights(bag.tokens(), m.mil);
    w = std::max(w, std::abs(std::accumulate(weights.begin(), weights.end(), 0.0) - 1.0));
    const auto p = classify(pool_bag(bag.tokens(), weights), m.mil).probs;
    probs = std::max(probs, std::abs(p[0] + p[1] + p[2] + p[3] - 1.0));

    std::vector<std::vector<ProbVector>> folds(1 + rng.below(6));
    for (auto& f : folds) {
      for (int r = 0; r < 5; ++r) {
        ProbVector q{};
        double s = 0.0;
        for (auto& v : q) s += (v = rng.uniform());
        for (auto& v : q) v /= s;
        f.push_back(q);
      }
    }
    for (const auto& q : ensemble_average(folds).probs) {
      ens = std::max(ens, std::abs(q[0] + q[1] + q[2] + q[3] - 1.0));
    }
  }
  const double worst = std::max({alpha, w, probs, ens});
  return {worst < kSimplexTol,
          fmt("max |sum-1|: alpha %.1e, w %.1e, probs %.1e, ensemble %.1e", alpha, w, probs, ens)};
}

Outcome permutation_suite() {
  Rng rng(104);
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t dim = 4 + rng.below(9);
    const Model m = perturbed_model(rng, dim, ModelConfig{});
    const TokenBag bag = random_bag(rng, 2 + rng.below(4), 4, 4, dim);
    TokenBag perm = bag;
    rng.shuffle(perm.grids);
    const auto a = forward_bag(bag, m).probs;
    const auto b = forward_bag(perm, m).probs;
    double diff = 0.0, scale = 0.0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      diff = std::max(diff, std::abs(a[c] - b[c]));
      scale = std::max(scale, std::abs(a[c]));
    }
    worst = std::max(worst, diff / scale);
  }
  return {worst < kPermutationTol, fmt("max relative change %.2e over 50 bags", worst)};
}

Outcome metric_oracles() {
  Rng rng(105);
  double roc = 0.0, ap = 0.0;
  std::size_t tie_heavy = 0;
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = 2 + rng.below(19);
    const bool ties = i % 2 == 0;
    tie_heavy += ties;
    std::vector<double> s(n);
    std::vector<bool> y(n);
    for (std::size_t j = 0; j < n; ++j) {
      s[j] = ties ? static_cast<double>(rng.below(3)) * 0.25 : rng.uniform();
      y[j] = rng.uniform() < 0.5;
    }
    const std::size_t pos = rng.below(n);
    y[pos] = true;
    y[(pos + 1 + rng.below(n - 1)) % n] = false;
    auto flags = std::make_unique<bool[]>(n);
    std::copy(y.begin(), y.end(), flags.get());
    const std::span<const bool> yy(flags.get(), n);
    roc = std::max(roc, std::abs(binary_roc_auc(s, yy) - oracle_pairwise_auc(s, y)));
    ap = std::max(ap, std::abs(*average_precision(s, yy) - *oracle_threshold_ap(s, y)));
  }
  return {roc < kOracleTol && ap < kOracleTol,
          fmt("200 instances (%zu tie-heavy): ROC-AUC max err %.1e, AP max err %.1e", tie_heavy,
              roc, ap)};
}

Outcome stratification_property() {
  Rng rng(106);
  std::size_t violations = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t k = 2 + rng.below(9);
    const std::size_t n = k + rng.below(120);
    std::vector<std::pair<std::string, int>> labeled;
    for (std::size_t i = 0; i < n; ++i) {
      labeled.emplace_back("p" + std::to_string(i), static_cast<int>(rng.below(kNumClasses)));
    }
    const FoldPlan plan = stratified_kfold(labeled, k, rng.next_u64());
    std::size_t covered = 0;
    for (std::size_t f = 0; f < k; ++f) covered += plan.members(f).size();
    if (covered != n || plan.assignment.size() != n) ++violations;
    for (int c = 0; c < static_cast<int>(kNumClasses); ++c) {
      std::vector<std::size_t> per_fold(k, 0);
      std::size_t n_c = 0;
      for (const auto& [id, label] : labeled) {
        if (label != c) continue;
        ++n_c;
        ++per_fold[plan.assignment.at(id)];
      }
      const double share = static_cast<double>(n_c) / static_cast<double>(k);
      for (std::size_t cnt : per_fold) {
        if (std::abs(static_cast<double>(cnt) - share) >= 1.0) ++violations;
      }
    }
  }
  return {violations == 0, fmt("500 label multisets, %zu violations", violations)};
}

Outcome synthetic_end_to_end() {
  const auto r = run_synthetic_experiment(synth(2.0, 7), train_config(7, true), kWork / "e2e");
  return {r.ensemble_accuracy >= kE2eMinAccuracy && r.seconds < kE2eSeconds,
          fmt("ensemble accuracy %.3f on %zu held-out patients (CV acc %s), %.0fs",
              r.ensemble_accuracy, r.test_report.core.n,
              r.cv_report["val_acc"]["formatted"].get<std::string>().c_str(), r.seconds)};
}

Outcome raa_advantage() {
  double raa = 0.0, vanilla = 0.0;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto v = run_synthetic_experiment(synth(kCalibratedStrength, seed),
                                            train_config(seed, false), kWork / "adv");
    const auto a = run_synthetic_experiment(synth(kCalibratedStrength, seed),
                                            train_config(seed, true), kWork / "adv");
    vanilla += v.ensemble_accuracy / 3.0;
    raa += a.ensemble_accuracy / 3.0;
    per_seed += fmt(" [%.3f vs %.3f]", a.ensemble_accuracy, v.ensemble_accuracy);
  }
  const bool in_band = vanilla >= kVanillaBandLo && vanilla <= kVanillaBandHi;
  return {raa > vanilla && in_band,
          fmt("strength %.1f: RAA-MIL %.3f vs vanilla %.3f (vanilla %s band)", kCalibratedStrength,
              raa, vanilla, in_band ? "in" : "outside") +
              per_seed};
}

Outcome null_signal() {
  bool ok = true;
  std::string accs;
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    const auto r = run_synthetic_experiment(synth(0.0, seed), train_config(seed, true), kWork / "null");
    ok = ok && std::abs(r.ensemble_accuracy - kNullCenter) <= kNullHalfWidth;
    accs += fmt(" %.3f", r.ensemble_accuracy);
  }
  return {ok, "ensemble accuracy per seed:" + accs};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Outcome determinism() {
  const fs::path dir = kWork / "determinism";
  fs::remove_all(dir);
  SynthConfig s = synth(2.0, 9);
  s.patients_per_class = 10;
  const DatasetManifest m = generate_synthetic_dataset(s, dir / "data");
  std::vector<std::pair<std::string, int>> labeled;
  for (const auto& e : m.patients) labeled.emplace_back(e.patient_id, e.label);
  stratified_kfold(labeled, 5, 9).save(dir / "plan.json");

  auto train = [&](const std::string& out) {
    const std::vector<std::string> args{
        "raamil", "train", "--manifest", (dir / "data" / "manifest.json").string(), "--plan",
        (dir / "plan.json").string(), "--set", "max_epochs=3", "--set", "lr=0.002", "--seed", "9",
        "--out", (dir / out).string()};
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream o, e;
    return run_cli(static_cast<int>(argv.size()), argv.data(), o, e);
  };
  if (train("a") != kExitOk || train("b") != kExitOk) return {false, "train invocation failed"};
  std::size_t compared = 0, differing = 0;
  for (const auto& entry : fs::directory_iterator(dir / "a")) {
    const auto name = entry.path().filename();
    ++compared;
    differing += slurp(entry.path()) != slurp(dir / "b" / name);
  }
  return {compared >= 12 && differing == 0,
          fmt("%zu run files compared, %zu differ", compared, differing)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"identity at init", identity_at_init},
      {"simplex suite", simplex_suite},
      {"permutation suite", permutation_suite},
      {"metric oracles", metric_oracles},
      {"stratification property", stratification_property},
      {"synthetic end-to-end", synthetic_end_to_end},
      {"RAA advantage on neighborhood signal", raa_advantage},
      {"null-signal sanity", null_signal},
      {"determinism", determinism},
  };
  std::size_t failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s  %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  fs::remove_all(kWork);
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
