#include "raamil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>

namespace raamil {

namespace {

void check_label(std::size_t label, const char* what) {
  if (label >= kNumClasses) {
    throw Error(std::string(what) + " label " + std::to_string(label) + " out of range [0, " +
                std::to_string(kNumClasses) + ")");
  }
}

void check_probs(std::span<const ProbVector> probs, std::span<const std::size_t> truth) {
  if (probs.size() != truth.size()) {
    throw ShapeError(std::to_string(probs.size()) + " probability rows for " +
                     std::to_string(truth.size()) + " labels");
  }
  if (probs.empty()) throw Error("no predictions to score");
  for (std::size_t t : truth) check_label(t, "true");
}

std::vector<double> column(std::span<const ProbVector> probs, std::size_t c) {
  std::vector<double> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i][c];
  return out;
}

std::vector<bool> one_vs_rest(std::span<const std::size_t> truth, std::size_t c) {
  std::vector<bool> out(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) out[i] = truth[i] == c;
  return out;
}

// std::vector<bool> has no contiguous storage, so wrap it for the span APIs.
std::unique_ptr<bool[]> as_array(const std::vector<bool>& v) {
  auto out = std::make_unique<bool[]>(v.size());
  std::copy(v.begin(), v.end(), out.get());
  return out;
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::string fixed_or_na(const std::optional<double>& v, int decimals) {
  return v ? fixed(*v, decimals) : "n/a";
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

ConfusionReport confusion_and_f1(std::span<const std::size_t> predicted,
                                 std::span<const std::size_t> truth) {
  if (predicted.size() != truth.size()) {
    throw ShapeError(std::to_string(predicted.size()) + " predictions for " +
                     std::to_string(truth.size()) + " labels");
  }
  if (truth.empty()) throw Error("no predictions to score");
  ConfusionReport r;
  r.n = truth.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < r.n; ++i) {
    check_label(predicted[i], "predicted");
    check_label(truth[i], "true");
    ++r.confusion[truth[i]][predicted[i]];
    correct += predicted[i] == truth[i];
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.n);

  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::size_t tp = r.confusion[c][c], support = 0, predicted_c = 0;
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      support += r.confusion[c][k];
      predicted_c += r.confusion[k][c];
    }
    ClassStats& s = r.per_class[c];
    s.support = support;
    s.precision = predicted_c ? static_cast<double>(tp) / static_cast<double>(predicted_c) : 0.0;
    s.recall = support ? static_cast<double>(tp) / static_cast<double>(support) : 0.0;
    const double denom = s.precision + s.recall;
    s.f1 = denom > 0.0 ? 2.0 * s.precision * s.recall / denom : 0.0;
    r.weighted_f1 += s.f1 * static_cast<double>(support);
  }
  r.weighted_f1 /= static_cast<double>(r.n);
  return r;
}

double binary_roc_auc(std::span<const double> scores, std::span<const bool> positive) {
  if (scores.size() != positive.size()) throw ShapeError("scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Mann-Whitney U from mid-ranks: U = R_pos - n_pos (n_pos + 1) / 2.
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (positive[order[k]]) {
        rank_sum += mid;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw Error("ROC-AUC needs at least one positive and one negative");
  }
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const bool> positive) {
  if (scores.size() != positive.size()) throw ShapeError("scores and labels differ in length");
  const std::size_t n = scores.size();
  const auto n_pos = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  if (n_pos == 0) return std::nullopt;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      tp += positive[order[j]];
      ++j;
    }
    seen = j;
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

namespace {

template <typename Fn>
ClassCurveReport per_class_curve(std::span<const ProbVector> probs,
                                 std::span<const std::size_t> truth, Fn&& fn) {
  check_probs(probs, truth);
  ClassCurveReport r;
  double total = 0.0, weight = 0.0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const auto scores = column(probs, c);
    const auto labels = one_vs_rest(truth, c);
    const auto flags = as_array(labels);
    r.per_class[c] = fn(scores, std::span<const bool>(flags.get(), labels.size()));
    if (r.per_class[c]) {
      const auto support = static_cast<double>(std::count(labels.begin(), labels.end(), true));
      total += *r.per_class[c] * support;
      weight += support;
    }
  }
  if (weight > 0.0) r.weighted = total / weight;
  return r;
}

}  // namespace

ClassCurveReport roc_auc_ovr_weighted(std::span<const ProbVector> probs,
                                      std::span<const std::size_t> truth) {
  auto r = per_class_curve(probs, truth,
                           [](std::span<const double> s, std::span<const bool> y)
                               -> std::optional<double> {
                             const auto pos = std::count(y.begin(), y.end(), true);
                             if (pos == 0 || pos == static_cast<long>(y.size())) return std::nullopt;
                             return binary_roc_auc(s, y);
                           });
  if (!r.weighted) throw Error("ROC-AUC undefined: no class has both positives and negatives");
  return r;
}

ClassCurveReport pr_auc_per_class(std::span<const ProbVector> probs,
                                  std::span<const std::size_t> truth) {
  return per_class_curve(probs, truth, [](std::span<const double> s, std::span<const bool> y) {
    return average_precision(s, y);
  });
}

std::size_t argmax_class(const ProbVector& p, bool* tied) {
  std::size_t best = 0;
  bool tie = false;
  for (std::size_t c = 1; c < kNumClasses; ++c) {
    if (p[c] > p[best]) {
      best = c;
      tie = false;
    } else if (p[c] == p[best]) {
      tie = true;
    }
  }
  if (tied) *tied = tie;
  return best;
}

EnsembleResult ensemble_average(const std::map<std::size_t, std::vector<ProbVector>>& by_fold) {
  if (by_fold.empty()) throw Error("ensemble needs at least one fold");
  const std::size_t n = by_fold.begin()->second.size();
  for (const auto& [fold, rows] : by_fold) {
    if (rows.size() != n) {
      throw ShapeError("fold " + std::to_string(fold) + " has " + std::to_string(rows.size()) +
                       " rows, expected " + std::to_string(n));
    }
  }
  EnsembleResult r;
  r.probs.assign(n, ProbVector{});
  r.labels.resize(n);
  const double f = static_cast<double>(by_fold.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      double s = 0.0;
      for (const auto& [fold, rows] : by_fold) s += rows[i][c];
      r.probs[i][c] = s / f;
    }
    bool tied = false;
    r.labels[i] = argmax_class(r.probs[i], &tied);
    r.argmax_ties += tied;
  }
  return r;
}

EnsembleResult ensemble_average(const std::vector<std::vector<ProbVector>>& folds) {
  std::map<std::size_t, std::vector<ProbVector>> by_fold;
  for (std::size_t f = 0; f < folds.size(); ++f) by_fold.emplace(f, folds[f]);
  return ensemble_average(by_fold);
}

MetricsReport evaluate(std::span<const ProbVector> probs, std::span<const std::size_t> truth) {
  check_probs(probs, truth);
  MetricsReport r;
  std::vector<std::size_t> pred(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    bool tied = false;
    pred[i] = argmax_class(probs[i], &tied);
    r.argmax_ties += tied;
  }
  r.core = confusion_and_f1(pred, truth);
  r.pr_auc = pr_auc_per_class(probs, truth);
  try {
    r.roc_auc = roc_auc_ovr_weighted(probs, truth);
  } catch (const Error&) {
    r.roc_auc = ClassCurveReport{};
  }
  return r;
}

json MetricsReport::to_json() const {
  json per_class = json::object();
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const ClassStats& s = core.per_class[c];
    const bool defined = s.support > 0;
    per_class[kClassNames[c]] = {
        {"support", s.support},
        {"precision", defined ? json(s.precision) : json(nullptr)},
        {"recall", defined ? json(s.recall) : json(nullptr)},
        {"f1", defined ? json(s.f1) : json(nullptr)},
        {"roc_auc", optional_json(roc_auc.per_class[c])},
        {"pr_auc", optional_json(pr_auc.per_class[c])},
    };
  }
  return {{"n", core.n},
          {"accuracy", core.accuracy},
          {"weighted_f1", core.weighted_f1},
          {"weighted_roc_auc", optional_json(roc_auc.weighted)},
          {"weighted_pr_auc", optional_json(pr_auc.weighted)},
          {"per_class", per_class},
          {"confusion", core.confusion},
          {"argmax_ties", argmax_ties}};
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw Error("mean of an empty list");
  MeanStd s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

std::string format_mean_std(const MeanStd& s, int decimals) {
  return fixed(s.mean, decimals) + " ± " + fixed(s.std, decimals);
}

std::string format_summary_table(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::ostringstream out;
  out << "| Model | Accuracy | F1 (Weighted) | AUPRC (Weighted) |\n";
  out << "|---|---|---|---|\n";
  for (const auto& [name, r] : rows) {
    out << "| " << name << " | " << fixed(r.core.accuracy, 4) << " | "
        << fixed(r.core.weighted_f1, 4) << " | " << fixed_or_na(r.pr_auc.weighted, 4) << " |\n";
  }
  for (const auto& [name, r] : rows) {
    out << "ROC-AUC (Weighted, OvR) " << name << ": " << fixed_or_na(r.roc_auc.weighted, 4) << "\n";
  }
  return out.str();
}

std::string format_pr_auc_table(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  constexpr std::array<std::size_t, kNumClasses> order{1, 0, 2, 3};
  std::ostringstream out;
  out << "| Model |";
  for (std::size_t c : order) out << " " << kClassNames[c] << " |";
  out << "\n|---|---|---|---|---|\n";
  for (const auto& [name, r] : rows) {
    out << "| " << name << " |";
    for (std::size_t c : order) out << " " << fixed_or_na(r.pr_auc.per_class[c], 4) << " |";
    out << "\n";
  }
  return out.str();
}

// --- attention maps ------------------------------------------------------------

std::vector<double> bilinear_resize(std::span<const double> grid, std::size_t rows,
                                    std::size_t cols, std::size_t out_h, std::size_t out_w) {
  if (grid.size() != rows * cols || rows == 0 || cols == 0) {
    throw ShapeError("grid of " + std::to_string(grid.size()) + " values is not " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
  if (out_h == 0 || out_w == 0) throw ShapeError("output size must be positive");
  auto coord = [](std::size_t o, std::size_t in, std::size_t out, std::size_t& lo,
                  std::size_t& hi, double& t) {
    double x = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    x = std::clamp(x, 0.0, static_cast<double>(in - 1));
    lo = static_cast<std::size_t>(std::floor(x));
    hi = std::min(lo + 1, in - 1);
    t = x - static_cast<double>(lo);
  };
  std::vector<double> out(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t r0, r1;
    double ty;
    coord(y, rows, out_h, r0, r1, ty);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t c0, c1;
      double tx;
      coord(x, cols, out_w, c0, c1, tx);
      const double top = grid[r0 * cols + c0] * (1 - tx) + grid[r0 * cols + c1] * tx;
      const double bot = grid[r1 * cols + c0] * (1 - tx) + grid[r1 * cols + c1] * tx;
      out[y * out_w + x] = top * (1 - ty) + bot * ty;
    }
  }
  return out;
}

void write_pgm(const fs::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> pixels) {
  if (pixels.size() != width * height) throw ShapeError("pixel count does not match image size");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << "P5\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!f) throw Error("write failed for " + path.string());
}

std::vector<AttentionFiles> export_attention_maps(std::span<const double> weights,
                                                  std::size_t patches, std::size_t rows,
                                                  std::size_t cols, const fs::path& out_dir,
                                                  const std::string& stem, std::size_t size) {
  const std::size_t per_patch = rows * cols;
  if (weights.size() != patches * per_patch) {
    throw ShapeError(std::to_string(weights.size()) + " attention weights for " +
                     std::to_string(patches) + " patches of " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  fs::create_directories(out_dir);
  const auto [lo_it, hi_it] = std::minmax_element(weights.begin(), weights.end());
  const double lo = *lo_it, span = *hi_it - *lo_it;

  std::vector<AttentionFiles> files;
  for (std::size_t p = 0; p < patches; ++p) {
    const auto raw = weights.subspan(p * per_patch, per_patch);
    AttentionFiles out{out_dir / (stem + "_patch" + std::to_string(p) + ".pgm"),
                       out_dir / (stem + "_patch" + std::to_string(p) + ".csv")};

    std::ofstream csv(out.csv, std::ios::trunc);
    if (!csv) throw Error("cannot write " + out.csv.string());
    char buf[32];
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        std::snprintf(buf, sizeof buf, "%.17g", raw[r * cols + c]);
        csv << (c ? "," : "") << buf;
      }
      csv << "\n";
    }
    if (!csv) throw Error("write failed for " + out.csv.string());

    std::vector<double> norm(per_patch);
    for (std::size_t i = 0; i < per_patch; ++i) norm[i] = span > 0.0 ? (raw[i] - lo) / span : 0.5;
    const auto up = bilinear_resize(norm, rows, cols, size, size);
    std::vector<std::uint8_t> pixels(up.size());
    for (std::size_t i = 0; i < up.size(); ++i) {
      pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(up[i], 0.0, 1.0)));
    }
    write_pgm(out.pgm, size, size, pixels);
    files.push_back(std::move(out));
  }
  return files;
}

}  // namespace raamil
