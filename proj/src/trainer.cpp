#include "raamil/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <fstream>
#include <set>

namespace raamil {

// --- config --------------------------------------------------------------------

void TrainConfig::validate() const {
  if (folds < 2) throw Error("folds must be >= 2");
  if (max_epochs < 1) throw Error("max_epochs must be >= 1");
  model.raa.validate();
  model.mil.validate();
  loss.validate();
  adamw.validate();
  plateau.validate();
  early_stop.validate();
}

json TrainConfig::to_json() const {
  json j = model_config_to_json(model);
  j["folds"] = folds;
  j["seed"] = seed;
  j["max_epochs"] = max_epochs;
  j["focal_gamma"] = loss.focal_gamma;
  j["label_smoothing"] = loss.smoothing;
  j["class_weights"] = auto_class_weights ? json("auto") : json(loss.class_weights);
  j["lr"] = adamw.lr;
  j["beta1"] = adamw.beta1;
  j["beta2"] = adamw.beta2;
  j["adam_eps"] = adamw.eps;
  j["weight_decay"] = adamw.weight_decay;
  j["clip_norm"] = adamw.clip_norm;
  j["plateau_factor"] = plateau.factor;
  j["plateau_patience"] = plateau.patience;
  j["plateau_threshold"] = plateau.threshold;
  j["min_lr"] = plateau.min_lr;
  j["early_stop_patience"] = early_stop.patience;
  j["early_stop_min_delta"] = early_stop.min_delta;
  j["test_ids"] = test_ids;
  j["parallel_folds"] = parallel_folds;
  return j;
}

TrainConfig TrainConfig::from_json(const json& in) {
  if (!in.is_object()) throw Error("config must be a JSON object");
  const json defaults = TrainConfig{}.to_json();
  for (const auto& [key, value] : in.items()) {
    if (!defaults.contains(key)) throw Error("unknown config key '" + key + "'");
  }
  json j = defaults;
  j.update(in);

  TrainConfig c;
  try {
    c.model = model_config_from_json(j);
    c.folds = j.at("folds").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.max_epochs = j.at("max_epochs").get<std::size_t>();
    c.loss.focal_gamma = j.at("focal_gamma").get<double>();
    c.loss.smoothing = j.at("label_smoothing").get<double>();
    const json& w = j.at("class_weights");
    if (w.is_string()) {
      if (w.get<std::string>() != "auto") throw Error("class_weights must be \"auto\" or 4 numbers");
      c.auto_class_weights = true;
    } else {
      c.loss.class_weights = w.get<ClassWeights>();
      c.auto_class_weights = false;
    }
    c.adamw.lr = j.at("lr").get<double>();
    c.adamw.beta1 = j.at("beta1").get<double>();
    c.adamw.beta2 = j.at("beta2").get<double>();
    c.adamw.eps = j.at("adam_eps").get<double>();
    c.adamw.weight_decay = j.at("weight_decay").get<double>();
    c.adamw.clip_norm = j.at("clip_norm").get<double>();
    c.plateau.factor = j.at("plateau_factor").get<double>();
    c.plateau.patience = j.at("plateau_patience").get<std::size_t>();
    c.plateau.threshold = j.at("plateau_threshold").get<double>();
    c.plateau.min_lr = j.at("min_lr").get<double>();
    c.early_stop.patience = j.at("early_stop_patience").get<std::size_t>();
    c.early_stop.min_delta = j.at("early_stop_min_delta").get<double>();
    c.test_ids = j.at("test_ids").get<std::vector<std::string>>();
    c.parallel_folds = j.at("parallel_folds").get<bool>();
  } catch (const json::exception& e) {
    throw Error(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  json j = to_json();
  if (!j.contains(key)) throw Error("unknown config key '" + key + "'");
  try {
    j[key] = json::parse(value);
  } catch (const json::exception&) {
    j[key] = value;
  }
  *this = from_json(j);
}

// --- data ----------------------------------------------------------------------

BagData BagData::from_bag(const TokenBag& bag) {
  bag.validate();
  if (bag.label < 0 || bag.label >= static_cast<int>(kNumClasses)) {
    throw Error("bag '" + bag.patient_id + "' has label " + std::to_string(bag.label));
  }
  BagData d;
  d.id = bag.patient_id;
  d.label = static_cast<std::size_t>(bag.label);
  d.patches = bag.num_patches();
  d.rows = bag.grids.front().rows;
  d.cols = bag.grids.front().cols;
  d.tokens = bag.tokens();
  return d;
}

BagStore load_bag_store(const DatasetManifest& manifest, const std::vector<std::string>& ids) {
  BagStore store;
  if (ids.empty()) {
    for (const auto& e : manifest.patients) store.emplace(e.patient_id, BagData::from_bag(manifest.load_bag(e)));
  } else {
    for (const auto& id : ids) store.emplace(id, BagData::from_bag(manifest.load_bag(manifest.find(id))));
  }
  return store;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string RunHistory::to_csv() const {
  std::string out = "epoch,train_loss,val_acc,val_f1,lr\n";
  for (const auto& e : epochs) {
    out += std::to_string(e.epoch) + "," + format_double(e.train_loss) + "," +
           format_double(e.val_acc) + "," + format_double(e.val_f1) + "," + format_double(e.lr) +
           "\n";
  }
  return out;
}

void RunHistory::save_csv(const fs::path& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << to_csv();
}

// --- training --------------------------------------------------------------------

namespace {

const BagData& lookup(const BagStore& bags, const std::string& id) {
  const auto it = bags.find(id);
  if (it == bags.end()) throw Error("patient '" + id + "' was not loaded");
  return it->second;
}

ProbVector infer(const Model& model, const BagData& bag) {
  if (bag.tokens.cols() != model.dim) {
    throw ShapeError("bag '" + bag.id + "' has token dim " + std::to_string(bag.tokens.cols()) +
                     ", model expects " + std::to_string(model.dim));
  }
  BagGraph bg = build_bag_graph(model, bag.patches, bag.rows, bag.cols);
  const Tensor probs = bg.graph.forward({{"tokens", bag.tokens}}).at("probs");
  ProbVector p{};
  for (std::size_t c = 0; c < kNumClasses; ++c) p[c] = probs[c];
  return p;
}

Tensor dropout_mask(Rng& rng, std::size_t dim, double rate) {
  Tensor mask = Tensor::matrix(1, dim, 1.0);
  if (rate <= 0.0) return mask;
  const double keep = 1.0 / (1.0 - rate);
  for (auto& v : mask.storage()) v = rng.uniform() < rate ? 0.0 : keep;
  return mask;
}

}  // namespace

json FoldResult::checkpoint_meta(const TrainConfig& cfg) const {
  return {{"fold", fold},
          {"best_epoch", best_epoch},
          {"val_f1", best_val_f1},
          {"val_acc", best_val_acc},
          {"class_weights", class_weights},
          {"config", cfg.to_json()}};
}

FoldResult train_fold(const BagStore& bags, const FoldPlan& plan, std::size_t fold,
                      const TrainConfig& cfg) {
  cfg.validate();
  if (fold >= plan.k) {
    throw Error("fold " + std::to_string(fold) + " out of range for a " + std::to_string(plan.k) +
                "-fold plan");
  }
  FoldResult r;
  r.fold = fold;
  r.train_ids = plan.complement(fold);
  r.val_ids = plan.members(fold);
  if (r.train_ids.empty()) throw Error("fold " + std::to_string(fold) + ": empty training partition");
  if (r.val_ids.empty()) throw Error("fold " + std::to_string(fold) + ": empty validation partition");

  std::set<std::string> held_out(cfg.test_ids.begin(), cfg.test_ids.end());
  held_out.insert(plan.test_ids.begin(), plan.test_ids.end());
  const std::set<std::string> train_set(r.train_ids.begin(), r.train_ids.end());
  for (const auto& id : r.val_ids) {
    if (train_set.count(id)) throw Error("leakage: '" + id + "' is in both train and validation");
  }
  for (const auto* part : {&r.train_ids, &r.val_ids}) {
    for (const auto& id : *part) {
      if (held_out.count(id)) throw Error("leakage: test patient '" + id + "' is in the CV pool");
    }
  }

  std::vector<const BagData*> train, val;
  for (const auto& id : r.train_ids) train.push_back(&lookup(bags, id));
  for (const auto& id : r.val_ids) val.push_back(&lookup(bags, id));
  const std::size_t dim = train.front()->tokens.cols();

  LossConfig loss = cfg.loss;
  if (cfg.auto_class_weights) {
    std::array<std::size_t, kNumClasses> counts{};
    for (const auto* b : train) ++counts[b->label];
    loss.class_weights = class_weights_from_counts(counts);
  }
  r.class_weights = loss.class_weights;

  Model model = Model::init(cfg.model, dim, cfg.seed, fold);
  AdamW opt(cfg.adamw);
  PlateauScheduler plateau(cfg.plateau, cfg.adamw.lr);
  EarlyStopping stopper(cfg.early_stop);
  Rng shuffle_rng(cfg.seed, Stream::kShuffle, fold);
  Rng dropout_rng(cfg.seed, Stream::kDropout, fold);
  r.model = model;

  std::vector<std::size_t> truth(val.size());
  for (std::size_t i = 0; i < val.size(); ++i) truth[i] = val[i]->label;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::vector<const BagData*> order = train;
    shuffle_rng.shuffle(order);
    const double epoch_lr = opt.lr();
    double total_loss = 0.0;
    for (const BagData* bag : order) {
      if (bag->tokens.cols() != dim) {
        throw ShapeError("bag '" + bag->id + "' has token dim " +
                         std::to_string(bag->tokens.cols()) + ", expected " + std::to_string(dim));
      }
      const Tensor mask = dropout_mask(dropout_rng, dim, cfg.model.mil.dropout);
      BagGraph bg = build_bag_graph(model, bag->patches, bag->rows, bag->cols, &mask);
      const NodeId l = add_focal_loss(bg.graph, bg.mil.logits, bag->label, loss);
      bg.graph.forward({{"tokens", bag->tokens}});
      total_loss += bg.graph.value(l).item();
      const NamedTensors grads = bg.graph.backward(l);
      NamedTensors params = model.parameters();
      opt.step(params, grads);
      model.assign(params);
    }

    std::vector<std::size_t> pred(val.size());
    for (std::size_t i = 0; i < val.size(); ++i) pred[i] = argmax_class(infer(model, *val[i]));
    const ConfusionReport rep = confusion_and_f1(pred, truth);

    r.history.epochs.push_back({epoch, total_loss / static_cast<double>(order.size()),
                                rep.accuracy, rep.weighted_f1, epoch_lr});
    const bool stop = stopper.update(rep.weighted_f1, epoch);
    if (stopper.improved()) {
      r.model = model;
      r.best_epoch = epoch;
      r.best_val_f1 = rep.weighted_f1;
      r.best_val_acc = rep.accuracy;
    }
    if (stop) break;
    opt.set_lr(plateau.update(rep.weighted_f1));
  }
  return r;
}

FoldResult train_fold(const DatasetManifest& manifest, const FoldPlan& plan, std::size_t fold,
                      const TrainConfig& cfg) {
  std::vector<std::string> ids;
  for (const auto& [id, f] : plan.assignment) ids.push_back(id);
  return train_fold(load_bag_store(manifest, ids), plan, fold, cfg);
}

json cv_report(const std::vector<FoldResult>& folds) {
  json rows = json::array();
  std::vector<double> acc, f1;
  for (const auto& f : folds) {
    rows.push_back({{"fold", f.fold},
                    {"best_epoch", f.best_epoch},
                    {"epochs_run", f.history.epochs.size()},
                    {"val_acc", f.best_val_acc},
                    {"val_f1", f.best_val_f1}});
    acc.push_back(f.best_val_acc);
    f1.push_back(f.best_val_f1);
  }
  auto summary = [](const std::vector<double>& v) {
    const MeanStd s = mean_std(v);
    return json{{"mean", s.mean}, {"std", s.std}, {"formatted", format_mean_std(s)}};
  };
  return {{"folds", rows}, {"val_acc", summary(acc)}, {"val_f1", summary(f1)}};
}

CvResult run_cv(const DatasetManifest& manifest, const FoldPlan& plan, const TrainConfig& cfg,
                const std::optional<fs::path>& run_dir) {
  cfg.validate();
  if (plan.k != cfg.folds) {
    throw Error("fold plan has k=" + std::to_string(plan.k) + " but config asks for " +
                std::to_string(cfg.folds) + " folds");
  }
  std::vector<std::string> ids;
  for (const auto& [id, f] : plan.assignment) ids.push_back(id);
  const BagStore bags = load_bag_store(manifest, ids);

  CvResult result;
  result.folds.resize(plan.k);
  std::vector<std::exception_ptr> errors(plan.k);
  const int n = static_cast<int>(plan.k);
#pragma omp parallel for schedule(dynamic) if (cfg.parallel_folds)
  for (int f = 0; f < n; ++f) {
    try {
      result.folds[f] = train_fold(bags, plan, static_cast<std::size_t>(f), cfg);
    } catch (...) {
      errors[f] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  result.report = cv_report(result.folds);

  if (run_dir) {
    fs::create_directories(*run_dir);
    {
      std::ofstream f(*run_dir / "config.json", std::ios::trunc);
      f << cfg.to_json().dump(2) << "\n";
    }
    plan.save(*run_dir / "plan.json");
    for (const auto& fr : result.folds) {
      const std::string stem = "fold_" + std::to_string(fr.fold);
      save_checkpoint(fr.model, fr.checkpoint_meta(cfg), *run_dir / (stem + ".raac"));
      fr.history.save_csv(*run_dir / (stem + "_history.csv"));
    }
    std::ofstream f(*run_dir / "cv_report.json", std::ios::trunc);
    f << result.report.dump(2) << "\n";
    if (!f) throw Error("cannot write cv_report.json in " + run_dir->string());
  }
  return result;
}

std::vector<std::vector<ProbVector>> predict(const std::vector<Model>& models,
                                             const std::vector<const BagData*>& bags) {
  std::vector<std::vector<ProbVector>> out(models.size(), std::vector<ProbVector>(bags.size()));
  for (std::size_t m = 0; m < models.size(); ++m) {
    for (std::size_t b = 0; b < bags.size(); ++b) out[m][b] = infer(models[m], *bags[b]);
  }
  return out;
}

}  // namespace raamil
