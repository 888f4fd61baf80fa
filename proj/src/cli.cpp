#include "raamil/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "raamil/trainer.hpp"

namespace raamil {

namespace {

struct UsageError : Error {
  using Error::Error;
};

std::pair<std::string, std::string> split_assignment(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw UsageError("override '" + kv + "' is not of the form key=value");
  }
  return {kv.substr(0, eq), kv.substr(eq + 1)};
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << j.dump(2) << "\n";
  if (!f) throw Error("write failed for " + path.string());
}

json parse_value(const std::string& v) {
  try {
    return json::parse(v);
  } catch (const json::exception&) {
    return v;
  }
}

TrainConfig load_train_config(const std::string& file, const std::vector<std::string>& sets) {
  try {
    TrainConfig cfg = file.empty() ? TrainConfig{} : TrainConfig::from_json(read_json(file));
    for (const auto& kv : sets) {
      const auto [k, v] = split_assignment(kv);
      cfg.set(k, v);
    }
    return cfg;
  } catch (const UsageError&) {
    throw;
  } catch (const Error& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
}

SynthConfig load_synth_config(const std::string& file, const std::vector<std::string>& sets) {
  try {
    json j = file.empty() ? SynthConfig{}.to_json() : read_json(file);
    for (const auto& kv : sets) {
      const auto [k, v] = split_assignment(kv);
      j[k] = parse_value(v);
    }
    SynthConfig cfg = SynthConfig::from_json(j);
    cfg.validate();
    return cfg;
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(std::string("synth config: ") + e.what());
  }
}

std::vector<std::pair<std::string, int>> labeled_patients(const DatasetManifest& m) {
  std::vector<std::pair<std::string, int>> out;
  for (const auto& e : m.patients) out.emplace_back(e.patient_id, e.label);
  return out;
}

json probs_json(const std::vector<ProbVector>& rows) {
  json out = json::array();
  for (const auto& p : rows) out.push_back(p);
  return out;
}

std::vector<ProbVector> probs_from_json(const json& j) {
  std::vector<ProbVector> out;
  for (const auto& row : j) out.push_back(row.get<ProbVector>());
  return out;
}

struct Options {
  std::vector<std::string> sets;
  std::string config;
  std::string out;
  std::string manifest;
  std::string plan;
  std::optional<std::uint64_t> seed;
  std::size_t k = 5;
  double test_fraction = 0.0;
  bool parallel_folds = false;
  std::vector<std::string> checkpoints;
  std::vector<std::string> ids;
  std::string subset = "test";
  std::vector<std::string> probs;
  std::string name = "RAA-MIL";
  std::string compare;
  std::string compare_name = "Vanilla MIL";
  std::string checkpoint;
  std::string patient;
  std::size_t size = 224;
  std::string fragment;
};

// --- subcommands ---------------------------------------------------------------

int cmd_gen_synth(const Options& o, std::ostream& out) {
  SynthConfig cfg = load_synth_config(o.config, o.sets);
  if (o.seed) cfg.seed = *o.seed;
  const DatasetManifest m = generate_synthetic_dataset(cfg, o.out);
  write_json(fs::path(o.out) / "synth_config.json", cfg.to_json());
  out << "wrote " << m.patients.size() << " patients to " << o.out << "\n";
  return kExitOk;
}

int cmd_split(const Options& o, std::ostream& out) {
  const DatasetManifest m = DatasetManifest::load(o.manifest);
  const std::uint64_t seed = o.seed.value_or(0);
  auto labeled = labeled_patients(m);
  std::vector<std::string> test_ids;
  if (o.test_fraction > 0.0) {
    if (o.test_fraction >= 1.0) throw UsageError("--test-fraction must lie in [0, 1)");
    test_ids = stratified_holdout(labeled, o.test_fraction, seed);
    const std::set<std::string> held(test_ids.begin(), test_ids.end());
    std::erase_if(labeled, [&](const auto& p) { return held.count(p.first) > 0; });
  }
  FoldPlan plan = stratified_kfold(labeled, o.k, seed);
  plan.test_ids = test_ids;
  plan.save(o.out);
  out << "wrote " << o.k << "-fold plan over " << plan.assignment.size() << " patients ("
      << test_ids.size() << " held out) to " << o.out << "\n";
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  TrainConfig cfg = load_train_config(o.config, o.sets);
  if (o.seed) cfg.seed = *o.seed;
  if (o.parallel_folds) cfg.parallel_folds = true;
  const DatasetManifest m = DatasetManifest::load(o.manifest);
  const FoldPlan plan = FoldPlan::load(o.plan);
  for (const auto& id : plan.test_ids) {
    if (std::find(cfg.test_ids.begin(), cfg.test_ids.end(), id) == cfg.test_ids.end()) {
      cfg.test_ids.push_back(id);
    }
  }
  std::sort(cfg.test_ids.begin(), cfg.test_ids.end());
  if (cfg.folds != plan.k) {
    throw UsageError("config has folds=" + std::to_string(cfg.folds) + " but the plan has k=" +
                     std::to_string(plan.k) + "; pass --set folds=" + std::to_string(plan.k));
  }
  const CvResult cv = run_cv(m, plan, cfg, fs::path(o.out));
  out << "validation accuracy " << cv.report["val_acc"]["formatted"].get<std::string>()
      << ", weighted F1 " << cv.report["val_f1"]["formatted"].get<std::string>() << "\n";
  return kExitOk;
}

int cmd_predict(const Options& o, std::ostream& out) {
  const DatasetManifest m = DatasetManifest::load(o.manifest);
  std::vector<std::string> ids = o.ids;
  if (ids.empty() && !o.plan.empty()) {
    const FoldPlan plan = FoldPlan::load(o.plan);
    if (o.subset == "test") {
      ids = plan.test_ids;
    } else if (o.subset == "cv") {
      for (const auto& [id, f] : plan.assignment) ids.push_back(id);
    } else {
      throw UsageError("--subset must be 'test' or 'cv'");
    }
    if (ids.empty()) throw UsageError("the plan has no patients in subset '" + o.subset + "'");
  }
  if (ids.empty()) {
    for (const auto& e : m.patients) ids.push_back(e.patient_id);
  }
  const BagStore store = load_bag_store(m, ids);
  std::vector<const BagData*> bags;
  json patients = json::array();
  for (const auto& id : ids) {
    bags.push_back(&store.at(id));
    patients.push_back({{"id", id}, {"label", store.at(id).label}});
  }

  std::vector<Model> models;
  std::vector<std::size_t> fold_ids;
  for (std::size_t i = 0; i < o.checkpoints.size(); ++i) {
    Checkpoint ck = load_checkpoint(o.checkpoints[i]);
    if (ck.model.dim != m.dim) {
      throw Error(o.checkpoints[i] + ": model dim " + std::to_string(ck.model.dim) +
                  " does not match manifest dim " + std::to_string(m.dim));
    }
    fold_ids.push_back(ck.meta.contains("fold") ? ck.meta["fold"].get<std::size_t>() : i);
    models.push_back(std::move(ck.model));
  }
  const auto probs = predict(models, bags);
  json folds = json::array();
  for (std::size_t i = 0; i < models.size(); ++i) {
    folds.push_back({{"fold", fold_ids[i]}, {"checkpoint", o.checkpoints[i]}, {"probs", probs_json(probs[i])}});
  }
  write_json(o.out, {{"class_names", kClassNames}, {"patients", patients}, {"folds", folds}});
  out << "wrote " << models.size() << " x " << bags.size() << " probability rows to " << o.out << "\n";
  return kExitOk;
}

int cmd_ensemble(const Options& o, std::ostream& out) {
  std::map<std::size_t, std::vector<ProbVector>> by_fold;
  json patients;
  for (const auto& path : o.probs) {
    const json j = read_json(path);
    if (patients.is_null()) {
      patients = j.at("patients");
    } else if (j.at("patients") != patients) {
      throw Error(path + ": patient list differs from " + o.probs.front());
    }
    for (const auto& f : j.at("folds")) {
      const auto fold = f.at("fold").get<std::size_t>();
      if (!by_fold.emplace(fold, probs_from_json(f.at("probs"))).second) {
        throw Error(path + ": fold " + std::to_string(fold) + " appears more than once");
      }
    }
  }
  const EnsembleResult r = ensemble_average(by_fold);
  json folds = json::array();
  for (const auto& [f, rows] : by_fold) folds.push_back(f);
  write_json(o.out, {{"class_names", kClassNames},
                     {"patients", patients},
                     {"folds", folds},
                     {"probs", probs_json(r.probs)},
                     {"pred", r.labels},
                     {"argmax_ties", r.argmax_ties}});
  out << "averaged " << by_fold.size() << " folds over " << r.probs.size() << " patients";
  if (r.argmax_ties) out << " (" << r.argmax_ties << " argmax ties broken toward the lowest class)";
  out << "\n";
  return kExitOk;
}

MetricsReport report_for(const std::string& path) {
  const json j = read_json(path);
  std::vector<std::size_t> truth;
  for (const auto& p : j.at("patients")) truth.push_back(p.at("label").get<std::size_t>());
  return evaluate(probs_from_json(j.at("probs")), truth);
}

int cmd_report(const Options& o, std::ostream& out) {
  std::vector<std::pair<std::string, MetricsReport>> rows;
  if (!o.compare.empty()) rows.emplace_back(o.compare_name, report_for(o.compare));
  rows.emplace_back(o.name, report_for(o.probs.front()));
  json j = json::object();
  for (const auto& [name, r] : rows) j[name] = r.to_json();
  if (!o.out.empty()) write_json(o.out, j);
  out << format_summary_table(rows) << "\n" << format_pr_auc_table(rows);
  return kExitOk;
}

int cmd_export_attn(const Options& o, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const DatasetManifest m = DatasetManifest::load(o.manifest);
  const TokenBag bag = m.load_bag(m.find(o.patient));
  const BagForward f = forward_bag(bag, ck.model);
  const auto files = export_attention_maps(f.weights, bag.num_patches(), bag.grids.front().rows,
                                           bag.grids.front().cols, o.out, o.patient, o.size);
  out << "wrote " << files.size() << " attention maps for " << o.patient << " to " << o.out << "\n";
  return kExitOk;
}

int cmd_validate(const Options& o, std::ostream& out) {
  DatasetManifest m = DatasetManifest::load(o.manifest);
  if (!o.fragment.empty()) {
    const fs::path frag(o.fragment);
    m.merge_fragment(read_json(frag), frag.parent_path());
  }
  const ValidationReport r = validate_manifest(m);
  out << r.to_json().dump(2) << "\n";
  if (r.ok && !o.fragment.empty() && !o.out.empty()) m.save(o.out);
  return r.ok ? kExitOk : kExitFailure;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Region-affinity attention MIL: synthesize, split, train, predict and evaluate"};
  app.require_subcommand(1);
  Options o;

  auto add_sets = [&](CLI::App* c) {
    c->add_option("--config", o.config, "flat JSON config file")->check(CLI::ExistingFile);
    c->add_option("--set", o.sets, "override a config key (key=value), repeatable");
  };
  auto add_seed = [&](CLI::App* c) { c->add_option("--seed", o.seed, "seed for every random stream"); };

  auto* gen = app.add_subcommand("gen-synth", "write a synthetic token-bag dataset");
  add_sets(gen);
  add_seed(gen);
  gen->add_option("--out", o.out, "output directory")->required();

  auto* split = app.add_subcommand("split", "stratified k-fold plan with optional test hold-out");
  split->add_option("--manifest", o.manifest)->required()->check(CLI::ExistingFile);
  split->add_option("--k", o.k, "number of folds")->check(CLI::Range(2, 1000));
  add_seed(split);
  split->add_option("--test-fraction", o.test_fraction, "stratified hold-out fraction");
  split->add_option("--out", o.out, "plan JSON path")->required();

  auto* train = app.add_subcommand("train", "cross-validated training into a run directory");
  train->add_option("--manifest", o.manifest)->required()->check(CLI::ExistingFile);
  train->add_option("--plan", o.plan)->required()->check(CLI::ExistingFile);
  add_sets(train);
  add_seed(train);
  train->add_flag("--parallel-folds", o.parallel_folds, "train folds concurrently");
  train->add_option("--out", o.out, "run directory")->required();

  auto* pred = app.add_subcommand("predict", "per-fold probabilities for a set of patients");
  pred->add_option("--manifest", o.manifest)->required()->check(CLI::ExistingFile);
  pred->add_option("--checkpoints", o.checkpoints, "one or more .raac files")
      ->required()
      ->check(CLI::ExistingFile);
  pred->add_option("--ids", o.ids, "patient ids (default: plan subset, else all)");
  pred->add_option("--plan", o.plan, "take patients from this plan")->check(CLI::ExistingFile);
  pred->add_option("--subset", o.subset, "plan subset: test or cv");
  pred->add_option("--out", o.out, "probabilities JSON path")->required();

  auto* ens = app.add_subcommand("ensemble", "average per-fold probabilities");
  ens->add_option("--probs", o.probs, "predict outputs")->required()->check(CLI::ExistingFile);
  ens->add_option("--out", o.out)->required();

  auto* rep = app.add_subcommand("report", "metrics JSON and summary tables");
  rep->add_option("--probs", o.probs, "ensemble output")->required()->expected(1)->check(CLI::ExistingFile);
  rep->add_option("--name", o.name, "row label");
  rep->add_option("--compare", o.compare, "second ensemble output")->check(CLI::ExistingFile);
  rep->add_option("--compare-name", o.compare_name);
  rep->add_option("--out", o.out, "metrics JSON path");

  auto* attn = app.add_subcommand("export-attn", "attention heatmaps for one patient");
  attn->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
  attn->add_option("--manifest", o.manifest)->required()->check(CLI::ExistingFile);
  attn->add_option("--patient", o.patient)->required();
  attn->add_option("--size", o.size, "output edge in pixels")->check(CLI::PositiveNumber);
  attn->add_option("--out", o.out, "output directory")->required();

  auto* val = app.add_subcommand("validate", "check a manifest and its token files");
  val->add_option("--manifest", o.manifest)->required()->check(CLI::ExistingFile);
  val->add_option("--merge-fragment", o.fragment, "featurizer manifest fragment")
      ->check(CLI::ExistingFile);
  val->add_option("--out", o.out, "write the merged manifest here when valid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    err << "run with --help for usage\n";
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_synth(o, out);
    if (*split) return cmd_split(o, out);
    if (*train) return cmd_train(o, out);
    if (*pred) return cmd_predict(o, out);
    if (*ens) return cmd_ensemble(o, out);
    if (*rep) return cmd_report(o, out);
    if (*attn) return cmd_export_attn(o, out);
    if (*val) return cmd_validate(o, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace raamil
