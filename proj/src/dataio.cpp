#include "raamil/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "raamil/rng.hpp"

namespace raamil {

namespace {

constexpr char kBagMagic[4] = {'R', 'A', 'A', 'B'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFULL) throw FormatError(std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

void check_label(int label, const std::string& who) {
  if (label < 0 || label >= static_cast<int>(kNumClasses)) {
    throw Error(who + ": label " + std::to_string(label) + " outside 0.." +
                std::to_string(kNumClasses - 1));
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace

// --- tokens ------------------------------------------------------------------

Tensor GridTokens::to_tensor() const {
  std::vector<double> data(values.begin(), values.end());
  return Tensor(Shape{rows * cols, dim}, std::move(data));
}

void GridTokens::validate() const {
  if (rows == 0 || cols == 0 || dim == 0) throw Error("grid dimensions must be positive");
  if (values.size() != rows * cols * dim) {
    throw Error("grid holds " + std::to_string(values.size()) + " values, expected " +
                std::to_string(rows * cols * dim));
  }
}

std::size_t TokenBag::num_tokens() const noexcept {
  std::size_t n = 0;
  for (const auto& g : grids) n += g.num_tokens();
  return n;
}

Tensor TokenBag::tokens() const {
  std::vector<double> data;
  data.reserve(num_tokens() * dim());
  for (const auto& g : grids) data.insert(data.end(), g.values.begin(), g.values.end());
  return Tensor(Shape{num_tokens(), dim()}, std::move(data));
}

void TokenBag::validate() const {
  const std::string who = "bag '" + patient_id + "'";
  check_label(label, who);
  if (grids.empty()) throw Error(who + " has no patches");
  for (std::size_t p = 0; p < grids.size(); ++p) {
    grids[p].validate();
    if (grids[p].rows != grids[0].rows || grids[p].cols != grids[0].cols ||
        grids[p].dim != grids[0].dim) {
      throw Error(who + ": patch " + std::to_string(p) + " grid differs from patch 0");
    }
  }
}

// --- RAAB --------------------------------------------------------------------

std::uintmax_t bag_file_size(std::size_t patches, std::size_t rows, std::size_t cols,
                             std::size_t dim) {
  return kBagHeaderBytes + static_cast<std::uintmax_t>(patches) * rows * cols * dim * 4;
}

void write_bag(const TokenBag& bag, const fs::path& path) {
  bag.validate();
  const GridTokens& g0 = bag.grids.front();
  std::string out;
  out.reserve(bag_file_size(bag.num_patches(), g0.rows, g0.cols, g0.dim));
  out.append(kBagMagic, 4);
  put_u32(out, kBagFormatVersion);
  put_u32(out, checked_u32(bag.num_patches(), "patch count"));
  put_u32(out, checked_u32(g0.rows, "rows"));
  put_u32(out, checked_u32(g0.cols, "cols"));
  put_u32(out, checked_u32(g0.dim, "dim"));
  std::size_t index = 0;
  for (const auto& g : bag.grids) {
    for (float v : g.values) {
      if (!std::isfinite(v)) {
        throw NumericError("bag '" + bag.patient_id + "': non-finite value at index " +
                           std::to_string(index));
      }
      put_f32(out, v);
      ++index;
    }
  }
  write_file(path, out);
}

TokenBag read_bag(const fs::path& path, std::string patient_id, int label) {
  const std::string bytes = read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::string who = path.string();
  if (bytes.size() < kBagHeaderBytes) {
    throw FormatError(who + ": file is " + std::to_string(bytes.size()) +
                      " bytes, shorter than the " + std::to_string(kBagHeaderBytes) +
                      "-byte header");
  }
  if (std::memcmp(p, kBagMagic, 4) != 0) throw FormatError(who + ": bad magic, expected RAAB");
  const std::uint32_t version = get_u32(p + 4);
  if (version != kBagFormatVersion) {
    throw FormatError(who + ": unsupported version " + std::to_string(version));
  }
  const std::size_t patches = get_u32(p + 8);
  const std::size_t rows = get_u32(p + 12);
  const std::size_t cols = get_u32(p + 16);
  const std::size_t dim = get_u32(p + 20);
  if (patches == 0 || rows == 0 || cols == 0 || dim == 0) {
    throw FormatError(who + ": header has a zero dimension");
  }
  const std::uintmax_t expected = bag_file_size(patches, rows, cols, dim);
  if (bytes.size() != expected) {
    throw FormatError(who + ": expected " + std::to_string(expected) + " bytes for P=" +
                      std::to_string(patches) + " R=" + std::to_string(rows) + " C=" +
                      std::to_string(cols) + " D=" + std::to_string(dim) + ", got " +
                      std::to_string(bytes.size()));
  }
  TokenBag bag;
  bag.patient_id = std::move(patient_id);
  bag.label = label;
  bag.grids.resize(patches);
  const std::size_t per_patch = rows * cols * dim;
  const unsigned char* payload = p + kBagHeaderBytes;
  for (std::size_t k = 0; k < patches; ++k) {
    GridTokens& g = bag.grids[k];
    g.rows = rows;
    g.cols = cols;
    g.dim = dim;
    g.values.resize(per_patch);
    for (std::size_t i = 0; i < per_patch; ++i) {
      const std::size_t flat = k * per_patch + i;
      const float v = std::bit_cast<float>(get_u32(payload + 4 * flat));
      if (!std::isfinite(v)) {
        throw FormatError(who + ": non-finite value at index " + std::to_string(flat));
      }
      g.values[i] = v;
    }
  }
  return bag;
}

// --- manifest ----------------------------------------------------------------

json DatasetManifest::to_json() const {
  json patients_json = json::array();
  for (const auto& e : patients) {
    patients_json.push_back(
        {{"id", e.patient_id}, {"label", e.label}, {"path", e.path}, {"patches", e.patches}});
  }
  return {{"version", version},
          {"class_names", class_names},
          {"grid", {{"rows", rows}, {"cols", cols}, {"dim", dim}}},
          {"patients", patients_json}};
}

DatasetManifest DatasetManifest::from_json(const json& j, fs::path base) {
  DatasetManifest m;
  m.base_dir = std::move(base);
  m.version = j.at("version").get<int>();
  if (m.version != 1) throw FormatError("unsupported manifest version " + std::to_string(m.version));
  m.class_names = j.at("class_names").get<std::vector<std::string>>();
  if (m.class_names.size() != kNumClasses ||
      !std::equal(m.class_names.begin(), m.class_names.end(), kClassNames.begin())) {
    throw FormatError("manifest class_names must be [Healthy, Benign, OPMD, OSCC]");
  }
  const json& grid = j.at("grid");
  m.rows = grid.at("rows").get<std::size_t>();
  m.cols = grid.at("cols").get<std::size_t>();
  m.dim = grid.at("dim").get<std::size_t>();
  for (const auto& e : j.at("patients")) {
    m.patients.push_back({e.at("id").get<std::string>(), e.at("label").get<int>(),
                          e.at("path").get<std::string>(), e.at("patches").get<std::size_t>()});
  }
  return m;
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
    return from_json(j, path.parent_path());
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void DatasetManifest::save(const fs::path& path) const {
  write_file(path, to_json().dump(2) + "\n");
}

fs::path DatasetManifest::resolve(const ManifestEntry& entry) const {
  const fs::path p(entry.path);
  return p.is_absolute() ? p : base_dir / p;
}

const ManifestEntry& DatasetManifest::find(const std::string& patient_id) const {
  const auto it = std::find_if(patients.begin(), patients.end(),
                               [&](const ManifestEntry& e) { return e.patient_id == patient_id; });
  if (it == patients.end()) throw Error("patient '" + patient_id + "' not in manifest");
  return *it;
}

TokenBag DatasetManifest::load_bag(const ManifestEntry& entry) const {
  check_label(entry.label, "patient '" + entry.patient_id + "'");
  TokenBag bag = read_bag(resolve(entry), entry.patient_id, entry.label);
  const GridTokens& g = bag.grids.front();
  if (g.rows != rows || g.cols != cols || g.dim != dim) {
    throw Error("patient '" + entry.patient_id + "': token grid " + std::to_string(g.rows) + "x" +
                std::to_string(g.cols) + "x" + std::to_string(g.dim) +
                " differs from manifest " + std::to_string(rows) + "x" + std::to_string(cols) +
                "x" + std::to_string(dim));
  }
  return bag;
}

void DatasetManifest::merge_fragment(const json& fragment, const fs::path& fragment_dir) {
  for (const auto& e : fragment.at("patients")) {
    fs::path p(e.at("path").get<std::string>());
    if (!p.is_absolute()) p = fragment_dir / p;
    std::error_code ec;
    const fs::path rel = fs::relative(p, base_dir, ec);
    patients.push_back({e.at("id").get<std::string>(), e.at("label").get<int>(),
                        (ec || rel.empty() ? p : rel).generic_string(),
                        e.at("patches").get<std::size_t>()});
  }
}

// --- synthetic ---------------------------------------------------------------

void SynthConfig::validate() const {
  if (patients_per_class == 0) throw Error("synth: patients_per_class must be positive");
  if (min_patches == 0 || max_patches < min_patches) {
    throw Error("synth: need 1 <= min_patches <= max_patches");
  }
  if (rows == 0 || cols == 0 || dim == 0) throw Error("synth: grid sizes must be positive");
  if (motif_block == 0 || motif_block > rows || motif_block > cols) {
    throw Error("synth: motif block " + std::to_string(motif_block) + " does not fit a " +
                std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  }
  if (!(noise > 0.0) || !(motif_strength >= 0.0)) {
    throw Error("synth: noise must be positive and motif_strength non-negative");
  }
  if (!(motif_patch_prob >= 0.0 && motif_patch_prob <= 1.0)) {
    throw Error("synth: motif_patch_prob must lie in [0, 1]");
  }
}

json SynthConfig::to_json() const {
  return {{"patients_per_class", patients_per_class},
          {"min_patches", min_patches},
          {"max_patches", max_patches},
          {"rows", rows},
          {"cols", cols},
          {"dim", dim},
          {"motif_block", motif_block},
          {"motif_strength", motif_strength},
          {"noise", noise},
          {"motif_patch_prob", motif_patch_prob},
          {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const json& j) {
  SynthConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "patients_per_class") c.patients_per_class = value.get<std::size_t>();
    else if (key == "min_patches") c.min_patches = value.get<std::size_t>();
    else if (key == "max_patches") c.max_patches = value.get<std::size_t>();
    else if (key == "rows") c.rows = value.get<std::size_t>();
    else if (key == "cols") c.cols = value.get<std::size_t>();
    else if (key == "dim") c.dim = value.get<std::size_t>();
    else if (key == "motif_block") c.motif_block = value.get<std::size_t>();
    else if (key == "motif_strength") c.motif_strength = value.get<double>();
    else if (key == "noise") c.noise = value.get<double>();
    else if (key == "motif_patch_prob") c.motif_patch_prob = value.get<double>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else throw Error("synth: unknown config key '" + key + "'");
  }
  return c;
}

namespace {

// Orthonormal class directions (Gram-Schmidt on Gaussian draws). With fewer
// dimensions than classes the later directions are only normalized.
std::vector<std::vector<double>> class_directions(std::size_t dim, Rng& rng) {
  std::vector<std::vector<double>> dirs;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.normal();
    if (c < dim) {
      for (const auto& u : dirs) {
        double dot = 0.0;
        for (std::size_t i = 0; i < dim; ++i) dot += v[i] * u[i];
        for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * u[i];
      }
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    dirs.push_back(std::move(v));
  }
  return dirs;
}

std::string synth_id(std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "syn-%04zu", n);
  return buf;
}

}  // namespace

DatasetManifest generate_synthetic_dataset(const SynthConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  Rng rng(cfg.seed, Stream::kSynth);
  const auto dirs = class_directions(cfg.dim, rng);

  DatasetManifest manifest;
  manifest.rows = cfg.rows;
  manifest.cols = cfg.cols;
  manifest.dim = cfg.dim;
  manifest.base_dir = out_dir;
  fs::create_directories(out_dir / "bags");

  const std::size_t span_r = cfg.rows - cfg.motif_block + 1;
  const std::size_t span_c = cfg.cols - cfg.motif_block + 1;
  std::size_t serial = 0;
  for (std::size_t label = 0; label < kNumClasses; ++label) {
    for (std::size_t n = 0; n < cfg.patients_per_class; ++n) {
      TokenBag bag;
      bag.patient_id = synth_id(++serial);
      bag.label = static_cast<int>(label);
      const std::size_t patches =
          cfg.min_patches + rng.below(cfg.max_patches - cfg.min_patches + 1);
      std::vector<bool> has_motif(patches);
      bool any = false;
      for (std::size_t p = 0; p < patches; ++p) {
        has_motif[p] = rng.uniform() < cfg.motif_patch_prob;
        any = any || has_motif[p];
      }
      if (!any) has_motif[rng.below(patches)] = true;

      for (std::size_t p = 0; p < patches; ++p) {
        GridTokens g{cfg.rows, cfg.cols, cfg.dim, {}};
        g.values.resize(cfg.rows * cfg.cols * cfg.dim);
        for (auto& v : g.values) v = static_cast<float>(cfg.noise * rng.normal());
        if (has_motif[p]) {
          const std::size_t r0 = rng.below(span_r);
          const std::size_t c0 = rng.below(span_c);
          for (std::size_t r = r0; r < r0 + cfg.motif_block; ++r) {
            for (std::size_t c = c0; c < c0 + cfg.motif_block; ++c) {
              float* tok = g.values.data() + (r * cfg.cols + c) * cfg.dim;
              for (std::size_t d = 0; d < cfg.dim; ++d) {
                tok[d] = static_cast<float>(tok[d] + cfg.motif_strength * dirs[label][d]);
              }
            }
          }
        }
        bag.grids.push_back(std::move(g));
      }
      const std::string rel = "bags/" + bag.patient_id + ".raab";
      write_bag(bag, out_dir / rel);
      manifest.patients.push_back({bag.patient_id, bag.label, rel, patches});
    }
  }
  manifest.save(out_dir / "manifest.json");
  return manifest;
}

// --- folds -------------------------------------------------------------------

std::vector<std::string> FoldPlan::members(std::size_t fold) const {
  std::vector<std::string> out;
  for (const auto& [id, f] : assignment) {
    if (f == fold) out.push_back(id);
  }
  return out;
}

std::vector<std::string> FoldPlan::complement(std::size_t fold) const {
  std::vector<std::string> out;
  for (const auto& [id, f] : assignment) {
    if (f != fold) out.push_back(id);
  }
  return out;
}

json FoldPlan::to_json() const {
  return {{"k", k}, {"seed", seed}, {"assignment", assignment}, {"test_ids", test_ids}};
}

FoldPlan FoldPlan::from_json(const json& j) {
  FoldPlan p;
  p.k = j.at("k").get<std::size_t>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.assignment = j.at("assignment").get<std::map<std::string, std::size_t>>();
  if (j.contains("test_ids")) p.test_ids = j.at("test_ids").get<std::vector<std::string>>();
  for (const auto& [id, f] : p.assignment) {
    if (f >= p.k) throw FormatError("fold plan assigns '" + id + "' to fold " + std::to_string(f));
  }
  return p;
}

void FoldPlan::save(const fs::path& path) const { write_file(path, to_json().dump(2) + "\n"); }

FoldPlan FoldPlan::load(const fs::path& path) {
  try {
    return from_json(json::parse(read_file(path)));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<std::size_t> stratified_fold_assignment(const std::vector<int>& labels, std::size_t k,
                                                    std::uint64_t seed) {
  if (k < 2) throw Error("stratified k-fold needs k >= 2, got " + std::to_string(k));
  if (labels.empty()) throw Error("stratified k-fold on an empty label list");
  int max_label = 0;
  for (int l : labels) {
    if (l < 0) throw Error("negative class label " + std::to_string(l));
    max_label = std::max(max_label, l);
  }
  Rng rng(seed, Stream::kSplits);
  std::vector<std::size_t> fold(labels.size());
  for (int c = 0; c <= max_label; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) members.push_back(i);
    }
    rng.shuffle(members);
    const std::size_t start = static_cast<std::size_t>(c) % k;
    for (std::size_t n = 0; n < members.size(); ++n) fold[members[n]] = (start + n) % k;
  }
  return fold;
}

FoldPlan stratified_kfold(std::vector<std::pair<std::string, int>> labeled, std::size_t k,
                          std::uint64_t seed) {
  std::sort(labeled.begin(), labeled.end());
  for (std::size_t i = 1; i < labeled.size(); ++i) {
    if (labeled[i].first == labeled[i - 1].first) {
      throw Error("duplicate patient id '" + labeled[i].first + "'");
    }
  }
  std::vector<int> labels;
  for (const auto& [id, label] : labeled) labels.push_back(label);
  const auto fold = stratified_fold_assignment(labels, k, seed);
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  for (std::size_t i = 0; i < labeled.size(); ++i) plan.assignment[labeled[i].first] = fold[i];
  return plan;
}

std::vector<std::string> stratified_holdout(std::vector<std::pair<std::string, int>> labeled,
                                            double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw Error("hold-out fraction must lie in [0, 1)");
  std::sort(labeled.begin(), labeled.end());
  Rng rng(seed, Stream::kSplits, 1);
  std::map<int, std::vector<std::string>> by_class;
  for (const auto& [id, label] : labeled) by_class[label].push_back(id);
  std::vector<std::string> out;
  for (auto& [label, ids] : by_class) {
    rng.shuffle(ids);
    const auto take = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(ids.size())));
    out.insert(out.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(out.begin(), out.end());
  return out;
}

// --- validation --------------------------------------------------------------

json ValidationReport::to_json() const {
  json entries_json = json::array();
  for (const auto& e : entries) {
    entries_json.push_back({{"id", e.patient_id}, {"ok", e.ok}, {"message", e.message}});
  }
  return {{"ok", ok}, {"errors", errors}, {"patients", entries_json}};
}

ValidationReport validate_manifest(const DatasetManifest& m) {
  ValidationReport report;
  std::set<std::string> seen;
  for (const auto& e : m.patients) {
    ValidationEntry entry{e.patient_id, true, "ok"};
    auto fail = [&](std::string msg) {
      entry.ok = false;
      entry.message = std::move(msg);
    };
    if (!seen.insert(e.patient_id).second) {
      fail("duplicate patient id");
    } else if (e.label < 0 || e.label >= static_cast<int>(kNumClasses)) {
      fail("label " + std::to_string(e.label) + " outside 0.." + std::to_string(kNumClasses - 1));
    } else if (const fs::path p = m.resolve(e); !fs::exists(p)) {
      fail("missing token file " + p.string());
    } else {
      try {
        const TokenBag bag = read_bag(p, e.patient_id, e.label);
        const GridTokens& g = bag.grids.front();
        if (g.dim != m.dim) {
          fail("patient '" + e.patient_id + "': token dim " + std::to_string(g.dim) +
               " != manifest dim " + std::to_string(m.dim));
        } else if (g.rows != m.rows || g.cols != m.cols) {
          fail("patient '" + e.patient_id + "': grid " + std::to_string(g.rows) + "x" +
               std::to_string(g.cols) + " != manifest grid " + std::to_string(m.rows) + "x" +
               std::to_string(m.cols));
        } else if (bag.num_patches() != e.patches) {
          fail("patient '" + e.patient_id + "': file has " + std::to_string(bag.num_patches()) +
               " patches, manifest says " + std::to_string(e.patches));
        }
      } catch (const std::exception& ex) {
        fail(ex.what());
      }
    }
    report.ok = report.ok && entry.ok;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

ValidationReport validate_manifest(const fs::path& manifest_path) {
  try {
    return validate_manifest(DatasetManifest::load(manifest_path));
  } catch (const std::exception& e) {
    ValidationReport report;
    report.ok = false;
    report.errors.push_back(e.what());
    return report;
  }
}

}  // namespace raamil
