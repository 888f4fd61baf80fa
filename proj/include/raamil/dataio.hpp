#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "raamil/tensor.hpp"

namespace raamil {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr std::size_t kNumClasses = 4;
inline constexpr std::array<std::string_view, kNumClasses> kClassNames{"Healthy", "Benign", "OPMD",
                                                                      "OSCC"};

/// One patch: a rows x cols grid of dim-dimensional tokens, stored as the
/// 32-bit floats they were cached as. Layout is [row][col][dim].
struct GridTokens {
  std::size_t rows = 14;
  std::size_t cols = 14;
  std::size_t dim = 384;
  std::vector<float> values;

  std::size_t num_tokens() const noexcept { return rows * cols; }
  /// (rows*cols) x dim, upcast to double.
  Tensor to_tensor() const;
  void validate() const;
};

/// One patient: the MIL bag.
struct TokenBag {
  std::string patient_id;
  int label = 0;
  std::vector<GridTokens> grids;

  std::size_t num_patches() const noexcept { return grids.size(); }
  std::size_t num_tokens() const noexcept;
  std::size_t dim() const noexcept { return grids.empty() ? 0 : grids.front().dim; }
  /// All tokens of all patches stacked patch-major: M x D with M = P * rows * cols.
  Tensor tokens() const;
  void validate() const;
};

// --- RAAB token files --------------------------------------------------------
//
//   "RAAB" | u32 version=1 | u32 P | u32 R | u32 C | u32 D | P*R*C*D f32
//
// All integers and floats little-endian; payload order [patch][row][col][dim].

inline constexpr std::uint32_t kBagFormatVersion = 1;
inline constexpr std::size_t kBagHeaderBytes = 24;

std::uintmax_t bag_file_size(std::size_t patches, std::size_t rows, std::size_t cols,
                             std::size_t dim);
void write_bag(const TokenBag& bag, const fs::path& path);
/// The file carries tokens only; identity comes from the manifest.
TokenBag read_bag(const fs::path& path, std::string patient_id, int label);

// --- manifest ----------------------------------------------------------------

struct ManifestEntry {
  std::string patient_id;
  int label = 0;
  std::string path;  // relative to the manifest directory unless absolute
  std::size_t patches = 0;
};

struct DatasetManifest {
  int version = 1;
  std::vector<std::string> class_names{kClassNames.begin(), kClassNames.end()};
  std::size_t rows = 14;
  std::size_t cols = 14;
  std::size_t dim = 384;
  std::vector<ManifestEntry> patients;
  fs::path base_dir;

  static DatasetManifest load(const fs::path& path);
  void save(const fs::path& path) const;
  json to_json() const;
  static DatasetManifest from_json(const json& j, fs::path base_dir);

  fs::path resolve(const ManifestEntry& entry) const;
  const ManifestEntry& find(const std::string& patient_id) const;
  TokenBag load_bag(const ManifestEntry& entry) const;
  /// Appends the entries of a featurizer manifest fragment.
  void merge_fragment(const json& fragment, const fs::path& fragment_dir);
};

// --- synthetic data ----------------------------------------------------------

struct SynthConfig {
  std::size_t patients_per_class = 50;
  std::size_t min_patches = 1;
  std::size_t max_patches = 3;
  std::size_t rows = 14;
  std::size_t cols = 14;
  std::size_t dim = 32;
  std::size_t motif_block = 3;
  double motif_strength = 2.0;
  double noise = 1.0;
  /// Probability that a given patch carries the motif; each bag gets at least one.
  double motif_patch_prob = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  json to_json() const;
  static SynthConfig from_json(const json& j);
};

/// Writes `out_dir/manifest.json` and `out_dir/bags/<id>.raab`.
///
/// Background tokens are i.i.d. N(0, noise^2). Every bag of class c carries,
/// in a random subset of its patches, one motif_block x motif_block block of
/// contiguous tokens shifted by motif_strength along a class-specific unit
/// direction. A single token is only weakly separable from background; the
/// block as a whole is not, which is what neighborhood aggregation exploits.
DatasetManifest generate_synthetic_dataset(const SynthConfig& cfg, const fs::path& out_dir);

// --- fold planning -----------------------------------------------------------

struct FoldPlan {
  std::size_t k = 5;
  std::uint64_t seed = 0;
  std::map<std::string, std::size_t> assignment;
  std::vector<std::string> test_ids;

  std::vector<std::string> members(std::size_t fold) const;
  std::vector<std::string> complement(std::size_t fold) const;
  json to_json() const;
  static FoldPlan from_json(const json& j);
  void save(const fs::path& path) const;
  static FoldPlan load(const fs::path& path);
};

/// Fold index per position of `labels`. Per class, members are shuffled with
/// the seeded split stream and dealt round-robin starting at fold
/// (class mod k); per-fold class counts are floor or ceil of n_c / k.
std::vector<std::size_t> stratified_fold_assignment(const std::vector<int>& labels, std::size_t k,
                                                    std::uint64_t seed);

/// Same, keyed by patient id. Ids are sorted before shuffling so the plan does
/// not depend on input order.
FoldPlan stratified_kfold(std::vector<std::pair<std::string, int>> labeled, std::size_t k,
                          std::uint64_t seed);

/// Stratified hold-out: round(fraction * n_c) patients of each class, sorted.
std::vector<std::string> stratified_holdout(std::vector<std::pair<std::string, int>> labeled,
                                            double fraction, std::uint64_t seed);

// --- validation --------------------------------------------------------------

struct ValidationEntry {
  std::string patient_id;
  bool ok = true;
  std::string message;
};

struct ValidationReport {
  bool ok = true;
  std::vector<std::string> errors;  // manifest-level
  std::vector<ValidationEntry> entries;

  json to_json() const;
};

ValidationReport validate_manifest(const fs::path& manifest_path);
ValidationReport validate_manifest(const DatasetManifest& manifest);

}  // namespace raamil
