#pragma once

// Gated attention MIL pooling and the patient-level classifier.
//
//   a = tanh(W_a x),  b = sigmoid(W_b x),  u = W_c^T (a * b)
//   w = softmax(u) over every token of every patch,  m = sum_i w_i x_i
//   logits = Phi(m),  Phi = Linear(D, H) -> relu -> Linear(H, 4)

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "raamil/dataio.hpp"
#include "raamil/graph.hpp"
#include "raamil/raa.hpp"
#include "raamil/rng.hpp"

namespace raamil {

using ProbVector = std::array<double, kNumClasses>;

struct MilConfig {
  std::size_t attention_hidden = 128;
  std::size_t classifier_hidden = 128;
  /// Applied to the bag embedding during training only.
  double dropout = 0.25;

  void validate() const;
};

struct MilParams {
  MilConfig config;
  Tensor w_a;     // L x D
  Tensor w_b;     // L x D
  Tensor w_c;     // L x 1
  Tensor phi_w1;  // D x H
  Tensor phi_b1;  // 1 x H
  Tensor phi_w2;  // H x 4
  Tensor phi_b2;  // 1 x 4

  static MilParams init(const MilConfig& config, std::size_t dim, Rng& rng);
  std::size_t dim() const noexcept { return w_a.cols(); }

  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn);
};

struct MilParamNodes {
  NodeId w_a, w_b, w_c, phi_w1, phi_b1, phi_w2, phi_b2;
};

struct MilNodes {
  NodeId scores;     // M x 1, u
  NodeId weights;    // 1 x M, w
  NodeId embedding;  // 1 x D, m
  NodeId logits;     // 1 x 4
  NodeId probs;      // 1 x 4
};

MilParamNodes add_mil_parameters(Graph& g, const MilParams& params);
/// Attention scores u; softmax them for weights.
NodeId add_gated_attention_scores(Graph& g, NodeId tokens, const MilParamNodes& p);
NodeId add_classifier_logits(Graph& g, NodeId embedding, const MilParamNodes& p);
/// `dropout_mask`, when given, is a 1 x D constant multiplied into m.
MilNodes add_mil(Graph& g, NodeId tokens, const MilParamNodes& p,
                 std::optional<NodeId> dropout_mask = std::nullopt);

struct BagForward {
  std::vector<double> weights;    // M, simplex
  std::vector<double> embedding;  // D
  std::array<double, kNumClasses> logits{};
  ProbVector probs{};
};

struct Classification {
  std::array<double, kNumClasses> logits{};
  ProbVector probs{};
};

/// Instance weights for an M x D token matrix.
std::vector<double> gated_attention_weights(const Tensor& tokens, const MilParams& params);
/// m = sum_i w_i x_i.
std::vector<double> pool_bag(const Tensor& tokens, std::span<const double> weights);
Classification classify(std::span<const double> embedding, const MilParams& params);

// --- full model ----------------------------------------------------------------

struct ModelConfig {
  bool raa_enabled = true;
  RaaConfig raa;
  MilConfig mil;
};

struct Model {
  ModelConfig config;
  std::size_t dim = 0;
  std::optional<RaaParams> raa;
  MilParams mil;

  /// RAA and MIL weights come from separate sub-streams of the init stream, so
  /// the MIL initialization is the same whether or not RAA is enabled.
  static Model init(const ModelConfig& config, std::size_t dim, std::uint64_t seed,
                    std::uint64_t stream = 0);

  NamedTensors parameters() const;
  void assign(const NamedTensors& values);
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
};

struct BagGraph {
  Graph graph;
  NodeId tokens = 0;
  std::optional<RaaNodes> raa;
  MilNodes mil{};
};

/// Graph for a bag of `patches` grids of rows x cols tokens. Bind the M x D
/// token matrix to input "tokens".
BagGraph build_bag_graph(const Model& model, std::size_t patches, std::size_t rows,
                         std::size_t cols, const Tensor* dropout_mask = nullptr);

/// Inference forward pass (no dropout). `raa == nullptr` is the vanilla model.
BagForward forward_bag(const TokenBag& bag, const RaaParams* raa, const MilParams& mil);
BagForward forward_bag(const TokenBag& bag, const Model& model);

// --- checkpoints ---------------------------------------------------------------
//
//   "RAAC" | u32 version=1 | u32 n | n bytes JSON header | f64 payloads
//
// The JSON header holds {"model": ..., "params": [{"name", "shape"}], "meta": ...};
// payloads are little-endian doubles, concatenated in table order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  json meta;
};

json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const json& j);

void save_checkpoint(const Model& model, const json& meta, const fs::path& path);
Checkpoint load_checkpoint(const fs::path& path);

}  // namespace raamil
