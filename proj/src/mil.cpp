#include "raamil/mil.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace raamil {

namespace {

Tensor uniform_init(Rng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in) {
  Tensor t = Tensor::matrix(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.storage()) v = rng.uniform(-bound, bound);
  return t;
}

template <typename T>
std::array<double, kNumClasses> to_class_array(const T& t) {
  std::array<double, kNumClasses> out{};
  for (std::size_t c = 0; c < kNumClasses; ++c) out[c] = t[c];
  return out;
}

}  // namespace

void MilConfig::validate() const {
  if (attention_hidden == 0 || classifier_hidden == 0) {
    throw Error("MIL hidden sizes must be positive");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("dropout must lie in [0, 1)");
}

MilParams MilParams::init(const MilConfig& config, std::size_t dim, Rng& rng) {
  config.validate();
  if (dim == 0) throw Error("token dimension must be positive");
  MilParams p;
  p.config = config;
  const std::size_t L = config.attention_hidden;
  const std::size_t H = config.classifier_hidden;
  p.w_a = uniform_init(rng, L, dim, dim);
  p.w_b = uniform_init(rng, L, dim, dim);
  p.w_c = uniform_init(rng, L, 1, L);
  p.phi_w1 = uniform_init(rng, dim, H, dim);
  p.phi_b1 = Tensor::matrix(1, H);
  p.phi_w2 = uniform_init(rng, H, kNumClasses, H);
  p.phi_b2 = Tensor::matrix(1, kNumClasses);
  return p;
}

template <typename Self, typename Fn>
void MilParams::visit(Self& self, Fn&& fn) {
  fn("mil.w_a", self.w_a);
  fn("mil.w_b", self.w_b);
  fn("mil.w_c", self.w_c);
  fn("mil.phi.w1", self.phi_w1);
  fn("mil.phi.b1", self.phi_b1);
  fn("mil.phi.w2", self.phi_w2);
  fn("mil.phi.b2", self.phi_b2);
}

void MilParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit(*this, fn);
}

void MilParams::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit(*this, fn);
}

MilParamNodes add_mil_parameters(Graph& g, const MilParams& params) {
  MilParamNodes p{};
  p.w_a = g.parameter("mil.w_a", params.w_a);
  p.w_b = g.parameter("mil.w_b", params.w_b);
  p.w_c = g.parameter("mil.w_c", params.w_c);
  p.phi_w1 = g.parameter("mil.phi.w1", params.phi_w1);
  p.phi_b1 = g.parameter("mil.phi.b1", params.phi_b1);
  p.phi_w2 = g.parameter("mil.phi.w2", params.phi_w2);
  p.phi_b2 = g.parameter("mil.phi.b2", params.phi_b2);
  return p;
}

NodeId add_gated_attention_scores(Graph& g, NodeId tokens, const MilParamNodes& p) {
  const NodeId a = g.tanh(g.matmul(tokens, p.w_a, false, true));
  const NodeId b = g.sigmoid(g.matmul(tokens, p.w_b, false, true));
  return g.matmul(g.mul(a, b), p.w_c);
}

NodeId add_classifier_logits(Graph& g, NodeId embedding, const MilParamNodes& p) {
  const NodeId h = g.relu(g.add(g.matmul(embedding, p.phi_w1), p.phi_b1));
  return g.add(g.matmul(h, p.phi_w2), p.phi_b2);
}

MilNodes add_mil(Graph& g, NodeId tokens, const MilParamNodes& p,
                 std::optional<NodeId> dropout_mask) {
  MilNodes n{};
  n.scores = add_gated_attention_scores(g, tokens, p);
  // Transpose u to a 1 x M row so the softmax runs over the whole bag.
  n.weights = g.softmax_rows(g.matmul(g.constant(Tensor::scalar(1.0)), n.scores, false, true));
  n.embedding = g.matmul(n.weights, tokens);
  const NodeId pooled = dropout_mask ? g.mul(n.embedding, *dropout_mask) : n.embedding;
  n.logits = add_classifier_logits(g, pooled, p);
  n.probs = g.softmax_rows(n.logits);
  return n;
}

std::vector<double> gated_attention_weights(const Tensor& tokens, const MilParams& params) {
  if (tokens.rows() == 0) throw ShapeError("attention over an empty bag");
  if (tokens.cols() != params.dim()) {
    throw ShapeError("token dim " + std::to_string(tokens.cols()) + " != MIL dim " +
                     std::to_string(params.dim()));
  }
  Graph g;
  const auto p = add_mil_parameters(g, params);
  const NodeId x = g.input("x");
  g.mark_output("w", g.softmax_rows(g.matmul(g.constant(Tensor::scalar(1.0)),
                                             add_gated_attention_scores(g, x, p), false, true)));
  const Tensor w = g.forward({{"x", tokens}}).at("w");
  return {w.storage().begin(), w.storage().end()};
}

std::vector<double> pool_bag(const Tensor& tokens, std::span<const double> weights) {
  if (weights.size() != tokens.rows()) {
    throw ShapeError("pooling " + std::to_string(tokens.rows()) + " tokens with " +
                     std::to_string(weights.size()) + " weights");
  }
  Graph g;
  g.mark_output("m", g.matmul(g.input("w"), g.input("x")));
  Tensor w(Shape{1, weights.size()}, std::vector<double>(weights.begin(), weights.end()));
  const Tensor m = g.forward({{"w", w}, {"x", tokens}}).at("m");
  return {m.storage().begin(), m.storage().end()};
}

Classification classify(std::span<const double> embedding, const MilParams& params) {
  if (embedding.size() != params.dim()) {
    throw ShapeError("embedding length " + std::to_string(embedding.size()) + " != MIL dim " +
                     std::to_string(params.dim()));
  }
  Graph g;
  const auto p = add_mil_parameters(g, params);
  const NodeId logits = add_classifier_logits(g, g.input("m"), p);
  g.mark_output("logits", logits);
  g.mark_output("probs", g.softmax_rows(logits));
  Tensor m(Shape{1, embedding.size()}, std::vector<double>(embedding.begin(), embedding.end()));
  const auto out = g.forward({{"m", m}});
  return {to_class_array(out.at("logits")), to_class_array(out.at("probs"))};
}

// --- model -------------------------------------------------------------------

Model Model::init(const ModelConfig& config, std::size_t dim, std::uint64_t seed,
                  std::uint64_t stream) {
  Model m;
  m.config = config;
  m.dim = dim;
  Rng mil_rng(seed, Stream::kInit, 2 * stream);
  m.mil = MilParams::init(config.mil, dim, mil_rng);
  if (config.raa_enabled) {
    Rng raa_rng(seed, Stream::kInit, 2 * stream + 1);
    m.raa = RaaParams::init(config.raa, dim, raa_rng);
  }
  return m;
}

void Model::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  if (raa) raa->for_each(fn);
  mil.for_each(fn);
}

NamedTensors Model::parameters() const {
  NamedTensors out;
  auto put = [&](const std::string& name, const Tensor& t) { out.emplace(name, t); };
  if (raa) raa->for_each(put);
  mil.for_each(put);
  return out;
}

void Model::assign(const NamedTensors& values) {
  for_each([&](const std::string& name, Tensor& t) {
    const auto it = values.find(name);
    if (it == values.end()) throw Error("missing parameter '" + name + "'");
    if (it->second.numel() != t.numel()) {
      throw ShapeError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                       ", expected " + shape_str(t.shape()));
    }
    t = it->second.reshaped(t.shape());
  });
}

BagGraph build_bag_graph(const Model& model, std::size_t patches, std::size_t rows,
                         std::size_t cols, const Tensor* dropout_mask) {
  BagGraph bg;
  Graph& g = bg.graph;
  bg.tokens = g.input("tokens");
  NodeId tokens = bg.tokens;
  if (model.raa) {
    const auto index = NeighborhoodIndex::build(rows, cols, model.raa->config.k,
                                                model.raa->config.include_self);
    bg.raa = add_raa(g, tokens, add_raa_parameters(g, *model.raa),
                     BagNeighborhood::tile(index, patches));
    tokens = bg.raa->refined;
  }
  std::optional<NodeId> mask;
  if (dropout_mask) mask = g.constant(*dropout_mask);
  bg.mil = add_mil(g, tokens, add_mil_parameters(g, model.mil), mask);
  g.mark_output("weights", bg.mil.weights);
  g.mark_output("embedding", bg.mil.embedding);
  g.mark_output("logits", bg.mil.logits);
  g.mark_output("probs", bg.mil.probs);
  return bg;
}

BagForward forward_bag(const TokenBag& bag, const Model& model) {
  bag.validate();
  if (bag.dim() != model.dim) {
    throw ShapeError("bag '" + bag.patient_id + "' has token dim " + std::to_string(bag.dim()) +
                     ", model expects " + std::to_string(model.dim));
  }
  const GridTokens& g0 = bag.grids.front();
  BagGraph bg = build_bag_graph(model, bag.num_patches(), g0.rows, g0.cols);
  const auto out = bg.graph.forward({{"tokens", bag.tokens()}});
  BagForward f;
  f.weights = out.at("weights").storage();
  f.embedding = out.at("embedding").storage();
  f.logits = to_class_array(out.at("logits"));
  f.probs = to_class_array(out.at("probs"));
  return f;
}

BagForward forward_bag(const TokenBag& bag, const RaaParams* raa, const MilParams& mil) {
  Model m;
  m.config.raa_enabled = raa != nullptr;
  m.config.mil = mil.config;
  m.dim = mil.dim();
  m.mil = mil;
  if (raa) {
    m.config.raa = raa->config;
    m.raa = *raa;
  }
  return forward_bag(bag, m);
}

// --- checkpoints ---------------------------------------------------------------

json model_config_to_json(const ModelConfig& c) {
  return {{"raa_enabled", c.raa_enabled},
          {"raa_k", c.raa.k},
          {"raa_hidden", c.raa.hidden},
          {"raa_include_self", c.raa.include_self},
          {"raa_ln_affine", c.raa.ln_affine},
          {"attention_hidden", c.mil.attention_hidden},
          {"classifier_hidden", c.mil.classifier_hidden},
          {"dropout", c.mil.dropout}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.raa_enabled = j.at("raa_enabled").get<bool>();
  c.raa.k = j.at("raa_k").get<std::size_t>();
  c.raa.hidden = j.at("raa_hidden").get<std::size_t>();
  c.raa.include_self = j.at("raa_include_self").get<bool>();
  c.raa.ln_affine = j.at("raa_ln_affine").get<bool>();
  c.mil.attention_hidden = j.at("attention_hidden").get<std::size_t>();
  c.mil.classifier_hidden = j.at("classifier_hidden").get<std::size_t>();
  c.mil.dropout = j.at("dropout").get<double>();
  return c;
}

namespace {

constexpr char kCheckpointMagic[4] = {'R', 'A', 'A', 'C'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace

void save_checkpoint(const Model& model, const json& meta, const fs::path& path) {
  const NamedTensors params = model.parameters();
  json table = json::array();
  for (const auto& [name, t] : params) table.push_back({{"name", name}, {"shape", t.shape()}});
  json model_json = model_config_to_json(model.config);
  model_json["dim"] = model.dim;
  const std::string header = json{{"model", model_json}, {"params", table}, {"meta", meta}}.dump();

  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  for (const auto& [name, t] : params) {
    for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write checkpoint " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string bytes = ss.str();
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::string who = path.string();
  if (bytes.size() < 12 || std::memcmp(p, kCheckpointMagic, 4) != 0) {
    throw FormatError(who + ": not a RAAC checkpoint");
  }
  if (get_le(p + 4, 4) != kCheckpointVersion) {
    throw FormatError(who + ": unsupported checkpoint version " + std::to_string(get_le(p + 4, 4)));
  }
  const std::size_t header_len = get_le(p + 8, 4);
  if (12 + header_len > bytes.size()) throw FormatError(who + ": truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(12, header_len));
  } catch (const json::exception& e) {
    throw FormatError(who + ": bad header JSON: " + e.what());
  }

  Checkpoint ck;
  ck.meta = header.value("meta", json::object());
  const ModelConfig config = model_config_from_json(header.at("model"));
  const std::size_t dim = header.at("model").at("dim").get<std::size_t>();
  ck.model = Model::init(config, dim, 0);

  std::size_t offset = 12 + header_len;
  NamedTensors values;
  for (const auto& entry : header.at("params")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const std::size_t n = shape_numel(shape);
    if (offset + 8 * n > bytes.size()) {
      throw FormatError(who + ": payload for '" + name + "' runs past end of file");
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      data[i] = std::bit_cast<double>(get_le(p + offset + 8 * i, 8));
    }
    offset += 8 * n;
    values.emplace(name, Tensor(shape, std::move(data)));
  }
  if (offset != bytes.size()) {
    throw FormatError(who + ": " + std::to_string(bytes.size() - offset) + " trailing bytes");
  }
  if (values.size() != ck.model.parameters().size()) {
    throw FormatError(who + ": parameter table does not match the model configuration");
  }
  ck.model.assign(values);
  return ck;
}

}  // namespace raamil
