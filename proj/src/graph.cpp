#include "raamil/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "raamil/kernels.hpp"

namespace raamil {

std::string_view op_name(OpKind kind) noexcept {
  switch (kind) {
    case OpKind::kInput: return "input";
    case OpKind::kParameter: return "parameter";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kScale: return "scale";
    case OpKind::kMul: return "mul";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kRelu: return "relu";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kPow: return "pow";
    case OpKind::kSoftmaxRows: return "softmax_rows";
    case OpKind::kLogSoftmaxRows: return "log_softmax_rows";
    case OpKind::kSegmentSoftmax: return "segment_softmax";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kRowSum: return "row_sum";
    case OpKind::kRowMean: return "row_mean";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kSegmentSum: return "segment_sum";
  }
  return "?";
}

namespace {

enum class Broadcast { kSame, kScalar, kColumn, kRow };

std::size_t rows_of(const Tensor& t) { return t.rows(); }
std::size_t cols_of(const Tensor& t) { return t.cols(); }

// Index into b for flat element (r, c) of a under the broadcast rule.
inline std::size_t bindex(Broadcast bc, std::size_t r, std::size_t c, std::size_t cols) {
  switch (bc) {
    case Broadcast::kSame: return r * cols + c;
    case Broadcast::kScalar: return 0;
    case Broadcast::kColumn: return r;
    case Broadcast::kRow: return c;
  }
  return 0;
}

std::vector<std::size_t> row_offsets(std::size_t rows, std::size_t cols) {
  std::vector<std::size_t> off(rows + 1);
  for (std::size_t r = 0; r <= rows; ++r) off[r] = r * cols;
  return off;
}

void check_offsets(const std::vector<std::size_t>& off, std::size_t rows, const std::string& who) {
  if (off.size() < 2 || off.front() != 0 || off.back() != rows) {
    throw ShapeError(who + ": segment offsets must start at 0 and end at " +
                     std::to_string(rows));
  }
  for (std::size_t s = 0; s + 1 < off.size(); ++s) {
    if (off[s] > off[s + 1]) throw ShapeError(who + ": segment offsets must be non-decreasing");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// construction

Graph::Node Graph::make_node(OpKind kind, std::vector<NodeId> inputs) {
  Node n;
  n.kind = kind;
  n.inputs = std::move(inputs);
  return n;
}

NodeId Graph::push(Node node) {
  for (NodeId in : node.inputs) {
    if (in >= nodes_.size()) throw ShapeError("graph input id out of range");
    node.needs_grad = node.needs_grad || nodes_[in].needs_grad;
  }
  nodes_.push_back(std::move(node));
  evaluated_ = false;
  has_grads_ = false;
  return nodes_.size() - 1;
}

NodeId Graph::input(std::string name) {
  if (inputs_.contains(name) || params_.contains(name)) {
    throw Error("duplicate graph leaf name '" + name + "'");
  }
  Node n = make_node(OpKind::kInput, {});
  n.name = name;
  const NodeId id = push(std::move(n));
  inputs_.emplace(std::move(name), id);
  return id;
}

NodeId Graph::parameter(std::string name, Tensor value) {
  if (inputs_.contains(name) || params_.contains(name)) {
    throw Error("duplicate graph leaf name '" + name + "'");
  }
  Node n = make_node(OpKind::kParameter, {});
  n.name = name;
  n.value = std::move(value);
  n.needs_grad = true;
  const NodeId id = push(std::move(n));
  params_.emplace(std::move(name), id);
  return id;
}

NodeId Graph::constant(Tensor value) {
  Node n = make_node(OpKind::kConstant, {});
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b) {
  Node n = make_node(OpKind::kMatMul, {a, b});
  n.trans_a = trans_a;
  n.trans_b = trans_b;
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) { return push(make_node(OpKind::kAdd, {a, b})); }
NodeId Graph::sub(NodeId a, NodeId b) { return push(make_node(OpKind::kSub, {a, b})); }
NodeId Graph::mul(NodeId a, NodeId b) { return push(make_node(OpKind::kMul, {a, b})); }

NodeId Graph::scale(NodeId a, double factor) {
  Node n = make_node(OpKind::kScale, {a});
  n.scalar = factor;
  return push(std::move(n));
}

NodeId Graph::tanh(NodeId a) { return push(make_node(OpKind::kTanh, {a})); }
NodeId Graph::sigmoid(NodeId a) { return push(make_node(OpKind::kSigmoid, {a})); }
NodeId Graph::relu(NodeId a) { return push(make_node(OpKind::kRelu, {a})); }
NodeId Graph::exp(NodeId a) { return push(make_node(OpKind::kExp, {a})); }
NodeId Graph::log(NodeId a) { return push(make_node(OpKind::kLog, {a})); }

NodeId Graph::pow(NodeId a, double exponent) {
  Node n = make_node(OpKind::kPow, {a});
  n.scalar = exponent;
  return push(std::move(n));
}

NodeId Graph::softmax_rows(NodeId a) {
  return push(make_node(OpKind::kSoftmaxRows, {a}));
}

NodeId Graph::log_softmax_rows(NodeId a) {
  return push(make_node(OpKind::kLogSoftmaxRows, {a}));
}

NodeId Graph::segment_softmax(NodeId a, IndexList offsets) {
  Node n = make_node(OpKind::kSegmentSoftmax, {a});
  n.index = std::move(offsets);
  return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId x, NodeId scale, NodeId shift, double eps) {
  Node n = make_node(OpKind::kLayerNorm, {x, scale, shift});
  n.scalar = eps;
  return push(std::move(n));
}

NodeId Graph::sum(NodeId a) { return push(make_node(OpKind::kSum, {a})); }
NodeId Graph::mean(NodeId a) { return push(make_node(OpKind::kMean, {a})); }
NodeId Graph::row_sum(NodeId a) { return push(make_node(OpKind::kRowSum, {a})); }
NodeId Graph::row_mean(NodeId a) { return push(make_node(OpKind::kRowMean, {a})); }

NodeId Graph::concat_rows(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows needs at least one input");
  return push(make_node(OpKind::kConcatRows, parts));
}

NodeId Graph::gather_rows(NodeId a, IndexList index) {
  Node n = make_node(OpKind::kGatherRows, {a});
  n.index = std::move(index);
  return push(std::move(n));
}

NodeId Graph::segment_sum(NodeId a, IndexList offsets) {
  Node n = make_node(OpKind::kSegmentSum, {a});
  n.index = std::move(offsets);
  return push(std::move(n));
}

void Graph::mark_output(std::string name, NodeId node) {
  if (node >= nodes_.size()) throw Error("output '" + name + "' refers to unknown node");
  outputs_[std::move(name)] = node;
}

// ---------------------------------------------------------------------------
// accessors

const Tensor& Graph::value(NodeId node) const {
  if (!evaluated_ && nodes_.at(node).kind != OpKind::kParameter &&
      nodes_.at(node).kind != OpKind::kConstant) {
    throw Error("graph value requested before forward()");
  }
  return nodes_.at(node).value;
}

const Tensor& Graph::grad(NodeId node) const {
  if (!has_grads_) throw Error("graph gradient requested before backward()");
  return nodes_.at(node).grad;
}

void Graph::set_parameter(const std::string& name, Tensor value) {
  const auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
  nodes_[it->second].value = std::move(value);
  evaluated_ = false;
  has_grads_ = false;
}

const Tensor& Graph::parameter_value(const std::string& name) const {
  const auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
  return nodes_[it->second].value;
}

NamedTensors Graph::parameters() const {
  NamedTensors out;
  for (const auto& [name, id] : params_) out.emplace(name, nodes_[id].value);
  return out;
}

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> out;
  for (const auto& [name, id] : params_) out.push_back(name);
  return out;
}

std::string Graph::describe(NodeId id) const {
  std::string s = "node #" + std::to_string(id) + " (" + std::string(op_name(nodes_[id].kind));
  if (!nodes_[id].name.empty()) s += " '" + nodes_[id].name + "'";
  return s + ")";
}

// ---------------------------------------------------------------------------
// forward

NamedTensors Graph::forward(const NamedTensors& inputs) {
  evaluated_ = false;
  has_grads_ = false;
  for (const auto& [name, id] : inputs_) {
    const auto it = inputs.find(name);
    if (it == inputs.end()) throw Error("graph input '" + name + "' is not bound");
    nodes_[id].value = it->second;
  }
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    eval(id);
    const std::size_t bad = nodes_[id].value.first_non_finite();
    if (bad != nodes_[id].value.numel()) {
      throw NumericError("non-finite value " + std::to_string(nodes_[id].value[bad]) +
                         " at index " + std::to_string(bad) + " of " + describe(id));
    }
  }
  evaluated_ = true;
  NamedTensors out;
  for (const auto& [name, id] : outputs_) out.emplace(name, nodes_[id].value);
  return out;
}

void Graph::eval(NodeId id) {
  Node& n = nodes_[id];
  auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
  auto fail = [&](const std::string& what) {
    throw ShapeError(describe(id) + ": " + what);
  };

  switch (n.kind) {
    case OpKind::kInput:
    case OpKind::kParameter:
    case OpKind::kConstant:
      return;

    case OpKind::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      kernels::GemmShape s;
      s.trans_a = n.trans_a;
      s.trans_b = n.trans_b;
      s.m = n.trans_a ? cols_of(a) : rows_of(a);
      s.k = n.trans_a ? rows_of(a) : cols_of(a);
      const std::size_t kb = n.trans_b ? cols_of(b) : rows_of(b);
      s.n = n.trans_b ? rows_of(b) : cols_of(b);
      if (s.k != kb) {
        fail("inner dimensions differ: " + shape_str(a.shape()) + (n.trans_a ? "^T" : "") +
             " x " + shape_str(b.shape()) + (n.trans_b ? "^T" : ""));
      }
      n.value = Tensor::matrix(s.m, s.n);
      kernels::gemm(s, a.data(), b.data(), n.value.data(), false);
      return;
    }

    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t r = rows_of(a);
      const std::size_t c = cols_of(a);
      Broadcast bc = Broadcast::kSame;
      if (rows_of(b) == r && cols_of(b) == c) {
        bc = Broadcast::kSame;
      } else if (b.numel() == 1) {
        bc = Broadcast::kScalar;
      } else if (rows_of(b) == r && cols_of(b) == 1) {
        bc = Broadcast::kColumn;
      } else if (rows_of(b) == 1 && cols_of(b) == c) {
        bc = Broadcast::kRow;
      } else {
        fail("operand shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
             " are not compatible");
      }
      n.scalar = static_cast<double>(bc);
      n.value = Tensor(a.shape());
      auto out = n.value.data();
      const auto av = a.data();
      const auto bv = b.data();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const std::size_t f = i * c + j;
          const double y = bv[bindex(bc, i, j, c)];
          out[f] = n.kind == OpKind::kAdd   ? av[f] + y
                   : n.kind == OpKind::kSub ? av[f] - y
                                            : av[f] * y;
        }
      }
      return;
    }

    case OpKind::kScale:
    case OpKind::kTanh:
    case OpKind::kSigmoid:
    case OpKind::kRelu:
    case OpKind::kExp:
    case OpKind::kLog:
    case OpKind::kPow: {
      const Tensor& a = in(0);
      n.value = Tensor(a.shape());
      auto out = n.value.data();
      const auto x = a.data();
      for (std::size_t i = 0; i < x.size(); ++i) {
        switch (n.kind) {
          case OpKind::kScale: out[i] = n.scalar * x[i]; break;
          case OpKind::kTanh: out[i] = std::tanh(x[i]); break;
          case OpKind::kSigmoid: out[i] = 1.0 / (1.0 + std::exp(-x[i])); break;
          case OpKind::kRelu: out[i] = x[i] > 0.0 ? x[i] : 0.0; break;
          case OpKind::kExp: out[i] = std::exp(x[i]); break;
          case OpKind::kLog: out[i] = std::log(x[i]); break;
          case OpKind::kPow: out[i] = n.scalar == 0.0 ? 1.0 : std::pow(x[i], n.scalar); break;
          default: break;
        }
      }
      return;
    }

    case OpKind::kSoftmaxRows: {
      const Tensor& a = in(0);
      if (a.numel() == 0) fail("softmax over empty tensor");
      n.value = Tensor(a.shape());
      const auto off = row_offsets(rows_of(a), cols_of(a));
      kernels::segment_softmax(a.data(), off, n.value.data());
      return;
    }

    case OpKind::kLogSoftmaxRows: {
      const Tensor& a = in(0);
      if (a.numel() == 0) fail("log-softmax over empty tensor");
      n.value = Tensor(a.shape());
      const std::size_t c = cols_of(a);
      for (std::size_t r = 0; r < rows_of(a); ++r) {
        const auto x = a.row(r);
        const double mx = *std::max_element(x.begin(), x.end());
        double s = 0.0;
        for (double v : x) s += std::exp(v - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < c; ++j) n.value.at(r, j) = x[j] - lse;
      }
      return;
    }

    case OpKind::kSegmentSoftmax: {
      const Tensor& a = in(0);
      if (cols_of(a) != 1) fail("segment softmax expects a column, got " + shape_str(a.shape()));
      check_offsets(*n.index, rows_of(a), describe(id));
      for (std::size_t s = 0; s + 1 < n.index->size(); ++s) {
        if ((*n.index)[s] == (*n.index)[s + 1]) fail("empty softmax segment " + std::to_string(s));
      }
      n.value = Tensor(a.shape());
      kernels::segment_softmax(a.data(), *n.index, n.value.data());
      return;
    }

    case OpKind::kLayerNorm: {
      const Tensor& x = in(0);
      const Tensor& g = in(1);
      const Tensor& b = in(2);
      const std::size_t r = rows_of(x);
      const std::size_t c = cols_of(x);
      if (g.numel() != c || b.numel() != c) {
        fail("scale/shift length must equal feature count " + std::to_string(c));
      }
      n.value = Tensor(x.shape());
      n.xhat.assign(x.numel(), 0.0);
      n.inv_std.assign(r, 0.0);
      kernels::layer_norm(x.data(), g.data(), b.data(), r, c, n.scalar, n.value.data(), n.xhat,
                          n.inv_std);
      return;
    }

    case OpKind::kSum:
    case OpKind::kMean: {
      const Tensor& a = in(0);
      double s = 0.0;
      for (double v : a.data()) s += v;
      if (n.kind == OpKind::kMean) {
        if (a.numel() == 0) fail("mean of empty tensor");
        s /= static_cast<double>(a.numel());
      }
      n.value = Tensor::scalar(s);
      return;
    }

    case OpKind::kRowSum:
    case OpKind::kRowMean: {
      const Tensor& a = in(0);
      const std::size_t r = rows_of(a);
      const std::size_t c = cols_of(a);
      if (n.kind == OpKind::kRowMean && c == 0) fail("row mean over zero columns");
      n.value = Tensor::matrix(r, 1);
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (double v : a.row(i)) s += v;
        n.value[i] = n.kind == OpKind::kRowMean ? s / static_cast<double>(c) : s;
      }
      return;
    }

    case OpKind::kConcatRows: {
      const std::size_t c = cols_of(in(0));
      std::size_t total = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        if (cols_of(in(k)) != c) {
          fail("part " + std::to_string(k) + " has " + std::to_string(cols_of(in(k))) +
               " columns, expected " + std::to_string(c));
        }
        total += rows_of(in(k));
      }
      n.value = Tensor::matrix(total, c);
      auto out = n.value.storage().begin();
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        out = std::copy(in(k).storage().begin(), in(k).storage().end(), out);
      }
      return;
    }

    case OpKind::kGatherRows: {
      const Tensor& a = in(0);
      const std::size_t r = rows_of(a);
      for (std::size_t v : *n.index) {
        if (v >= r) fail("gather index " + std::to_string(v) + " out of range " + std::to_string(r));
      }
      n.value = Tensor::matrix(n.index->size(), cols_of(a));
      kernels::gather_rows(a.data(), cols_of(a), *n.index, n.value.data());
      return;
    }

    case OpKind::kSegmentSum: {
      const Tensor& a = in(0);
      check_offsets(*n.index, rows_of(a), describe(id));
      n.value = Tensor::matrix(n.index->size() - 1, cols_of(a));
      kernels::segment_sum_rows(a.data(), cols_of(a), *n.index, n.value.data());
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// backward

NamedTensors Graph::backward(NodeId loss) {
  if (loss >= nodes_.size()) throw Error("loss node id out of range");
  if (!evaluated_) throw Error("backward() called before forward()");
  if (nodes_[loss].value.numel() != 1) {
    throw ShapeError("loss " + describe(loss) + " is not scalar: " +
                     shape_str(nodes_[loss].value.shape()));
  }
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    n.grad = (n.needs_grad && id <= loss) ? Tensor(n.value.shape()) : Tensor();
  }
  has_grads_ = true;
  if (nodes_[loss].needs_grad) {
    nodes_[loss].grad.fill(1.0);
    for (NodeId id = loss + 1; id-- > 0;) {
      if (nodes_[id].needs_grad) propagate(id);
    }
  }
  NamedTensors out;
  for (const auto& [name, id] : params_) {
    out.emplace(name, id <= loss ? nodes_[id].grad : Tensor(nodes_[id].value.shape()));
  }
  return out;
}

void Graph::propagate(NodeId id) {
  Node& n = nodes_[id];
  const Tensor& g = n.grad;
  auto in_node = [&](std::size_t k) -> Node& { return nodes_[n.inputs[k]]; };
  auto wants = [&](std::size_t k) { return in_node(k).needs_grad; };

  switch (n.kind) {
    case OpKind::kInput:
    case OpKind::kParameter:
    case OpKind::kConstant:
      return;

    case OpKind::kMatMul: {
      const Tensor& a = in_node(0).value;
      const Tensor& b = in_node(1).value;
      const std::size_t m = rows_of(n.value);
      const std::size_t nn = cols_of(n.value);
      const std::size_t k = n.trans_a ? rows_of(a) : cols_of(a);
      if (wants(0)) {
        kernels::GemmShape s;
        if (!n.trans_a) {
          // dA = dC * op(B)^T
          s = {.m = m, .n = k, .k = nn, .trans_a = false, .trans_b = !n.trans_b};
          kernels::gemm(s, g.data(), b.data(), in_node(0).grad.data(), true);
        } else {
          // dA (stored k x m) = op(B) * dC^T
          s = {.m = k, .n = m, .k = nn, .trans_a = n.trans_b, .trans_b = true};
          kernels::gemm(s, b.data(), g.data(), in_node(0).grad.data(), true);
        }
      }
      if (wants(1)) {
        kernels::GemmShape s;
        if (!n.trans_b) {
          // dB = op(A)^T * dC
          s = {.m = k, .n = nn, .k = m, .trans_a = !n.trans_a, .trans_b = false};
          kernels::gemm(s, a.data(), g.data(), in_node(1).grad.data(), true);
        } else {
          // dB (stored n x k) = dC^T * op(A)
          s = {.m = nn, .n = k, .k = m, .trans_a = true, .trans_b = n.trans_a};
          kernels::gemm(s, g.data(), a.data(), in_node(1).grad.data(), true);
        }
      }
      return;
    }

    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      const auto bc = static_cast<Broadcast>(static_cast<int>(n.scalar));
      const Tensor& a = in_node(0).value;
      const Tensor& b = in_node(1).value;
      const std::size_t r = rows_of(a);
      const std::size_t c = cols_of(a);
      const double sign = n.kind == OpKind::kSub ? -1.0 : 1.0;
      const bool mul = n.kind == OpKind::kMul;
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const std::size_t f = i * c + j;
          const std::size_t fb = bindex(bc, i, j, c);
          if (wants(0)) in_node(0).grad[f] += mul ? g[f] * b[fb] : g[f];
          if (wants(1)) in_node(1).grad[fb] += mul ? g[f] * a[f] : sign * g[f];
        }
      }
      return;
    }

    case OpKind::kScale: {
      Tensor& ga = in_node(0).grad;
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += n.scalar * g[i];
      return;
    }

    case OpKind::kTanh:
    case OpKind::kSigmoid:
    case OpKind::kRelu:
    case OpKind::kExp:
    case OpKind::kLog:
    case OpKind::kPow: {
      const Tensor& x = in_node(0).value;
      const Tensor& y = n.value;
      Tensor& ga = in_node(0).grad;
      for (std::size_t i = 0; i < g.numel(); ++i) {
        double d = 0.0;
        switch (n.kind) {
          case OpKind::kTanh: d = 1.0 - y[i] * y[i]; break;
          case OpKind::kSigmoid: d = y[i] * (1.0 - y[i]); break;
          case OpKind::kRelu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
          case OpKind::kExp: d = y[i]; break;
          case OpKind::kLog: d = 1.0 / x[i]; break;
          case OpKind::kPow:
            d = n.scalar == 0.0 ? 0.0 : n.scalar * std::pow(x[i], n.scalar - 1.0);
            break;
          default: break;
        }
        ga[i] += g[i] * d;
      }
      return;
    }

    case OpKind::kSoftmaxRows: {
      const auto off = row_offsets(rows_of(n.value), cols_of(n.value));
      kernels::segment_softmax_backward(n.value.data(), g.data(), off,
                                        in_node(0).grad.data());
      return;
    }

    case OpKind::kLogSoftmaxRows: {
      Tensor& ga = in_node(0).grad;
      const std::size_t c = cols_of(n.value);
      for (std::size_t r = 0; r < rows_of(n.value); ++r) {
        double gs = 0.0;
        for (std::size_t j = 0; j < c; ++j) gs += g.at(r, j);
        for (std::size_t j = 0; j < c; ++j) {
          ga.at(r, j) += g.at(r, j) - std::exp(n.value.at(r, j)) * gs;
        }
      }
      return;
    }

    case OpKind::kSegmentSoftmax:
      kernels::segment_softmax_backward(n.value.data(), g.data(), *n.index,
                                        in_node(0).grad.data());
      return;

    case OpKind::kLayerNorm: {
      const std::size_t r = rows_of(n.value);
      const std::size_t c = cols_of(n.value);
      const Tensor& scale = in_node(1).value;
      if (wants(0)) {
        kernels::layer_norm_backward(g.data(), n.xhat, n.inv_std, scale.data(), r, c,
                                     in_node(0).grad.data());
      }
      if (wants(1) || wants(2)) {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            const double gv = g[i * c + j];
            if (wants(1)) in_node(1).grad[j] += gv * n.xhat[i * c + j];
            if (wants(2)) in_node(2).grad[j] += gv;
          }
        }
      }
      return;
    }

    case OpKind::kSum:
    case OpKind::kMean: {
      Tensor& ga = in_node(0).grad;
      const double gv = n.kind == OpKind::kMean ? g[0] / static_cast<double>(ga.numel()) : g[0];
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += gv;
      return;
    }

    case OpKind::kRowSum:
    case OpKind::kRowMean: {
      Tensor& ga = in_node(0).grad;
      const std::size_t c = cols_of(ga);
      const double inv = n.kind == OpKind::kRowMean ? 1.0 / static_cast<double>(c) : 1.0;
      for (std::size_t i = 0; i < rows_of(ga); ++i) {
        for (std::size_t j = 0; j < c; ++j) ga.at(i, j) += g[i] * inv;
      }
      return;
    }

    case OpKind::kConcatRows: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        Node& part = in_node(k);
        const std::size_t len = part.value.numel();
        if (part.needs_grad) {
          for (std::size_t i = 0; i < len; ++i) part.grad[i] += g[offset + i];
        }
        offset += len;
      }
      return;
    }

    case OpKind::kGatherRows:
      kernels::scatter_add_rows(g.data(), cols_of(n.value), *n.index, in_node(0).grad.data());
      return;

    case OpKind::kSegmentSum: {
      Tensor& ga = in_node(0).grad;
      const std::size_t c = cols_of(ga);
      const auto& off = *n.index;
      for (std::size_t s = 0; s + 1 < off.size(); ++s) {
        for (std::size_t r = off[s]; r < off[s + 1]; ++r) {
          for (std::size_t j = 0; j < c; ++j) ga.at(r, j) += g.at(s, j);
        }
      }
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// finite differences

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& fn, const Tensor& point,
                        double eps) {
  if (!(eps > 0.0)) throw Error("finite difference step must be positive");
  Tensor probe = point;
  Tensor grad(point.shape());
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const double x = point[i];
    probe[i] = x + eps;
    const double up = fn(probe);
    probe[i] = x - eps;
    const double down = fn(probe);
    probe[i] = x;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("non-finite function value probing coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

NamedTensors finite_diff_grad(const std::function<double(const NamedTensors&)>& fn,
                              const NamedTensors& point, double eps) {
  if (!(eps > 0.0)) throw Error("finite difference step must be positive");
  NamedTensors probe = point;
  NamedTensors out;
  for (const auto& [name, value] : point) {
    Tensor& slot = probe.at(name);
    Tensor grad(value.shape());
    for (std::size_t i = 0; i < value.numel(); ++i) {
      const double x = value[i];
      slot[i] = x + eps;
      const double up = fn(probe);
      slot[i] = x - eps;
      const double down = fn(probe);
      slot[i] = x;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("non-finite function value probing " + name + "[" +
                           std::to_string(i) + "]");
      }
      grad[i] = (up - down) / (2.0 * eps);
    }
    out.emplace(name, std::move(grad));
  }
  return out;
}

}  // namespace raamil
