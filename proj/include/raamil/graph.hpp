#pragma once

// Reverse-mode automatic differentiation over a closed set of matrix ops.
//
// A Graph is a tape: nodes are appended in topological order and evaluated in
// insertion order. Inputs are bound by name at forward(); parameters are
// named leaves owned by the graph and are the only nodes whose gradients
// backward() reports.

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "raamil/tensor.hpp"

namespace raamil {

using NodeId = std::size_t;
using NamedTensors = std::map<std::string, Tensor>;
using IndexList = std::shared_ptr<const std::vector<std::size_t>>;

enum class OpKind {
  kInput,
  kParameter,
  kConstant,
  kMatMul,
  kAdd,
  kSub,
  kScale,
  kMul,
  kTanh,
  kSigmoid,
  kRelu,
  kExp,
  kLog,
  kPow,
  kSoftmaxRows,
  kLogSoftmaxRows,
  kSegmentSoftmax,
  kLayerNorm,
  kSum,
  kMean,
  kRowSum,
  kRowMean,
  kConcatRows,
  kGatherRows,
  kSegmentSum,
};

std::string_view op_name(OpKind kind) noexcept;

class Graph {
 public:
  static constexpr double kLayerNormEps = 1e-5;

  // leaves
  NodeId input(std::string name);
  NodeId parameter(std::string name, Tensor value);
  NodeId constant(Tensor value);

  // linear algebra
  NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false);
  /// Elementwise a + b. `b` may also be 1x1, a column (rows x 1) or a row (1 x cols).
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);

  // pointwise
  NodeId tanh(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId relu(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  /// a^exponent for a >= 0; 0^0 is 1.
  NodeId pow(NodeId a, double exponent);

  // normalizations
  NodeId softmax_rows(NodeId a);
  NodeId log_softmax_rows(NodeId a);
  /// Softmax of a column vector within contiguous row groups given by
  /// offsets (size groups+1, first 0, last rows).
  NodeId segment_softmax(NodeId a, IndexList offsets);
  NodeId layer_norm(NodeId x, NodeId scale, NodeId shift, double eps = kLayerNormEps);

  // reductions and structure
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId row_sum(NodeId a);
  NodeId row_mean(NodeId a);
  NodeId concat_rows(const std::vector<NodeId>& parts);
  NodeId gather_rows(NodeId a, IndexList index);
  /// Sums contiguous row groups: output row s = sum of rows [off[s], off[s+1]).
  NodeId segment_sum(NodeId a, IndexList offsets);

  void mark_output(std::string name, NodeId node);

  /// Evaluates every node in insertion order. Throws ShapeError naming the
  /// offending node, NumericError on the first non-finite value.
  NamedTensors forward(const NamedTensors& inputs);
  /// Gradients of a scalar node w.r.t. every registered parameter.
  NamedTensors backward(NodeId loss);

  const Tensor& value(NodeId node) const;
  /// Gradient of the last backward() w.r.t. any node that depends on a parameter.
  const Tensor& grad(NodeId node) const;

  void set_parameter(const std::string& name, Tensor value);
  const Tensor& parameter_value(const std::string& name) const;
  NamedTensors parameters() const;
  std::vector<std::string> parameter_names() const;
  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind kind(NodeId node) const { return nodes_.at(node).kind; }

 private:
  struct Node {
    OpKind kind = OpKind::kConstant;
    std::vector<NodeId> inputs;
    std::string name;
    double scalar = 0.0;
    bool trans_a = false;
    bool trans_b = false;
    bool needs_grad = false;
    IndexList index;
    Tensor value;
    Tensor grad;
    std::vector<double> xhat;
    std::vector<double> inv_std;
  };

  static Node make_node(OpKind kind, std::vector<NodeId> inputs);
  NodeId push(Node node);
  std::string describe(NodeId id) const;
  void eval(NodeId id);
  void propagate(NodeId id);

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> params_;
  std::map<std::string, NodeId> inputs_;
  std::map<std::string, NodeId> outputs_;
  bool evaluated_ = false;
  bool has_grads_ = false;
};

/// Central-difference gradient of a scalar function:
/// (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per coordinate.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& fn, const Tensor& point,
                        double eps = 1e-5);

/// Same, over every coordinate of a set of named tensors.
NamedTensors finite_diff_grad(const std::function<double(const NamedTensors&)>& fn,
                              const NamedTensors& point, double eps = 1e-5);

}  // namespace raamil
