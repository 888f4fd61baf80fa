#pragma once

// Region-affinity token refinement. Each token is replaced by
//
//   z_i + gamma * (LN(sum_j alpha_ij z_j) - z_i),
//   alpha_ij = softmax_{j in N(i)} f(d_ij),   d_ij = |z_i - z_j|^2 / D,
//
// where N(i) is the k x k window around i clipped at the grid border and f is
// a 1 -> H -> 1 tanh MLP. gamma starts at exactly zero, so a freshly
// initialized module is the identity.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "raamil/dataio.hpp"
#include "raamil/graph.hpp"
#include "raamil/rng.hpp"

namespace raamil {

struct RaaConfig {
  std::size_t k = 3;
  std::size_t hidden = 16;
  bool include_self = true;
  /// Learnable layer-norm scale/shift; when false LN is parameter-free.
  bool ln_affine = true;

  void validate() const;
};

struct RaaParams {
  RaaConfig config;
  Tensor w1;        // 1 x H
  Tensor b1;        // 1 x H
  Tensor w2;        // H x 1
  Tensor b2;        // 1 x 1
  Tensor gamma;     // 1 x 1
  Tensor ln_scale;  // 1 x D
  Tensor ln_shift;  // 1 x D

  static RaaParams init(const RaaConfig& config, std::size_t dim, Rng& rng);
  std::size_t dim() const noexcept { return ln_scale.numel(); }

  /// Visits every trainable tensor with its checkpoint name.
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn);
};

/// Valid neighbors of every cell of a rows x cols grid, in CSR form.
struct NeighborhoodIndex {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t k = 3;
  bool include_self = true;
  std::vector<std::size_t> offsets;    // cells + 1
  std::vector<std::size_t> neighbors;  // row-major within each window

  static NeighborhoodIndex build(std::size_t rows, std::size_t cols, std::size_t k,
                                 bool include_self);
  std::size_t cells() const noexcept { return rows * cols; }
  std::size_t pairs() const noexcept { return neighbors.size(); }
  std::span<const std::size_t> of(std::size_t cell) const {
    return {neighbors.data() + offsets[cell], offsets[cell + 1] - offsets[cell]};
  }
};

/// Pair lists for a whole bag: the per-patch neighborhood tiled over P
/// patches with cell ids offset by patch. Patches never see each other.
struct BagNeighborhood {
  IndexList centers;    // per pair, the cell i
  IndexList neighbors;  // per pair, the cell j
  IndexList offsets;    // pair range of each cell
  std::size_t cells = 0;

  static BagNeighborhood tile(const NeighborhoodIndex& index, std::size_t patches);
};

// --- graph construction --------------------------------------------------------

struct RaaParamNodes {
  NodeId w1, b1, w2, b2, gamma, ln_scale, ln_shift;
};

struct RaaNodes {
  NodeId distances;  // pairs x 1
  NodeId affinity;   // pairs x 1, alpha
  NodeId aggregate;  // cells x D, sum_j alpha_ij z_j
  NodeId refined;    // cells x D
};

RaaParamNodes add_raa_parameters(Graph& g, const RaaParams& params);
NodeId add_neighbor_distances(Graph& g, NodeId tokens, const BagNeighborhood& nb);
/// f(d) for a column of distances.
NodeId add_affinity_mlp(Graph& g, NodeId distances, const RaaParamNodes& p);
RaaNodes add_raa(Graph& g, NodeId tokens, const RaaParamNodes& p, const BagNeighborhood& nb);

// --- direct evaluation -------------------------------------------------------

/// d_ij for every (i, j in N(i)) in index order.
std::vector<double> pairwise_neighbor_distances(const GridTokens& grid,
                                                const NeighborhoodIndex& index);
/// alpha_ij for every pair in index order; sums to one within each cell.
std::vector<double> affinity_weights(std::span<const double> distances,
                                     const NeighborhoodIndex& index, const RaaParams& params);
/// Refined grid with the same {rows, cols, dim} shape as the input.
Tensor refine_tokens(const GridTokens& grid, const RaaParams& params);

}  // namespace raamil
