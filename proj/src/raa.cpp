#include "raamil/raa.hpp"

#include <cmath>

namespace raamil {

namespace {

IndexList share(std::vector<std::size_t> v) {
  return std::make_shared<const std::vector<std::size_t>>(std::move(v));
}

Tensor uniform_init(Rng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in) {
  Tensor t = Tensor::matrix(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.storage()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

void RaaConfig::validate() const {
  if (k == 0 || k % 2 == 0) throw Error("RAA window k must be odd and >= 1, got " + std::to_string(k));
  if (hidden == 0) throw Error("RAA affinity MLP needs at least one hidden unit");
  if (k == 1 && !include_self) throw Error("RAA with k = 1 and no self term has empty windows");
}

RaaParams RaaParams::init(const RaaConfig& config, std::size_t dim, Rng& rng) {
  config.validate();
  RaaParams p;
  p.config = config;
  p.w1 = uniform_init(rng, 1, config.hidden, 1);
  p.b1 = Tensor::matrix(1, config.hidden);
  p.w2 = uniform_init(rng, config.hidden, 1, config.hidden);
  p.b2 = Tensor::matrix(1, 1);
  p.gamma = Tensor::scalar(0.0);
  p.ln_scale = Tensor::matrix(1, dim, 1.0);
  p.ln_shift = Tensor::matrix(1, dim, 0.0);
  return p;
}

template <typename Self, typename Fn>
void RaaParams::visit(Self& self, Fn&& fn) {
  fn("raa.f.w1", self.w1);
  fn("raa.f.b1", self.b1);
  fn("raa.f.w2", self.w2);
  fn("raa.f.b2", self.b2);
  fn("raa.gamma", self.gamma);
  if (self.config.ln_affine) {
    fn("raa.ln.scale", self.ln_scale);
    fn("raa.ln.shift", self.ln_shift);
  }
}

void RaaParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit(*this, fn);
}

void RaaParams::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit(*this, fn);
}

NeighborhoodIndex NeighborhoodIndex::build(std::size_t rows, std::size_t cols, std::size_t k,
                                           bool include_self) {
  RaaConfig{k, 1, include_self, true}.validate();
  NeighborhoodIndex idx;
  idx.rows = rows;
  idx.cols = cols;
  idx.k = k;
  idx.include_self = include_self;
  const auto h = static_cast<std::ptrdiff_t>(k / 2);
  const auto R = static_cast<std::ptrdiff_t>(rows);
  const auto C = static_cast<std::ptrdiff_t>(cols);
  idx.offsets.push_back(0);
  for (std::ptrdiff_t r = 0; r < R; ++r) {
    for (std::ptrdiff_t c = 0; c < C; ++c) {
      for (std::ptrdiff_t rr = std::max<std::ptrdiff_t>(0, r - h); rr <= std::min(R - 1, r + h); ++rr) {
        for (std::ptrdiff_t cc = std::max<std::ptrdiff_t>(0, c - h); cc <= std::min(C - 1, c + h); ++cc) {
          if (!include_self && rr == r && cc == c) continue;
          idx.neighbors.push_back(static_cast<std::size_t>(rr * C + cc));
        }
      }
      if (idx.neighbors.size() == idx.offsets.back()) {
        throw Error("empty RAA neighborhood at cell " + std::to_string(r * C + c));
      }
      idx.offsets.push_back(idx.neighbors.size());
    }
  }
  return idx;
}

BagNeighborhood BagNeighborhood::tile(const NeighborhoodIndex& index, std::size_t patches) {
  std::vector<std::size_t> centers, neighbors, offsets{0};
  centers.reserve(index.pairs() * patches);
  neighbors.reserve(index.pairs() * patches);
  for (std::size_t p = 0; p < patches; ++p) {
    const std::size_t base = p * index.cells();
    for (std::size_t i = 0; i < index.cells(); ++i) {
      for (std::size_t j : index.of(i)) {
        centers.push_back(base + i);
        neighbors.push_back(base + j);
      }
      offsets.push_back(neighbors.size());
    }
  }
  BagNeighborhood nb;
  nb.cells = index.cells() * patches;
  nb.centers = share(std::move(centers));
  nb.neighbors = share(std::move(neighbors));
  nb.offsets = share(std::move(offsets));
  return nb;
}

RaaParamNodes add_raa_parameters(Graph& g, const RaaParams& params) {
  RaaParamNodes p{};
  p.w1 = g.parameter("raa.f.w1", params.w1);
  p.b1 = g.parameter("raa.f.b1", params.b1);
  p.w2 = g.parameter("raa.f.w2", params.w2);
  p.b2 = g.parameter("raa.f.b2", params.b2);
  p.gamma = g.parameter("raa.gamma", params.gamma);
  if (params.config.ln_affine) {
    p.ln_scale = g.parameter("raa.ln.scale", params.ln_scale);
    p.ln_shift = g.parameter("raa.ln.shift", params.ln_shift);
  } else {
    p.ln_scale = g.constant(Tensor::matrix(1, params.dim(), 1.0));
    p.ln_shift = g.constant(Tensor::matrix(1, params.dim(), 0.0));
  }
  return p;
}

NodeId add_neighbor_distances(Graph& g, NodeId tokens, const BagNeighborhood& nb) {
  const NodeId zi = g.gather_rows(tokens, nb.centers);
  const NodeId zj = g.gather_rows(tokens, nb.neighbors);
  const NodeId diff = g.sub(zi, zj);
  return g.row_mean(g.mul(diff, diff));
}

NodeId add_affinity_mlp(Graph& g, NodeId distances, const RaaParamNodes& p) {
  const NodeId hidden = g.tanh(g.add(g.matmul(distances, p.w1), p.b1));
  return g.add(g.matmul(hidden, p.w2), p.b2);
}

RaaNodes add_raa(Graph& g, NodeId tokens, const RaaParamNodes& p, const BagNeighborhood& nb) {
  RaaNodes out{};
  out.distances = add_neighbor_distances(g, tokens, nb);
  out.affinity = g.segment_softmax(add_affinity_mlp(g, out.distances, p), nb.offsets);
  const NodeId zj = g.gather_rows(tokens, nb.neighbors);
  out.aggregate = g.segment_sum(g.mul(zj, out.affinity), nb.offsets);
  const NodeId normed = g.layer_norm(out.aggregate, p.ln_scale, p.ln_shift);
  out.refined = g.add(tokens, g.mul(g.sub(normed, tokens), p.gamma));
  return out;
}

std::vector<double> pairwise_neighbor_distances(const GridTokens& grid,
                                                const NeighborhoodIndex& index) {
  grid.validate();
  if (grid.rows != index.rows || grid.cols != index.cols) {
    throw ShapeError("grid " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols) +
                     " does not match neighborhood index " + std::to_string(index.rows) + "x" +
                     std::to_string(index.cols));
  }
  Graph g;
  const NodeId d = add_neighbor_distances(g, g.input("tokens"), BagNeighborhood::tile(index, 1));
  g.mark_output("d", d);
  const Tensor out = g.forward({{"tokens", grid.to_tensor()}}).at("d");
  return {out.storage().begin(), out.storage().end()};
}

std::vector<double> affinity_weights(std::span<const double> distances,
                                     const NeighborhoodIndex& index, const RaaParams& params) {
  if (distances.size() != index.pairs()) {
    throw ShapeError("got " + std::to_string(distances.size()) + " distances for " +
                     std::to_string(index.pairs()) + " neighbor pairs");
  }
  Graph g;
  const RaaParamNodes p = add_raa_parameters(g, params);
  const BagNeighborhood nb = BagNeighborhood::tile(index, 1);
  const NodeId f = add_affinity_mlp(g, g.input("d"), p);
  g.mark_output("alpha", g.segment_softmax(f, nb.offsets));
  Tensor d(Shape{distances.size(), 1}, std::vector<double>(distances.begin(), distances.end()));
  const Tensor out = g.forward({{"d", d}}).at("alpha");
  return {out.storage().begin(), out.storage().end()};
}

Tensor refine_tokens(const GridTokens& grid, const RaaParams& params) {
  grid.validate();
  if (grid.dim != params.dim()) {
    throw ShapeError("grid dim " + std::to_string(grid.dim) + " != RAA dim " +
                     std::to_string(params.dim()));
  }
  const auto index =
      NeighborhoodIndex::build(grid.rows, grid.cols, params.config.k, params.config.include_self);
  Graph g;
  const RaaParamNodes p = add_raa_parameters(g, params);
  const RaaNodes n = add_raa(g, g.input("tokens"), p, BagNeighborhood::tile(index, 1));
  g.mark_output("out", n.refined);
  return g.forward({{"tokens", grid.to_tensor()}}).at("out").reshaped({grid.rows, grid.cols, grid.dim});
}

}  // namespace raamil
