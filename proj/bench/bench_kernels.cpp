// Serial reference loops vs their OpenMP counterparts on bag-sized shapes
// (M = 588 tokens from three 14x14 patches, D = 384, L = 128).

#include <benchmark/benchmark.h>

#include <numeric>
#include <vector>

#include "raamil/kernels.hpp"
#include "raamil/raa.hpp"
#include "raamil/rng.hpp"

using namespace raamil;

namespace {

constexpr std::size_t kTokens = 588;
constexpr std::size_t kDim = 384;
constexpr std::size_t kHidden = 128;

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

template <auto Gemm>
void BM_Gemm(benchmark::State& state) {
  const auto a = random_values(kTokens * kDim, 1);
  const auto b = random_values(kHidden * kDim, 2);
  std::vector<double> c(kTokens * kHidden);
  const kernels::GemmShape s{kTokens, kHidden, kDim, false, true};
  for (auto _ : state) {
    Gemm(s, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * kTokens * kHidden * kDim));
}

template <auto LayerNorm>
void BM_LayerNorm(benchmark::State& state) {
  const auto x = random_values(kTokens * kDim, 3);
  const std::vector<double> scale(kDim, 1.0), shift(kDim, 0.0);
  std::vector<double> out(x.size()), xhat(x.size()), inv(kTokens);
  for (auto _ : state) {
    LayerNorm(x, scale, shift, kTokens, kDim, 1e-5, out, xhat, inv);
    benchmark::DoNotOptimize(out.data());
  }
}

struct Neighborhood {
  std::vector<std::size_t> neighbors;
  std::vector<std::size_t> offsets;
};

const Neighborhood& neighborhood() {
  static const Neighborhood n = [] {
    const auto idx = NeighborhoodIndex::build(14, 14, 3, true);
    const auto bag = BagNeighborhood::tile(idx, kTokens / 196);
    return Neighborhood{*bag.neighbors, *bag.offsets};
  }();
  return n;
}

template <auto Gather>
void BM_Gather(benchmark::State& state) {
  const auto& nb = neighborhood();
  const auto src = random_values(kTokens * kDim, 4);
  std::vector<double> out(nb.neighbors.size() * kDim);
  for (auto _ : state) {
    Gather(src, kDim, nb.neighbors, out);
    benchmark::DoNotOptimize(out.data());
  }
}

template <auto SegmentSoftmax>
void BM_SegmentSoftmax(benchmark::State& state) {
  const auto& nb = neighborhood();
  const auto x = random_values(nb.neighbors.size(), 5);
  std::vector<double> out(x.size());
  for (auto _ : state) {
    SegmentSoftmax(x, nb.offsets, out);
    benchmark::DoNotOptimize(out.data());
  }
}

template <auto SegmentSum>
void BM_SegmentSum(benchmark::State& state) {
  const auto& nb = neighborhood();
  const auto src = random_values(nb.neighbors.size() * kDim, 6);
  std::vector<double> out(kTokens * kDim);
  for (auto _ : state) {
    SegmentSum(src, kDim, nb.offsets, out);
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<kernels::serial::gemm>)->Name("gemm/serial");
BENCHMARK(BM_Gemm<kernels::omp::gemm>)->Name("gemm/omp");
BENCHMARK(BM_LayerNorm<kernels::serial::layer_norm>)->Name("layer_norm/serial");
BENCHMARK(BM_LayerNorm<kernels::omp::layer_norm>)->Name("layer_norm/omp");
BENCHMARK(BM_Gather<kernels::serial::gather_rows>)->Name("gather_rows/serial");
BENCHMARK(BM_Gather<kernels::omp::gather_rows>)->Name("gather_rows/omp");
BENCHMARK(BM_SegmentSoftmax<kernels::serial::segment_softmax>)->Name("segment_softmax/serial");
BENCHMARK(BM_SegmentSoftmax<kernels::omp::segment_softmax>)->Name("segment_softmax/omp");
BENCHMARK(BM_SegmentSum<kernels::serial::segment_sum_rows>)->Name("segment_sum/serial");
BENCHMARK(BM_SegmentSum<kernels::omp::segment_sum_rows>)->Name("segment_sum/omp");

BENCHMARK_MAIN();
