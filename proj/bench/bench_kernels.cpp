// Serial reference kernels against their OpenMP counterparts.

#include <benchmark/benchmark.h>

#include <vector>

#include "fibermap/kernels.hpp"
#include "fibermap/rng.hpp"

using namespace fibermap;

namespace {

std::vector<ResampledFiber> fibers(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ResampledFiber> out(n);
  for (auto& f : out) {
    Vec3 x(rng.uniform(-40, 40), rng.uniform(-40, 40), rng.uniform(-40, 40));
    for (std::size_t i = 0; i < kDefaultResamplePoints; ++i) {
      f.points.push_back(x);
      x += Vec3(rng.normal(), rng.normal(), rng.normal()) * 3.0;
    }
  }
  return out;
}

FiberDistanceParams params() {
  FiberDistanceParams p;
  p.variant = McpVariant::symmetric_mean;
  p.sigma = 30.0;
  return p;
}

template <auto Kernel>
void affinity(benchmark::State& state) {
  const auto a = fibers(static_cast<std::size_t>(state.range(0)), 1);
  const auto b = fibers(static_cast<std::size_t>(state.range(0)), 2);
  const auto p = params();
  for (auto _ : state) benchmark::DoNotOptimize(Kernel(a, b, p));
  state.SetItemsProcessed(state.iterations() * state.range(0) * state.range(0));
}

template <auto Kernel>
void objective(benchmark::State& state) {
  const auto a = fibers(static_cast<std::size_t>(state.range(0)), 3);
  const auto b = fibers(static_cast<std::size_t>(state.range(0)), 4);
  const auto p = params();
  for (auto _ : state) benchmark::DoNotOptimize(Kernel(a, b, p, 1e-12));
  state.SetItemsProcessed(state.iterations() * state.range(0) * state.range(0));
}

template <auto Kernel>
void nearest(benchmark::State& state) {
  Rng rng(5);
  const Eigen::Index n = state.range(0);
  Eigen::MatrixXd x(n, 10), c(200, 10);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(Kernel(x, c));
  state.SetItemsProcessed(state.iterations() * n);
}

}  // namespace

BENCHMARK(affinity<kernels::serial::affinity_matrix>)->Name("affinity/serial")->Arg(100)->Arg(400);
BENCHMARK(affinity<kernels::omp::affinity_matrix>)->Name("affinity/omp")->Arg(100)->Arg(400)->UseRealTime();
BENCHMARK(objective<kernels::serial::neg_log_affinity_sum>)->Name("objective/serial")->Arg(100)->Arg(400);
BENCHMARK(objective<kernels::omp::neg_log_affinity_sum>)->Name("objective/omp")->Arg(100)->Arg(400)->UseRealTime();
BENCHMARK(nearest<kernels::serial::nearest_centroids>)->Name("nearest/serial")->Arg(20000);
BENCHMARK(nearest<kernels::omp::nearest_centroids>)->Name("nearest/omp")->Arg(20000)->UseRealTime();

BENCHMARK_MAIN();
