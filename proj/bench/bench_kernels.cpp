// Serial reference kernels against their OpenMP counterparts.

#include <benchmark/benchmark.h>

#include "cdrsteer/cdr.hpp"
#include "cdrsteer/kernels.hpp"
#include "cdrsteer/rng.hpp"

using namespace cdrsteer;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

void BM_MatmulSerial(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, n, 1);
  const Matrix b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::serial::matmul(a, b));
  state.SetComplexityN(state.range(0));
}

void BM_MatmulParallel(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, n, 1);
  const Matrix b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::parallel::matmul(a, b));
  state.SetComplexityN(state.range(0));
}

void BM_GramSerial(benchmark::State& state) {
  const Matrix x = random_matrix(static_cast<std::size_t>(state.range(0)), 32, 3);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::serial::gram(x));
}

void BM_GramParallel(benchmark::State& state) {
  const Matrix x = random_matrix(static_cast<std::size_t>(state.range(0)), 32, 3);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::parallel::gram(x));
}

void BM_VecmatSerial(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, n, 4);
  const Vector x(n, 0.5);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::serial::vecmat(x, a));
}

void BM_VecmatParallel(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, n, 4);
  const Vector x(n, 0.5);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::parallel::vecmat(x, a));
}

// Prompt-parallel generation on the planted toy model; range(0) = threads.
void BM_RunBatch(benchmark::State& state) {
  const ModelConfig cfg;
  const Model model = build_model(cfg, PlantSpec::standard(cfg));
  const auto prompts = make_prompts(model, 64, 7);
  const int previous = kernels::max_threads();
  kernels::set_max_threads(static_cast<int>(state.range(0)));
  const GenerationOptions opts{4, HookSet{HookKind::ResidualPostFfn}};
  for (auto _ : state) benchmark::DoNotOptimize(run_batch(model, prompts, std::vector<Intervention>{}, opts));
  kernels::set_max_threads(previous);
}

}  // namespace

BENCHMARK(BM_MatmulSerial)->RangeMultiplier(2)->Range(32, 256)->Complexity();
BENCHMARK(BM_MatmulParallel)->RangeMultiplier(2)->Range(32, 256)->Complexity()->UseRealTime();
BENCHMARK(BM_GramSerial)->Range(256, 8192);
BENCHMARK(BM_GramParallel)->Range(256, 8192)->UseRealTime();
BENCHMARK(BM_VecmatSerial)->Range(64, 1024);
BENCHMARK(BM_VecmatParallel)->Range(64, 1024)->UseRealTime();
BENCHMARK(BM_RunBatch)->Arg(1)->Arg(2)->Arg(4)->UseRealTime();

BENCHMARK_MAIN();
