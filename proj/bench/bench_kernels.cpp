// Serial references against the OpenMP kernels, and scoped against dense
// masked attention as conditions are added.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "unicombine/attention.hpp"
#include "unicombine/kernels.hpp"

using namespace unicombine;

namespace {

std::vector<float> noise(std::int64_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d;
  std::vector<float> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = d(rng);
  return v;
}

template <bool Parallel>
void BM_gemm_nn(benchmark::State& state) {
  const auto n = state.range(0);
  const auto a = noise(n * n, 1), b = noise(n * n, 2);
  std::vector<float> c(static_cast<std::size_t>(n * n));
  for (auto _ : state) {
    if constexpr (Parallel) kernels::gemm_nn(a.data(), b.data(), c.data(), n, n, n, false);
    else kernels::gemm_nn_serial(a.data(), b.data(), c.data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * double(n) * double(n) * double(n),
                                                 benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_gemm_nt(benchmark::State& state) {
  const auto n = state.range(0);
  const auto a = noise(n * n, 3), b = noise(n * n, 4);
  std::vector<float> c(static_cast<std::size_t>(n * n));
  for (auto _ : state) {
    if constexpr (Parallel) kernels::gemm_nt(a.data(), b.data(), c.data(), n, n, n, false);
    else kernels::gemm_nt_serial(a.data(), b.data(), c.data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
}

template <bool Parallel>
void BM_softmax(benchmark::State& state) {
  const auto rows = state.range(0), cols = state.range(0);
  const auto x = noise(rows * cols, 5);
  std::vector<float> out(x.size());
  for (auto _ : state) {
    if constexpr (Parallel) kernels::softmax_rows(x.data(), out.data(), rows, cols, 0.125f);
    else kernels::softmax_rows_serial(x.data(), out.data(), rows, cols, 0.125f);
    benchmark::DoNotOptimize(out.data());
  }
}

// 64-token branches, two heads of 32: the desk model's attention shape.
AttentionInputs<float> inputs(const BranchLayout& layout) {
  std::mt19937_64 rng(6);
  const Shape s{2, layout.total(), 32};
  return {Tensor<float>::randn(s, rng), Tensor<float>::randn(s, rng), Tensor<float>::randn(s, rng), 32};
}

void BM_attention_scoped(benchmark::State& state) {
  BranchLayout layout{16, 64, std::vector<std::int64_t>(static_cast<std::size_t>(state.range(0)), 64)};
  const auto in = inputs(layout);
  NoGradScope<float> off;
  for (auto _ : state) benchmark::DoNotOptimize(cmmdit_attention(in, layout));
  state.counters["attn_ops"] = static_cast<double>(count_attn_ops(layout, 1, AttnMode::CMMDIT));
}

void BM_attention_dense_masked(benchmark::State& state) {
  BranchLayout layout{16, 64, std::vector<std::int64_t>(static_cast<std::size_t>(state.range(0)), 64)};
  const auto in = inputs(layout);
  const auto mask = scope_mask(layout);
  NoGradScope<float> off;
  for (auto _ : state) benchmark::DoNotOptimize(mmdit_attention_masked(in, mask));
  state.counters["attn_ops"] = static_cast<double>(count_attn_ops(layout, 1, AttnMode::MMDIT));
}

}  // namespace

BENCHMARK(BM_gemm_nn<false>)->Name("gemm_nn/serial")->RangeMultiplier(2)->Range(64, 512);
BENCHMARK(BM_gemm_nn<true>)->Name("gemm_nn/omp")->RangeMultiplier(2)->Range(64, 512)->UseRealTime();
BENCHMARK(BM_gemm_nt<false>)->Name("gemm_nt/serial")->RangeMultiplier(2)->Range(64, 512);
BENCHMARK(BM_gemm_nt<true>)->Name("gemm_nt/omp")->RangeMultiplier(2)->Range(64, 512)->UseRealTime();
BENCHMARK(BM_softmax<false>)->Name("softmax/serial")->RangeMultiplier(4)->Range(64, 1024);
BENCHMARK(BM_softmax<true>)->Name("softmax/omp")->RangeMultiplier(4)->Range(64, 1024)->UseRealTime();
BENCHMARK(BM_attention_scoped)->DenseRange(0, 8, 2)->UseRealTime();
BENCHMARK(BM_attention_dense_masked)->DenseRange(0, 8, 2)->UseRealTime();

BENCHMARK_MAIN();
