// Parallel kernels against their serial references, plus one transformer
// cell evaluation at the copy-memory training shape.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "deq/kernels.hpp"
#include "deq/transformer.hpp"
#include "deq/head.hpp"

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

// Rows of a (N·T, d) activation times a (d, 3d) weight, as in the qkv projection.
template <auto Kernel>
void BM_Matmul(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const std::size_t k = 16, n = 48;
  const auto a = random_values(m * k, 1), b = random_values(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    Kernel(a.data(), b.data(), c.data(), m, k, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m * k * n));
}

template <auto Kernel>
void BM_MatmulAtB(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const std::size_t k = 16, n = 48;
  const auto a = random_values(m * k, 3), b = random_values(m * n, 4);
  std::vector<double> c(k * n);
  for (auto _ : state) {
    Kernel(a.data(), b.data(), c.data(), m, k, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m * k * n));
}

template <auto Kernel>
void BM_CausalConv(benchmark::State& state) {
  const std::size_t batch = 32, steps = static_cast<std::size_t>(state.range(0));
  const std::size_t c_in = 16, c_out = 64, taps = 2, dilation = 1;
  const auto ext = random_values(batch * (steps + (taps - 1) * dilation) * c_in, 5);
  const auto w = random_values(taps * c_in * c_out, 6);
  std::vector<double> out(batch * steps * c_out);
  for (auto _ : state) {
    Kernel(ext.data(), w.data(), out.data(), batch, steps, c_in, c_out, taps, dilation);
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_TransformerCell(benchmark::State& state) {
  const std::size_t n = 32, t = static_cast<std::size_t>(state.range(0)), d = 16;
  deq::TransformerCell cell({10, d, 2, t});
  const deq::ParamSet p = deq::init_params(cell.param_layout(), 0);
  deq::Tensor x({n, t, 10}, random_values(n * t * 10, 7));
  const deq::Tensor z({n, t, d}, random_values(n * t * d, 8));
  const deq::VectorMap f = cell.bind(x, p, {});
  for (auto _ : state) benchmark::DoNotOptimize(f(z));
}

}  // namespace

BENCHMARK(BM_Matmul<deq::kernels::matmul>)->Name("matmul/parallel")->Arg(800)->Arg(3200);
BENCHMARK(BM_Matmul<deq::kernels::reference::matmul>)->Name("matmul/reference")->Arg(800)->Arg(3200);
BENCHMARK(BM_MatmulAtB<deq::kernels::matmul_at_b>)->Name("matmul_at_b/parallel")->Arg(3200);
BENCHMARK(BM_MatmulAtB<deq::kernels::reference::matmul_at_b>)->Name("matmul_at_b/reference")->Arg(3200);
BENCHMARK(BM_CausalConv<deq::kernels::causal_conv1d>)->Name("causal_conv1d/parallel")->Arg(100);
BENCHMARK(BM_CausalConv<deq::kernels::reference::causal_conv1d>)->Name("causal_conv1d/reference")->Arg(100);
BENCHMARK(BM_TransformerCell)->Arg(100)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
