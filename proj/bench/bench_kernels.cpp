#include <benchmark/benchmark.h>

#include <vector>

#include "cdl/kernels.hpp"
#include "cdl/rng.hpp"

namespace {

namespace k = cdl::kernels;

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  cdl::SeededRng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

template <auto Gemm>
void gemm(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  auto a = filled(std::size_t(n) * n, 1), b = filled(std::size_t(n) * n, 2);
  std::vector<double> c(std::size_t(n) * n);
  for (auto _ : state) {
    Gemm(a, b, c, n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}

template <auto Softmax>
void softmax(benchmark::State& state) {
  const int rows = static_cast<int>(state.range(0)), cols = 64;
  auto x = filled(std::size_t(rows) * cols, 3);
  std::vector<double> y(x.size());
  for (auto _ : state) {
    Softmax(x, y, rows, cols, 2.0);
    benchmark::DoNotOptimize(y.data());
  }
}

template <auto Norm>
void layer_norm(benchmark::State& state) {
  const int rows = static_cast<int>(state.range(0)), cols = 64;
  auto x = filled(std::size_t(rows) * cols, 4);
  std::vector<double> y(x.size()), inv(rows);
  for (auto _ : state) {
    Norm(x, y, inv, rows, cols, 1e-6);
    benchmark::DoNotOptimize(y.data());
  }
}

template <auto Gelu>
void gelu(benchmark::State& state) {
  auto x = filled(std::size_t(state.range(0)), 5);
  std::vector<double> y(x.size());
  for (auto _ : state) {
    Gelu(x, y);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(gemm<k::reference::gemm_nn>)->Name("gemm_nn/serial")->Arg(64)->Arg(256);
BENCHMARK(gemm<k::gemm_nn>)->Name("gemm_nn/openmp")->Arg(64)->Arg(256);
BENCHMARK(gemm<k::reference::gemm_nt>)->Name("gemm_nt/serial")->Arg(64)->Arg(256);
BENCHMARK(gemm<k::gemm_nt>)->Name("gemm_nt/openmp")->Arg(64)->Arg(256);
BENCHMARK(gemm<k::reference::gemm_tn>)->Name("gemm_tn/serial")->Arg(64)->Arg(256);
BENCHMARK(gemm<k::gemm_tn>)->Name("gemm_tn/openmp")->Arg(64)->Arg(256);
BENCHMARK(softmax<k::reference::softmax_rows>)->Name("softmax_rows/serial")->Arg(4096);
BENCHMARK(softmax<k::softmax_rows>)->Name("softmax_rows/openmp")->Arg(4096);
BENCHMARK(layer_norm<k::reference::layer_norm_rows>)->Name("layer_norm_rows/serial")->Arg(4096);
BENCHMARK(layer_norm<k::layer_norm_rows>)->Name("layer_norm_rows/openmp")->Arg(4096);
BENCHMARK(gelu<k::reference::gelu>)->Name("gelu/serial")->Arg(1 << 18);
BENCHMARK(gelu<k::gelu>)->Name("gelu/openmp")->Arg(1 << 18);

BENCHMARK_MAIN();
