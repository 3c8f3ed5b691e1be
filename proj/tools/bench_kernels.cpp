// Reference vs OpenMP kernels on layer shapes taken from the micro presets.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "fens/kernels.hpp"

namespace {

using namespace fens;
using namespace fens::kernels;

std::vector<Real> random_values(std::int64_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  std::vector<Real> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = u(rng);
  return v;
}

// Args: batch, in_channels, size, out_channels, kernel, stride, groups
ConvGeometry geometry(const benchmark::State& st) {
  const auto k = st.range(4);
  return make_conv_geometry(st.range(0), st.range(1), st.range(2), st.range(2), st.range(3), k, st.range(5), k / 2,
                            st.range(6));
}

template <bool Parallel>
void BM_ConvForward(benchmark::State& st) {
  const auto g = geometry(st);
  const auto x = random_values(g.input_size(), 1);
  const auto w = random_values(g.weight_size(), 2);
  const auto b = random_values(g.out_channels, 3);
  std::vector<Real> y(static_cast<std::size_t>(g.output_size()));
  for (auto _ : st) {
    if constexpr (Parallel) {
      parallel::conv2d_forward(g, x, w, b, y);
    } else {
      reference::conv2d_forward(g, x, w, b, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
  st.counters["MACs"] = benchmark::Counter(
      static_cast<double>(g.output_size() * g.in_per_group() * g.kernel * g.kernel), benchmark::Counter::kIsIterationInvariantRate);
}

template <bool Parallel>
void BM_ConvBackward(benchmark::State& st) {
  const auto g = geometry(st);
  const auto x = random_values(g.input_size(), 1);
  const auto w = random_values(g.weight_size(), 2);
  const auto dy = random_values(g.output_size(), 3);
  std::vector<Real> dx(x.size()), dw(w.size()), db(static_cast<std::size_t>(g.out_channels));
  for (auto _ : st) {
    if constexpr (Parallel) {
      parallel::conv2d_backward(g, x, w, dy, dx, dw, db);
    } else {
      reference::conv2d_backward(g, x, w, dy, dx, dw, db);
    }
    benchmark::DoNotOptimize(dw.data());
  }
}

template <bool Parallel>
void BM_Linear(benchmark::State& st) {
  const LinearGeometry g{st.range(0), st.range(1), st.range(2)};
  const auto x = random_values(g.batch * g.in_features, 1);
  const auto w = random_values(g.out_features * g.in_features, 2);
  const auto b = random_values(g.out_features, 3);
  std::vector<Real> y(static_cast<std::size_t>(g.batch * g.out_features));
  for (auto _ : st) {
    if constexpr (Parallel) {
      parallel::linear_forward(g, x, w, b, y);
    } else {
      reference::linear_forward(g, x, w, b, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
}

void conv_shapes(benchmark::internal::Benchmark* b) {
  b->ArgNames({"n", "cin", "hw", "cout", "k", "s", "g"});
  b->Args({32, 1, 32, 16, 3, 2, 1});    // stem
  b->Args({32, 64, 16, 64, 3, 2, 64});  // depthwise
  b->Args({32, 96, 8, 24, 1, 1, 1});    // pointwise
  b->Args({32, 16, 16, 32, 3, 1, 1});   // fire expand
}

}  // namespace

BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/reference")->Apply(conv_shapes);
BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/parallel")->Apply(conv_shapes);
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/reference")->Apply(conv_shapes);
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/parallel")->Apply(conv_shapes);
BENCHMARK(BM_Linear<false>)->Name("linear_forward/reference")->Args({32, 1024, 28})->Args({256, 96, 28});
BENCHMARK(BM_Linear<true>)->Name("linear_forward/parallel")->Args({32, 1024, 28})->Args({256, 96, 28});

BENCHMARK_MAIN();
