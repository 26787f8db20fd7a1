// OpenMP kernels against their serial references on the shapes the default
// model sees for a 32x32 input.

#include <benchmark/benchmark.h>

#include <random>

#include "spurious/kernels.hpp"

namespace {

using namespace spurious;
namespace k = spurious::kernels;

Tensor random_tensor(const std::vector<std::size_t>& shape, std::uint64_t seed) {
  Tensor t(shape);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (float& v : t.values()) v = u(rng);
  return t;
}

struct ConvCase {
  k::ConvGeometry g;
  Tensor input, weight, grad_out;
  std::vector<float> bias;
};

// Args: in channels, out channels, spatial size, stride.
ConvCase conv_case(const benchmark::State& state) {
  ConvCase c;
  c.g = {static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)), 3,
         static_cast<std::size_t>(state.range(3)), 1};
  const auto size = static_cast<std::size_t>(state.range(2));
  const std::size_t out = c.g.out_size(size);
  c.input = random_tensor({c.g.in_channels, size, size}, 1);
  c.weight = random_tensor({c.g.out_channels, c.g.in_channels, 3, 3}, 2);
  c.grad_out = random_tensor({c.g.out_channels, out, out}, 3);
  c.bias.assign(c.g.out_channels, 0.1f);
  return c;
}

template <bool Parallel>
void BM_ConvForward(benchmark::State& state) {
  const ConvCase c = conv_case(state);
  for (auto _ : state) {
    Tensor out = Parallel ? k::conv2d_forward(c.input, c.weight, c.bias, c.g)
                          : k::reference::conv2d_forward(c.input, c.weight, c.bias, c.g);
    benchmark::DoNotOptimize(out.values().data());
  }
}

template <bool Parallel>
void BM_ConvBackwardInput(benchmark::State& state) {
  const ConvCase c = conv_case(state);
  const std::size_t size = c.input.dim(1);
  for (auto _ : state) {
    Tensor out = Parallel ? k::conv2d_backward_input(c.grad_out, c.weight, c.g, size, size)
                          : k::reference::conv2d_backward_input(c.grad_out, c.weight, c.g, size, size);
    benchmark::DoNotOptimize(out.values().data());
  }
}

template <bool Parallel>
void BM_ConvBackwardParams(benchmark::State& state) {
  const ConvCase c = conv_case(state);
  Tensor gw(c.weight.shape());
  std::vector<float> gb(c.g.out_channels);
  for (auto _ : state) {
    if (Parallel) {
      k::conv2d_backward_params(c.grad_out, c.input, c.g, gw, gb);
    } else {
      k::reference::conv2d_backward_params(c.grad_out, c.input, c.g, gw, gb);
    }
    benchmark::DoNotOptimize(gw.values().data());
  }
}

template <bool Parallel>
void BM_GlobalAvgPool(benchmark::State& state) {
  const auto s = static_cast<std::size_t>(state.range(1));
  const Tensor maps = random_tensor({static_cast<std::size_t>(state.range(0)), s, s}, 4);
  for (auto _ : state) {
    auto out = Parallel ? k::global_avg_pool(maps) : k::reference::global_avg_pool(maps);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_Bilinear(benchmark::State& state) {
  const auto s = static_cast<std::size_t>(state.range(0));
  const auto o = static_cast<std::size_t>(state.range(1));
  const Tensor plane = random_tensor({s, s}, 5);
  for (auto _ : state) {
    auto out = Parallel ? k::bilinear_resize(plane.values(), s, s, o, o)
                        : k::reference::bilinear_resize(plane.values(), s, s, o, o);
    benchmark::DoNotOptimize(out.data());
  }
}

void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({3, 32, 32, 1})->Args({32, 64, 32, 2})->Args({64, 128, 16, 2});
}

BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/omp")->Apply(conv_args);
BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/serial")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardInput<true>)->Name("conv_backward_input/omp")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardInput<false>)->Name("conv_backward_input/serial")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardParams<true>)->Name("conv_backward_params/omp")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardParams<false>)->Name("conv_backward_params/serial")->Apply(conv_args);
BENCHMARK(BM_GlobalAvgPool<true>)->Name("global_avg_pool/omp")->Args({128, 8});
BENCHMARK(BM_GlobalAvgPool<false>)->Name("global_avg_pool/serial")->Args({128, 8});
BENCHMARK(BM_Bilinear<true>)->Name("bilinear/omp")->Args({8, 32})->Args({7, 224});
BENCHMARK(BM_Bilinear<false>)->Name("bilinear/serial")->Args({8, 32})->Args({7, 224});

}  // namespace

BENCHMARK_MAIN();
