// Parallel (im2col + GEMM) kernels against the serial reference loops.
//
//   bench_kernels --benchmark_filter=forward

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "mpsn/kernels.hpp"

namespace {

using mpsn::kernels::ConvShape;

struct Buffers {
  std::vector<double> input, weight, bias, output;

  explicit Buffers(const ConvShape& s)
      : input(s.input_size()), weight(s.weight_size()), bias(s.out_channels), output(s.output_size()) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    for (auto* v : {&input, &weight, &bias}) {
      for (double& x : *v) x = d(rng);
    }
  }
};

// {in_channels, size, out_channels, kernel, stride, groups}
ConvShape shape_of(const benchmark::State& state) {
  ConvShape s;
  s.in_channels = static_cast<std::size_t>(state.range(0));
  s.in_h = s.in_w = static_cast<std::size_t>(state.range(1));
  s.out_channels = static_cast<std::size_t>(state.range(2));
  s.kernel = static_cast<std::size_t>(state.range(3));
  s.stride = static_cast<std::size_t>(state.range(4));
  s.groups = static_cast<std::size_t>(state.range(5));
  s.pad = s.kernel / 2;
  return s;
}

void set_flops(benchmark::State& state, const ConvShape& s) {
  const double macs = double(s.output_size()) * double(s.in_per_group() * s.kernel * s.kernel);
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * macs, benchmark::Counter::kIsIterationInvariantRate,
                         benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_conv_forward(benchmark::State& state) {
  const ConvShape s = shape_of(state);
  Buffers b(s);
  for (auto _ : state) {
    if constexpr (Parallel) mpsn::kernels::conv2d_forward(s, b.input, b.weight, b.bias, b.output);
    else mpsn::kernels::reference::conv2d_forward(s, b.input, b.weight, b.bias, b.output);
    benchmark::DoNotOptimize(b.output.data());
  }
  set_flops(state, s);
}

template <bool Parallel>
void BM_conv_backward(benchmark::State& state) {
  const ConvShape s = shape_of(state);
  Buffers b(s);
  std::vector<double> grad_in(s.input_size()), grad_w(s.weight_size()), grad_b(s.out_channels);
  for (auto _ : state) {
    if constexpr (Parallel) {
      mpsn::kernels::conv2d_backward_input(s, b.output, b.weight, grad_in);
      mpsn::kernels::conv2d_backward_params(s, b.input, b.output, grad_w, grad_b);
    } else {
      mpsn::kernels::reference::conv2d_backward_input(s, b.output, b.weight, grad_in);
      mpsn::kernels::reference::conv2d_backward_params(s, b.input, b.output, grad_w, grad_b);
    }
    benchmark::DoNotOptimize(grad_w.data());
  }
  set_flops(state, s);
}

void conv_shapes(benchmark::internal::Benchmark* b) {
  b->ArgNames({"cin", "hw", "cout", "k", "s", "g"});
  b->Args({3, 128, 16, 3, 1, 1});
  b->Args({32, 64, 64, 3, 1, 1});
  b->Args({64, 32, 128, 3, 2, 1});
  b->Args({96, 32, 96, 3, 1, 96});  // depthwise
  b->Args({96, 32, 32, 1, 1, 1});   // pointwise
  b->Unit(benchmark::kMillisecond);
}

BENCHMARK(BM_conv_forward<false>)->Name("conv_forward/reference")->Apply(conv_shapes);
BENCHMARK(BM_conv_forward<true>)->Name("conv_forward/parallel")->Apply(conv_shapes);
BENCHMARK(BM_conv_backward<false>)->Name("conv_backward/reference")->Apply(conv_shapes);
BENCHMARK(BM_conv_backward<true>)->Name("conv_backward/parallel")->Apply(conv_shapes);

template <bool Parallel>
void BM_maxpool(benchmark::State& state) {
  const mpsn::kernels::PoolShape s{64, 128, 128, 2, 2, 0};
  std::vector<double> in(s.channels * s.in_h * s.in_w, 0.5), out(s.output_size());
  std::vector<std::size_t> argmax(s.output_size());
  for (std::size_t i = 0; i < in.size(); ++i) in[i] = double(i % 97);
  for (auto _ : state) {
    if constexpr (Parallel) mpsn::kernels::maxpool_forward(s, in, out, argmax);
    else mpsn::kernels::reference::maxpool_forward(s, in, out, argmax);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_maxpool<false>)->Name("maxpool/reference")->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_maxpool<true>)->Name("maxpool/parallel")->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
