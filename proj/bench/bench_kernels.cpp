// SPDX-License-Identifier: Apache-2.0
// Serial reference kernels vs. the OpenMP kernels on denoiser-sized inputs.
#include <benchmark/benchmark.h>

#include "echoedm/kernels.hpp"
#include "echoedm/net.hpp"
#include "echoedm/rng.hpp"

using namespace echoedm;

namespace {

Tensor<float> random_tensor(int c, int f, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t(c, f, h, w);
  for (float& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (float& x : v) x = static_cast<float>(rng.normal() * 0.1);
  return v;
}

// args: channels, frames, side
template <bool Omp>
void BM_Conv3x3Forward(benchmark::State& state) {
  const int c = state.range(0), f = state.range(1), s = state.range(2);
  auto x = random_tensor(c, f, s, s, 1);
  auto w = random_vec(static_cast<std::size_t>(c) * c * 9, 2);
  auto b = random_vec(c, 3);
  kernels::ConvShape shape{c, c, 3};
  Tensor<float> out;
  for (auto _ : state) {
    if constexpr (Omp)
      kernels::omp::conv2d_forward<float>(x, w, b, shape, out);
    else
      kernels::reference::conv2d_forward<float>(x, w, b, shape, out);
    benchmark::DoNotOptimize(out.data.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(
      2.0 * c * c * 9 * x.plane(), benchmark::Counter::kIsIterationInvariantRate,
      benchmark::Counter::kIs1000);
}

template <bool Omp>
void BM_Conv3x3Backward(benchmark::State& state) {
  const int c = state.range(0), f = state.range(1), s = state.range(2);
  auto x = random_tensor(c, f, s, s, 1);
  auto dout = random_tensor(c, f, s, s, 4);
  auto w = random_vec(static_cast<std::size_t>(c) * c * 9, 2);
  std::vector<float> dw(w.size()), db(c);
  kernels::ConvShape shape{c, c, 3};
  Tensor<float> dx;
  for (auto _ : state) {
    if constexpr (Omp)
      kernels::omp::conv2d_backward<float>(x, w, dout, shape, &dx, dw, db);
    else
      kernels::reference::conv2d_backward<float>(x, w, dout, shape, &dx, dw, db);
    benchmark::DoNotOptimize(dx.data.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(
      4.0 * c * c * 9 * x.plane(), benchmark::Counter::kIsIterationInvariantRate,
      benchmark::Counter::kIs1000);
}

template <bool Omp>
void BM_TemporalAttention(benchmark::State& state) {
  const int c = state.range(0), f = state.range(1), s = state.range(2);
  auto qkv = random_tensor(3 * c, f, s, s, 5);
  std::vector<float> bias(2 * f - 1, 0.0f);
  kernels::AttnShape shape{c, 1, kernels::AttnAxis::Temporal};
  Tensor<float> out;
  std::vector<float> probs;
  for (auto _ : state) {
    if constexpr (Omp)
      kernels::omp::attention_forward<float>(qkv, bias, shape, out, probs);
    else
      kernels::reference::attention_forward<float>(qkv, bias, shape, out, probs);
    benchmark::DoNotOptimize(out.data.data());
  }
}

void BM_UNetForwardBase(benchmark::State& state) {
  NetConfig cfg;
  cfg.base_dims = state.range(0);
  UNet<float> net(cfg);
  Rng rng(7);
  auto params = net.init_params(rng);
  Video x(cfg.in_frames, cfg.in_height, cfg.in_width);
  for (float& v : x.data) v = static_cast<float>(rng.normal());
  Conditioning cond;
  cond.ref_frame = Video(1, cfg.in_height, cfg.in_width);
  for (auto _ : state) {
    auto out = net.forward(params, x, 0.1, cond);
    benchmark::DoNotOptimize(out.data.data());
  }
}

}  // namespace

BENCHMARK(BM_Conv3x3Forward<false>)->Args({16, 8, 16});
BENCHMARK(BM_Conv3x3Forward<true>)->Args({16, 8, 16})->Args({32, 8, 8})->Args({8, 16, 32});
BENCHMARK(BM_Conv3x3Backward<false>)->Args({16, 8, 16});
BENCHMARK(BM_Conv3x3Backward<true>)->Args({16, 8, 16})->Args({32, 8, 8})->Args({8, 16, 32});
BENCHMARK(BM_TemporalAttention<false>)->Args({16, 16, 32});
BENCHMARK(BM_TemporalAttention<true>)->Args({16, 16, 32});
BENCHMARK(BM_UNetForwardBase)->Arg(16);

BENCHMARK_MAIN();
