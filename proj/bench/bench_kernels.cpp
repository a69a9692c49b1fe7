// OpenMP kernels against the serial reference loops on desk-CNN shapes.

#include <benchmark/benchmark.h>

#include <random>

#include "fovea/kernels.hpp"
#include "fovea/model.hpp"
#include "fovea/network.hpp"

using namespace fovea;

namespace {

Tensor filled(const Shape& shape, std::uint64_t seed) {
  Tensor t(shape);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (float& v : t.values()) v = u(rng);
  return t;
}

struct ConvCase {
  int c, h, w, f;
};

ConvCase conv_case(int i) {
  static const ConvCase cases[] = {{3, 32, 32, 16}, {16, 16, 16, 32}, {32, 8, 8, 64}};
  return cases[i];
}

void BM_ConvKernel(benchmark::State& state) {
  const ConvCase k = conv_case(static_cast<int>(state.range(0)));
  const Tensor x = filled({k.c, k.h, k.w}, 1), wt = filled({k.f, k.c, 3, 3}, 2), b = filled({k.f}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d(x, wt, b, {1, 1}));
}

void BM_ConvReference(benchmark::State& state) {
  const ConvCase k = conv_case(static_cast<int>(state.range(0)));
  const Tensor x = filled({k.c, k.h, k.w}, 1), wt = filled({k.f, k.c, 3, 3}, 2), b = filled({k.f}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(reference::conv2d(x, wt, b, {1, 1}));
}

void BM_ConvBackwardInputKernel(benchmark::State& state) {
  const ConvCase k = conv_case(static_cast<int>(state.range(0)));
  const Tensor up = filled({k.f, k.h, k.w}, 4), wt = filled({k.f, k.c, 3, 3}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d_backward_input(up, wt, {k.c, k.h, k.w}, {1, 1}));
}

void BM_ConvBackwardInputReference(benchmark::State& state) {
  const ConvCase k = conv_case(static_cast<int>(state.range(0)));
  const Tensor up = filled({k.f, k.h, k.w}, 4), wt = filled({k.f, k.c, 3, 3}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(reference::conv2d_backward_input(up, wt, {k.c, k.h, k.w}, {1, 1}));
}

void BM_DenseKernel(benchmark::State& state) {
  const Tensor x = filled({1024}, 5), wt = filled({10, 1024}, 6), b = filled({10}, 7);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::dense(x, wt, b));
}

void BM_DenseReference(benchmark::State& state) {
  const Tensor x = filled({1024}, 5), wt = filled({10, 1024}, 6), b = filled({10}, 7);
  for (auto _ : state) benchmark::DoNotOptimize(reference::dense(x, wt, b));
}

void BM_MaxpoolKernel(benchmark::State& state) {
  const Tensor x = filled({16, 32, 32}, 8);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::maxpool2(x));
}

void BM_MaxpoolReference(benchmark::State& state) {
  const Tensor x = filled({16, 32, 32}, 8);
  for (auto _ : state) benchmark::DoNotOptimize(reference::maxpool2(x));
}

void BM_ResampleKernel(benchmark::State& state) {
  const Tensor x = filled({3, 32, 32}, 9);
  const SampleWindow win{3.2, 2.7, 21.5, 19.25, true};
  for (auto _ : state) benchmark::DoNotOptimize(kernels::resample(x, win, 32, 32));
}

void BM_ResampleReference(benchmark::State& state) {
  const Tensor x = filled({3, 32, 32}, 9);
  const SampleWindow win{3.2, 2.7, 21.5, 19.25, true};
  for (auto _ : state) benchmark::DoNotOptimize(reference::resample(x, win, 32, 32));
}

void BM_DeskForwardBackward(benchmark::State& state) {
  Network net(ModelSpec::desk());
  net.initialize(11);
  const NetworkClassifier clf(net);
  Tensor x = filled({3, 32, 32}, 12);
  for (float& v : x.values()) v = (v + 1.0f) * 127.5f;
  Tensor grad;
  for (auto _ : state) benchmark::DoNotOptimize(clf.logits_and_gradient(x, 0, grad));
}

}  // namespace

BENCHMARK(BM_ConvKernel)->DenseRange(0, 2);
BENCHMARK(BM_ConvReference)->DenseRange(0, 2);
BENCHMARK(BM_ConvBackwardInputKernel)->DenseRange(0, 2);
BENCHMARK(BM_ConvBackwardInputReference)->DenseRange(0, 2);
BENCHMARK(BM_DenseKernel);
BENCHMARK(BM_DenseReference);
BENCHMARK(BM_MaxpoolKernel);
BENCHMARK(BM_MaxpoolReference);
BENCHMARK(BM_ResampleKernel);
BENCHMARK(BM_ResampleReference);
BENCHMARK(BM_DeskForwardBackward);

BENCHMARK_MAIN();
