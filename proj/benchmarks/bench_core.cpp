#include <benchmark/benchmark.h>

#include <random>

#include "gpw/model.hpp"
#include "gpw/wavelet.hpp"
#include "gpw/wformer.hpp"

using namespace gpw;
using nd::Tensor;

namespace {

// Token grid side; L = side².
void attention(benchmark::State& state, wformer::KvDownsample kv) {
  const auto side = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  nd::ParameterSet store;
  const auto p = wformer::make_attention(32, 32, kv, rng, store, "a");
  const wformer::TokenSequence y{Tensor::randn({side * side, 32}, rng), 1, side, side};
  nd::NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(wformer::attention_delta(y, p, kv));
  state.counters["L"] = static_cast<double>(side * side);
}

void BM_AttentionWavelet(benchmark::State& s) { attention(s, wformer::KvDownsample::wavelet); }
void BM_AttentionFull(benchmark::State& s) { attention(s, wformer::KvDownsample::none); }
BENCHMARK(BM_AttentionWavelet)->Arg(8)->Arg(16)->Arg(32);
BENCHMARK(BM_AttentionFull)->Arg(8)->Arg(16)->Arg(32);

void BM_Conv3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(2);
  const Tensor x = Tensor::randn({1, c, 32, 32}, rng), k = Tensor::randn({c, c, 3, 3}, rng);
  nd::NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(nd::conv2d(x, k, 1, 1));
}
BENCHMARK(BM_Conv3x3)->Arg(8)->Arg(32);

void BM_Dwt2(benchmark::State& state) {
  std::mt19937_64 rng(3);
  const Tensor x = Tensor::randn({2, 8, 64, 64}, rng);
  nd::NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(wavelet::iwt2(wavelet::dwt2(x)));
}
BENCHMARK(BM_Dwt2);

void BM_DeskForward(benchmark::State& state) {
  const Model model(ModelConfig::desk(), 7);
  std::mt19937_64 rng(4);
  const Tensor x = Tensor::uniform({1, 3, 64, 64}, rng, 0.0, 1.0);
  nd::NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(x).fused);
}
BENCHMARK(BM_DeskForward)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
