#include <benchmark/benchmark.h>

#include "mxr/gradcheck.hpp"
#include "mxr/loss.hpp"
#include "mxr/model.hpp"

using namespace mxr;

static void BM_Conv3x3(benchmark::State& state) {
  const auto c = state.range(0), s = state.range(1);
  std::mt19937_64 rng(1);
  const auto x = randn<float>({1, c, s, s}, rng), w = randn<float>({c, c, 3, 3}, rng), b = randn<float>({c}, rng);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b, 1, 1));
  state.SetItemsProcessed(state.iterations() * 2 * c * c * 9 * s * s);
}
BENCHMARK(BM_Conv3x3)->Args({32, 64})->Args({64, 64})->Args({128, 32})->Unit(benchmark::kMillisecond);

static void BM_Mish(benchmark::State& state) {
  std::mt19937_64 rng(2);
  const auto x = randn<float>({1, 64, 64, 64}, rng);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(nn::mish(x));
  state.SetItemsProcessed(state.iterations() * x.numel());
}
BENCHMARK(BM_Mish)->Unit(benchmark::kMicrosecond);

static void BM_PixelShuffle(benchmark::State& state) {
  std::mt19937_64 rng(3);
  const auto x = randn<float>({1, 128, 32, 32}, rng);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(nn::blur(nn::pixel_shuffle(x, 2)));
}
BENCHMARK(BM_PixelShuffle)->Unit(benchmark::kMicrosecond);

static void BM_Attention(benchmark::State& state) {
  nn::Rng rng(4);
  nn::SelfAttention<float> att(64, rng);
  std::mt19937_64 g(5);
  const auto x = randn<float>({1, 64, state.range(0), state.range(0)}, g);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(att.forward(x));
}
BENCHMARK(BM_Attention)->Arg(8)->Arg(16)->Unit(benchmark::kMicrosecond);

static void BM_UNetForward(benchmark::State& state) {
  ModelConfig cfg;
  cfg.encoder_depth = static_cast<int>(state.range(0));
  cfg.width = {1, 8};
  auto model = build_unet<float>(cfg, 6);
  model->eval();
  std::mt19937_64 rng(7);
  const auto x = rand_uniform<float>({1, 3, state.range(1), state.range(1)}, rng, 0.0f, 1.0f);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(model->forward(x));
}
BENCHMARK(BM_UNetForward)->Args({18, 64})->Args({18, 128})->Args({50, 64})->Unit(benchmark::kMillisecond);

static void BM_TrainStep(benchmark::State& state) {
  ModelConfig cfg;
  cfg.width = {1, 8};
  auto model = build_unet<float>(cfg, 8);
  auto net = build_loss_network<float>({31, {1, 8}}, 9);
  std::mt19937_64 rng(10);
  const auto x = rand_uniform<float>({2, 3, 64, 64}, rng, 0.0f, 1.0f);
  const auto y = rand_uniform<float>({2, 31, 64, 64}, rng, 0.0f, 1.0f);
  const LossWeights w = state.range(0) ? LossWeights{} : LossWeights::pixel_only();
  for (auto _ : state) {
    model->zero_grad();
    total_loss(model->forward(x), y, net.get(), w).total.backward();
  }
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
