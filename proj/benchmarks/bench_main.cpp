#include <benchmark/benchmark.h>

#include <numeric>
#include <vector>

#include "mit/infusion.h"
#include "mit/ops.h"
#include "mit/rng.h"
#include "mit/transformer.h"

using namespace mit;

namespace {

std::vector<int> prompt(int n, int vocab) {
  std::vector<int> tokens(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) tokens[static_cast<std::size_t>(i)] = (i * 37 + 11) % vocab;
  return tokens;
}

LMConfig wide_toy() {
  LMConfig lm = LMConfig::toy();
  lm.max_seq = 512;
  return lm;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  SplitMix64 rng(1);
  const Tensor a = random_normal({n, n}, 1.0, rng), b = random_normal({n, n}, 1.0, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(32, 256);

void BM_Softmax(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  SplitMix64 rng(2);
  const Tensor a = random_normal({4, n, n}, 1.0, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(softmax(a));
}
BENCHMARK(BM_Softmax)->RangeMultiplier(2)->Range(32, 256);

void BM_ForwardBase(benchmark::State& state) {
  const LMConfig lm = wide_toy();
  const MicroLM model = MicroLM::random(lm, 0);
  const auto tokens = prompt(static_cast<int>(state.range(0)), lm.vocab);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(tokens));
}
BENCHMARK(BM_ForwardBase)->RangeMultiplier(2)->Range(32, 256)->Unit(benchmark::kMillisecond);

void BM_ForwardInfused(benchmark::State& state) {
  const LMConfig lm = wide_toy();
  const MicroLM model = MicroLM::random(lm, 0);
  MiTConfig cfg;
  cfg.infused_layers = {3, 5, 7};
  cfg.d_modal = 32;
  InfusionParams params = InfusionParams::init(cfg, lm);
  params.perturb(0.05, 3);
  SplitMix64 rng(4);
  const InfusionHook hook(params, random_normal({static_cast<std::size_t>(cfg.d_modal)}, 1.0, rng), lm.n_heads);
  const auto tokens = prompt(static_cast<int>(state.range(0)), lm.vocab);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(tokens, &hook));
}
BENCHMARK(BM_ForwardInfused)->RangeMultiplier(2)->Range(32, 256)->Unit(benchmark::kMillisecond);

// Prefix conditioning with as many extra tokens as prompt tokens.
void BM_ForwardPrefix(benchmark::State& state) {
  const LMConfig lm = wide_toy();
  const MicroLM model = MicroLM::random(lm, 0);
  const auto tokens = prompt(2 * static_cast<int>(state.range(0)), lm.vocab);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(tokens));
}
BENCHMARK(BM_ForwardPrefix)->RangeMultiplier(2)->Range(32, 256)->Unit(benchmark::kMillisecond);

void BM_ForwardBackwardInfused(benchmark::State& state) {
  const LMConfig lm = LMConfig::toy();
  const MicroLM model = MicroLM::random(lm, 0);
  MiTConfig cfg;
  cfg.infused_layers = {3, 5, 7};
  cfg.d_modal = 32;
  InfusionParams params = InfusionParams::init(cfg, lm);
  params.perturb(0.05, 3);
  SplitMix64 rng(5);
  const Tensor modal = random_normal({static_cast<std::size_t>(cfg.d_modal)}, 1.0, rng, true);
  const auto tokens = prompt(static_cast<int>(state.range(0)), lm.vocab);
  for (auto _ : state) {
    const InfusionHook hook(params, modal, lm.n_heads);
    const ForwardResult r = model.forward(tokens, &hook);
    sum(r.hidden).backward();
  }
}
BENCHMARK(BM_ForwardBackwardInfused)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
