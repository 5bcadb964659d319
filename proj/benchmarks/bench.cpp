#include <random>

#include <benchmark/benchmark.h>

#include "gz/grounding.hpp"
#include "gz/model.hpp"
#include "gz/synthetic.hpp"

using namespace gz;

namespace {

Tensor<Real> random_input(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Tensor<Real> t(std::move(shape));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

void BM_ConvForward(benchmark::State& state) {
  const int cin = static_cast<int>(state.range(0)), side = static_cast<int>(state.range(1));
  std::mt19937_64 rng(1);
  Network<Real> net;
  net.add(Layer<Real>::conv("c", random_input({cin * 2, cin, 3, 3}, 2), Tensor<Real>({cin * 2}), 1, 1));
  const Tensor<Real> x = random_input({8, cin, side, side}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(net.infer(x));
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_ConvForward)->Args({3, 64})->Args({16, 32})->Args({32, 16});

void BM_NetworkForward(benchmark::State& state) {
  const Model m = init_model(ModelSpec::conventional(10), 1);
  const Tensor<Real> x = random_input({static_cast<int>(state.range(0)), 3, 64, 64}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(m.logits(x));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_NetworkForward)->Arg(1)->Arg(32);

void BM_Grounding(benchmark::State& state) {
  const Model m = init_model(ModelSpec::conventional(10), 1);
  SyntheticSpec s;
  s.train_per_class = 1;
  s.test_per_class = 1;
  const Image img = generate(s).train[0].image;
  GroundingConfig cfg;
  cfg.method = static_cast<GroundingMethod>(state.range(0));
  cfg.rise.masks = 100;
  for (auto _ : state) benchmark::DoNotOptimize(ground(m, img, 0, cfg));
  state.SetLabel(method_name(cfg.method));
}
BENCHMARK(BM_Grounding)->DenseRange(0, 3);

}  // namespace

BENCHMARK_MAIN();
