#include <random>

#include <benchmark/benchmark.h>

#include "remotenet/evaluation.hpp"
#include "remotenet/gltb.hpp"
#include "remotenet/network.hpp"
#include "remotenet/training.hpp"

using namespace remotenet;

namespace {

Tensor<float> noise(Shape shape, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> n;
  Tensor<float> t(std::move(shape));
  for (auto& v : t.values()) v = n(rng);
  return t;
}

void BM_Conv3x3(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const Var<float> x(noise({1, c, 64, 64}, 1)), w(noise({c, c, 3, 3}, 2)), b(noise({c}, 3));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, b, {1, 1, 1}).value().data());
  state.SetItemsProcessed(state.iterations() * int64_t{64} * 64 * c * c * 9);
}
BENCHMARK(BM_Conv3x3)->Arg(16)->Arg(64);

void BM_WindowAttention(benchmark::State& state) {
  const int window = static_cast<int>(state.range(0));
  ParamLayout l;
  declare_window_mhsa(l, "w", 64, 8, window);
  const auto p = init_params<float>(l, 0);
  const Var<float> x(noise({1, 64, 64, 64}, 4));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(window_mhsa(p, "w", x, window, 8).value().data());
}
BENCHMARK(BM_WindowAttention)->Arg(8)->Arg(16);

void BM_TinyForward(benchmark::State& state) {
  auto net = make_variant<float>(default_config(Preset::tiny), Ablation::full);
  const auto x = noise({1, 3, 128, 128}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(net.predict(x).data());
}
BENCHMARK(BM_TinyForward);

void BM_TinyTrainStep(benchmark::State& state) {
  auto net = make_variant<float>(default_config(Preset::tiny), Ablation::full);
  net.set_mode(Mode::train);
  auto st = make_optim_state(net.params(), TrainOptions{});
  const auto x = noise({4, 3, 64, 64}, 6);
  LabelMap y({4, 64, 64}, 1);
  for (auto _ : state) {
    net.params().zero_grad();
    const auto loss = cross_entropy_loss(net.forward(Var<float>(x)), y);
    backward(loss);
    adamw_step(net.params(), st, 1e-4);
  }
}
BENCHMARK(BM_TinyTrainStep);

void BM_ConfusionUpdate(benchmark::State& state) {
  std::mt19937 rng(7);
  LabelMap a({512, 512}), b({512, 512});
  for (int64_t i = 0; i < a.numel(); ++i) {
    a[i] = static_cast<int32_t>(rng() % 7);
    b[i] = static_cast<int32_t>(rng() % 8 == 0 ? kIgnoreIndex : rng() % 7);
  }
  ConfusionMatrix cm(7);
  for (auto _ : state) cm.update(a, b);
  state.SetItemsProcessed(state.iterations() * a.numel());
}
BENCHMARK(BM_ConfusionUpdate);

}  // namespace

BENCHMARK_MAIN();
