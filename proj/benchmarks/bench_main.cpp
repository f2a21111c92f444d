#include <benchmark/benchmark.h>

#include <random>

#include "ignitrace/ignet.hpp"
#include "ignitrace/nncore.hpp"
#include "ignitrace/sas.hpp"
#include "ignitrace/synthgen.hpp"

using namespace ignitrace;

namespace {

nn::Tensor<float> random_tensor(nn::Shape shape, std::uint64_t seed) {
  nn::Tensor<float> t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

EventRecord bench_event() {
  return synth::render_event(
      synth::sample_spec({Atmosphere::AIR20, SizeClass::B}, synth::ConditionTable::calibrated(), 11, "bench"));
}

}  // namespace

static void BM_Conv2dForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor({64, c, 16, 16}, 1);
  const auto w = random_tensor({c, c, 3, 3}, 2);
  for (auto _ : state) {
    nn::Tape<float> t(nn::GradMode::Disabled);
    benchmark::DoNotOptimize(t.value(nn::conv2d(t, t.constant(x), t.constant(w), {1, nn::Padding::SameZero})));
  }
}
BENCHMARK(BM_Conv2dForward)->Arg(16)->Arg(32);

static void BM_Conv2dBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor({64, c, 16, 16}, 1);
  const auto w = random_tensor({c, c, 3, 3}, 2);
  const auto g = random_tensor({64, c, 16, 16}, 3);
  for (auto _ : state) {
    nn::Tape<float> t;
    const auto y = nn::conv2d(t, t.variable(x), t.variable(w), {1, nn::Padding::SameZero});
    t.backward(nn::weighted_sum(t, y, g));
    benchmark::DoNotOptimize(t.grad_if_any(0));
  }
}
BENCHMARK(BM_Conv2dBackward)->Arg(16)->Arg(32);

static void BM_ConnectedComponents(benchmark::State& state) {
  std::mt19937_64 rng(5);
  std::bernoulli_distribution on(0.4);
  sas::BinaryImage img(96, 96);
  for (auto& v : img.data()) v = on(rng) ? 1 : 0;
  for (auto _ : state) benchmark::DoNotOptimize(sas::connected_components(img, sas::Connectivity::Eight));
}
BENCHMARK(BM_ConnectedComponents);

static void BM_SasEvent(benchmark::State& state) {
  const auto rec = bench_event();
  for (auto _ : state) benchmark::DoNotOptimize(sas::sas_ignition_frame(rec));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rec.sequence.frame_count()));
}
BENCHMARK(BM_SasEvent);

static void BM_ResNetTrainStep(benchmark::State& state) {
  ignet::ModelConfig cfg;
  nn::ResNet<float> net(cfg.network(), 7);
  const auto x = random_tensor({64, 1, 32, 32}, 4);
  std::vector<int> labels(64);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 2);
  auto params = net.parameters();
  for (auto _ : state) {
    for (auto* p : params) p->grad.values().assign(p->grad.size(), 0.0f);
    nn::Tape<float> t;
    t.backward(nn::softmax_xent(t, net.forward(t, t.constant(x), nn::Mode::Train), labels).loss);
    nn::sgd_step<float>(params, {});
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_ResNetTrainStep)->Unit(benchmark::kMillisecond);

static void BM_ResNetPredict(benchmark::State& state) {
  ignet::ModelConfig cfg;
  nn::ResNet<float> net(cfg.network(), 7);
  {
    nn::Tape<float> warm;
    net.forward(warm, warm.constant(random_tensor({16, 1, 32, 32}, 8)), nn::Mode::Train);
  }
  const auto x = random_tensor({16, 1, 32, 32}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(net.predict_proba(x));
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_ResNetPredict)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
