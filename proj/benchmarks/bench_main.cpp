// Microbenchmarks for the hot paths: convolution, the backbone forward pass,
// one training step, sliding-window inference, connected components and NSD.

#include <benchmark/benchmark.h>

#include "uniseg/backbone.hpp"
#include "uniseg/inference.hpp"
#include "uniseg/metrics.hpp"
#include "uniseg/training.hpp"

using namespace uniseg;

namespace {

Tensor4 random_tensor(Shape4 s, Rng& rng) {
  Tensor4 t(s);
  for (double& v : t.values()) v = normal01(rng);
  return t;
}

Image random_image(Dims d, Rng& rng) {
  Image im(d);
  for (double& v : im.storage()) v = normal01(rng);
  return im;
}

Mask ball(Dims d, double r, double cz, double cy, double cx) {
  Mask m(d);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto c = m.coord(i);
    const double z = c[0] - cz, y = c[1] - cy, x = c[2] - cx;
    m[i] = z * z + y * y + x * x <= r * r ? 1 : 0;
  }
  return m;
}

ModelState bench_model(const std::vector<int>& classes) {
  ModelConfig cfg;
  cfg.backbone.channels = {8, 16};
  cfg.backbone.decoder_channels = 8;
  std::vector<ClassDef> defs;
  for (int c : classes) defs.push_back({c, "c" + std::to_string(c), ClassKind::Organ, std::nullopt, Laterality::None, 1});
  return ModelState::create(cfg, Taxonomy(defs), EmbeddingStore::one_hot(classes), 1);
}

void BM_Conv3dForward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(1);
  nn::Conv3d conv(8, 8, 3, 1, 1);
  conv.init_he(rng);
  const Tensor4 x = random_tensor({8, n, n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(nn::conv3d_forward(x, conv));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * n * n);
}
BENCHMARK(BM_Conv3dForward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Conv3dBackward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(2);
  nn::Conv3d conv(8, 8, 3, 1, 1);
  conv.init_he(rng);
  const Tensor4 x = random_tensor({8, n, n, n}, rng);
  const Tensor4 g = random_tensor(conv.output_shape(x.shape()), rng);
  nn::Conv3d grads = conv;
  Tensor4 gx(x.shape());
  for (auto _ : state) {
    grads.zero();
    nn::conv3d_backward(x, conv, g, grads, &gx);
    benchmark::DoNotOptimize(gx);
  }
}
BENCHMARK(BM_Conv3dBackward)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_BackboneForward(benchmark::State& state) {
  Rng rng(3);
  BackboneConfig cfg;
  cfg.channels = {8, 16};
  cfg.decoder_channels = 8;
  const BackboneParams p = BackboneParams::init(cfg, rng);
  const Tensor4 x = random_tensor({1, 16, 16, 16}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(backbone_forward(x, p));
}
BENCHMARK(BM_BackboneForward)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const int threads = static_cast<int>(state.range(0));
  Rng rng(4);
  ModelState model = bench_model({1, 6, 11, 27});
  std::vector<Image> patches;
  std::vector<MaskTarget> targets;
  for (int b = 0; b < 4; ++b) {
    patches.push_back(random_image(Dims{16, 16, 16}, rng));
    Grid<double> t(Dims{16, 16, 16});
    const Mask m = ball(t.dims(), 5, 8, 8, 8);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = m[i];
    targets.push_back({{b % 2 ? 27 : 6, t}});
  }
  TrainConfig cfg;
  cfg.threads = threads;
  for (auto _ : state) benchmark::DoNotOptimize(train_step(model, patches, targets, cfg, 1e-4));
}
BENCHMARK(BM_TrainStep)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_SlidingWindow(benchmark::State& state) {
  const int threads = static_cast<int>(state.range(0));
  Rng rng(5);
  const ModelState model = bench_model({1, 6, 11, 27});
  const Image x = random_image(Dims{32, 32, 32}, rng);
  WindowSpec w;
  w.window = 16;
  for (auto _ : state) benchmark::DoNotOptimize(sliding_window(x, model, w, threads));
}
BENCHMARK(BM_SlidingWindow)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_LargestComponent(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(6);
  Mask m(Dims{n, n, n});
  for (auto& v : m.storage()) v = uniform01(rng) < 0.3 ? 1 : 0;
  for (auto _ : state) benchmark::DoNotOptimize(largest_component(m));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m.size()));
}
BENCHMARK(BM_LargestComponent)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_Nsd(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Dims d{n, n, n};
  const Mask a = ball(d, n / 3.0, n / 2.0, n / 2.0, n / 2.0);
  const Mask b = ball(d, n / 3.0 + 1, n / 2.0 + 1, n / 2.0, n / 2.0 - 1);
  for (auto _ : state) benchmark::DoNotOptimize(nsd(a, b, 1.5));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(a.size()));
}
BENCHMARK(BM_Nsd)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
