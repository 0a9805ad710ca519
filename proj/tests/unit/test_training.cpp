#include <cmath>
#include <fstream>

#include "doctest.h"
#include "test_util.hpp"
#include "uniseg/training.hpp"

using namespace uniseg;

namespace {

Taxonomy organs(const std::vector<int>& classes) {
  std::vector<ClassDef> defs;
  for (int c : classes) defs.push_back({c, "organ " + std::to_string(c), ClassKind::Organ, std::nullopt, Laterality::None, 1});
  return Taxonomy(defs);
}

ModelState small_model(const std::vector<int>& classes, std::uint64_t seed, std::vector<int> channels = {2, 4},
                       int decoder = 3) {
  ModelConfig cfg;
  cfg.backbone.channels = std::move(channels);
  cfg.backbone.decoder_channels = decoder;
  return ModelState::create(cfg, organs(classes), EmbeddingStore::one_hot(classes), seed);
}

Grid<double> to_double(const Mask& m) {
  Grid<double> g(m.dims(), m.spacing());
  for (std::size_t i = 0; i < m.size(); ++i) g[i] = m[i];
  return g;
}

// Two datasets over 8^3 volumes: A annotates {1, 2}, B annotates {3}.
std::vector<Dataset> toy_datasets(Rng& rng) {
  std::vector<Dataset> out;
  for (int d = 0; d < 2; ++d) {
    Dataset ds;
    ds.id = d == 0 ? "A" : "B";
    ds.space = LabelSpace{ds.id, d == 0 ? std::set<int>{1, 2} : std::set<int>{3}};
    for (int v = 0; v < 3; ++v) {
      TrainingVolume tv{test::random_image(Dims{8, 8, 8}, rng), {LabelMap(Dims{8, 8, 8}), ds.space}};
      for (std::size_t i = 0; i < tv.label.grid.size(); ++i) {
        const auto c = tv.label.grid.coord(i);
        if (c[0] < 3) tv.label.grid[i] = static_cast<std::uint16_t>(*ds.space.classes.begin());
        if (d == 0 && c[0] > 5) tv.label.grid[i] = 2;
        if (tv.label.grid[i]) tv.image[i] += 2.0;
      }
      ds.volumes.push_back(std::move(tv));
    }
    out.push_back(std::move(ds));
  }
  return out;
}

TrainConfig toy_config() {
  TrainConfig cfg;
  cfg.patch = 4;
  cfg.batch_size = 2;
  cfg.epochs = 10;
  cfg.warmup_epochs = 2;
  cfg.lr = 1e-2;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("warmup-cosine schedule") {
  const WarmupCosine s{4e-4, 50, 1000};
  CHECK(std::abs(s.at(0) - 4e-4 / 50) < 1e-18);
  CHECK(std::abs(s.at(49) - 4e-4) < 1e-18);
  CHECK(std::abs(s.at(50) - 4e-4) < 1e-18);
  CHECK(s.at(999) < 1e-8);
  CHECK(s.at(999) >= 0.0);
  for (std::int64_t t = 1; t < 50; ++t) CHECK(s.at(t) > s.at(t - 1));
  for (std::int64_t t = 51; t < 1000; ++t) CHECK(s.at(t) <= s.at(t - 1));
  const WarmupCosine none{1.0, 0, 10};
  CHECK(none.at(0) == 1.0);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.validate();
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.lr = NAN;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("binary targets follow the label space and descendant inclusion") {
  const Taxonomy tax({{6, "liver", ClassKind::Organ, std::nullopt, Laterality::None, 1},
                      {27, "liver tumor", ClassKind::Tumor, 6, Laterality::None, 3}});
  LabelMap lab(Dims{1, 1, 4});
  lab[0] = 6;
  lab[1] = 27;
  const LabelSpace space{"d", {6, 27}};
  const MaskTarget plain = binary_targets(lab, space);
  CHECK(plain.at(6).storage() == std::vector<double>{1, 0, 0, 0});
  const MaskTarget incl = binary_targets(lab, space, &tax);
  CHECK(incl.at(6).storage() == std::vector<double>{1, 1, 0, 0});
  CHECK(incl.at(27).storage() == std::vector<double>{0, 1, 0, 0});
  CHECK(binary_targets(lab, {"d", {27}}, &tax).size() == 1);
}

TEST_CASE("lr = 0 leaves parameters bit-identical") {
  Rng rng(1);
  ModelState model = small_model({1, 2}, 5);
  const ModelState before = model;
  const Image patch = test::random_image(Dims{4, 4, 4}, rng);
  const MaskTarget target = {{1, to_double(test::random_mask(patch.dims(), 0.3, rng))}};
  train_step(model, {patch}, {target}, toy_config(), 0.0);
  CHECK(model.backbone == before.backbone);
  CHECK(model.lpg == before.lpg);
  CHECK(model.global_step == before.global_step + 1);
}

TEST_CASE("single-class toy problem converges") {
  Rng rng(2);
  ModelState model = small_model({1}, 7, {4, 8}, 8);
  const Image patch = test::random_image(Dims{2, 2, 2}, rng);
  Mask m(patch.dims());
  m[0] = m[3] = m[5] = 1;
  const MaskTarget target = {{1, to_double(m)}};
  TrainConfig cfg;
  cfg.patch = 2;
  cfg.batch_size = 1;
  cfg.epochs = 200;
  cfg.warmup_epochs = 20;
  cfg.lr = 3e-3;
  const WarmupCosine sched = cfg.schedule();
  std::vector<double> losses;
  for (int t = 0; t < 200; ++t) losses.push_back(train_step(model, {patch}, {target}, cfg, sched.at(t)).loss);
  int increases = 0;
  for (int t = 21; t < 200; ++t) increases += losses[t] > losses[t - 1];
  CHECK(increases == 0);
  const ProbMap p = predict_patch(model, patch).at(1);
  double pm = 0, ps = 0, ms = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    pm += p[i] * m[i];
    ps += p[i];
    ms += m[i];
  }
  CHECK(2.0 * pm / (ps + ms) > 0.99);
}

TEST_CASE("per-sample gradient oracle for disjoint label sets") {
  Rng rng(3);
  const ModelState model = small_model({1, 2, 3}, 11);
  const Image a = test::random_image(Dims{4, 4, 4}, rng);
  const Image b = test::random_image(Dims{4, 4, 4}, rng);
  const MaskTarget ta = {{1, to_double(test::random_mask(a.dims(), 0.3, rng))}};
  const MaskTarget tb = {{2, to_double(test::random_mask(b.dims(), 0.3, rng))},
                         {3, to_double(test::random_mask(b.dims(), 0.5, rng))}};
  const BatchGradients bg = batch_gradients(model, {a, b}, {ta, tb}, 1);
  ModelGrads ga = ModelGrads::zeros_like(model), gb = ModelGrads::zeros_like(model);
  accumulate_sample_gradients(model, a, ta, ga, 0.5);
  accumulate_sample_gradients(model, b, tb, gb, 0.5);
  CHECK(bg.grads.lpg.at(1) == ga.lpg.at(1));
  CHECK(bg.grads.lpg.at(2) == gb.lpg.at(2));
  CHECK(bg.grads.lpg.at(3) == gb.lpg.at(3));
  CHECK(bg.annotated == std::set<int>{1, 2, 3});
  CHECK(batch_gradients(model, {a, b}, {ta, tb}, 4).grads.lpg == bg.grads.lpg);
}

TEST_CASE("zero-gradient masking over random seeds") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const ModelState model = small_model({1, 2, 3}, seed);
    const Image x = test::random_image(Dims{2, 2, 2}, rng);
    const int cls = 1 + static_cast<int>(uniform_index(rng, 3));
    ModelGrads g = ModelGrads::zeros_like(model);
    accumulate_sample_gradients(model, x, {{cls, to_double(test::random_mask(x.dims(), 0.5, rng))}}, g);
    for (const auto& [c, map] : g.lpg) {
      if (c == cls) continue;
      for (double v : map.weight) CHECK(v == 0.0);
      for (double v : map.bias) CHECK(v == 0.0);
    }
  }
}

TEST_CASE("unannotated classes keep their parameters and moments") {
  Rng rng(4);
  ModelState model = small_model({1, 2}, 13);
  const LpgMap untouched = model.lpg.at(2);
  const Image x = test::random_image(Dims{4, 4, 4}, rng);
  for (int t = 0; t < 3; ++t) train_step(model, {x}, {{{1, to_double(test::random_mask(x.dims(), 0.4, rng))}}}, toy_config(), 1e-2);
  CHECK(model.lpg.at(2) == untouched);
  CHECK(model.optimizer.lpg.count(2) == 0);
  CHECK(model.optimizer.lpg.at(1).step == 3);
}

TEST_CASE("non-finite loss raises DivergedLoss") {
  ModelState model = small_model({1}, 1);
  Image x(Dims{2, 2, 2}, {}, NAN);
  try {
    train_step(model, {x}, {{{1, Grid<double>(x.dims())}}}, toy_config(), 1e-3);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DivergedLoss);
  }
}

TEST_CASE("checkpoint round trip, guards and resume equivalence") {
  Rng rng(5);
  const auto dir = test::scratch_dir("ckpt");
  const std::vector<Dataset> data = toy_datasets(rng);
  const TrainConfig cfg = toy_config();

  ModelState full = small_model({1, 2, 3}, 17);
  TrainOptions opts;
  opts.stop_at = 5;
  train(full, data, cfg, opts);
  CHECK(full.global_step == 5);

  save_checkpoint(full, dir / "a.uckpt");
  const ModelState loaded = load_checkpoint(dir / "a.uckpt");
  CHECK(loaded == full);
  save_checkpoint(loaded, dir / "b.uckpt");
  CHECK(serialize_checkpoint(loaded) == serialize_checkpoint(full));
  std::ifstream fa(dir / "a.uckpt", std::ios::binary), fb(dir / "b.uckpt", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  CHECK(sa == sb);

  const Taxonomy other = organs({1, 2, 4});
  try {
    load_checkpoint(dir / "a.uckpt", &other);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::TaxonomyMismatch);
  }
  CHECK_NOTHROW(load_checkpoint(dir / "a.uckpt", &full.taxonomy));

  std::vector<unsigned char> bytes = serialize_checkpoint(full);
  bytes[5] = '9';
  try {
    deserialize_checkpoint(bytes);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::CheckpointVersion);
  }

  // Stop after 2 steps, reload from disk, continue to 5.
  ModelState part = small_model({1, 2, 3}, 17);
  opts.stop_at = 2;
  train(part, data, cfg, opts);
  save_checkpoint(part, dir / "part.uckpt");
  ModelState resumed = load_checkpoint(dir / "part.uckpt");
  opts.stop_at = 5;
  train(resumed, data, cfg, opts);
  CHECK(resumed == full);
  CHECK(serialize_checkpoint(resumed) == serialize_checkpoint(full));
}

TEST_CASE("draw_batch is reproducible and respects the patch size") {
  Rng data_rng(6);
  const std::vector<Dataset> data = toy_datasets(data_rng);
  TrainConfig cfg = toy_config();
  cfg.batch_size = 16;
  Rng a(9), b(9);
  const auto ba = draw_batch(data, cfg, a);
  const auto bb = draw_batch(data, cfg, b);
  std::set<std::size_t> seen;
  for (std::size_t i = 0; i < ba.size(); ++i) {
    CHECK(ba[i].image.data == bb[i].image.data);
    CHECK(ba[i].image.data.dims() == Dims{4, 4, 4});
    seen.insert(ba[i].dataset);
  }
  CHECK(seen.size() == 2);
}
