#include "doctest.h"
#include "test_util.hpp"
#include "uniseg/run_config.hpp"

using namespace uniseg;

TEST_CASE("unknown keys are rejected with their line") {
  try {
    RunConfig::parse("lr = 1e-3\nlearning_rate = 2\n", "small.cfg");
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UnknownConfigKey);
    CHECK(std::string(e.what()).find("small.cfg:2") != std::string::npos);
  }
  RunConfig c;
  CHECK_THROWS_AS(c.set_assignment("bogus=1"), Error);
  CHECK_THROWS_AS(c.set_assignment("lr"), Error);
  CHECK_THROWS_AS(RunConfig::parse("lr 1e-3\n"), Error);
  CHECK_THROWS_AS(RunConfig::parse("lr =\n"), Error);
}

TEST_CASE("later assignments override and echo is canonical") {
  RunConfig c = RunConfig::parse("# comment\nepochs = 10\nlr = 1e-3  # trailing\nepochs=20\n");
  c.set_assignment("batch_size = 4");
  CHECK(c.values().at("epochs") == "20");
  CHECK(c.echo() == "batch_size = 4\nepochs = 20\nlr = 1e-3\n");
  CHECK(RunConfig::parse(c.echo()).values() == c.values());
}

TEST_CASE("apply fills the typed configs") {
  const RunConfig c = RunConfig::parse(
      "lr = 3e-3\nepochs = 50\nwarmup_epochs = 5\nbatch_size = 4\npatch = 16\nchannels = 8, 16\n"
      "decoder_channels = 8\nwindow = 16\noverlap = 0.25\npseudo_mode = soft\nfreeze_old_heads = yes\n"
      "min_voxels = 3\nnsd_tolerance = 2.5\n");
  TrainConfig t;
  c.apply(t);
  CHECK(t.lr == 3e-3);
  CHECK(t.total_steps() == 50);
  CHECK(t.warmup_steps() == 5);
  CHECK(t.batch_size == 4);
  CHECK(t.patch == 16);
  CHECK(t.weight_decay == 1e-5);
  ModelConfig m;
  c.apply(m);
  CHECK(m.backbone.channels == std::vector<int>{8, 16});
  WindowSpec w;
  c.apply(w);
  CHECK(w.window == 16);
  CHECK(w.stride() == 12);
  ExtensionConfig e;
  c.apply(e);
  CHECK(e.mode == PseudoMode::Soft);
  CHECK(e.freeze_old_heads);
  CHECK(e.pseudo_labels);
  CHECK(e.train.lr == 3e-3);
  DetectionRule r;
  c.apply(r);
  CHECK(r.min_voxels == 3);
  CHECK(c.nsd_tolerance(1.0) == 2.5);
  CHECK(RunConfig{}.nsd_tolerance(1.0) == 1.0);

  TrainConfig bad;
  CHECK_THROWS_AS(RunConfig::parse("batch_size = 0\n").apply(bad), Error);
  CHECK_THROWS_AS(RunConfig::parse("lr = fast\n").apply(bad), Error);
  CHECK_THROWS_AS(RunConfig::parse("pseudo_mode = maybe\n").apply(e), Error);
}
