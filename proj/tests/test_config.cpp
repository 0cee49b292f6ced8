#include <array>
#include <string>

#include <doctest.h>

#include "remotenet/config.hpp"
#include "remotenet/errors.hpp"
#include "remotenet/training.hpp"

using namespace remotenet;

TEST_CASE("presets carry MiT-B2 encoder shapes and their class counts") {
  for (auto p : {Preset::loveda, Preset::potsdam}) {
    const auto c = default_config(p);
    CHECK(c.stage_dims == std::array{64, 128, 320, 512});
    CHECK(c.stage_depths == std::array{3, 4, 6, 3});
    CHECK(c.stage_heads == std::array{1, 2, 5, 8});
    CHECK(c.sr_ratios == std::array{8, 4, 2, 1});
    CHECK(c.decoder_dim == 64);
    CHECK(validate_config(c).empty());
  }
  CHECK(default_config(Preset::loveda).num_classes == 7);
  CHECK(default_config(Preset::potsdam).num_classes == 6);
  CHECK(default_config(Preset::tiny).num_classes == 3);
  CHECK(total_stride(default_config(Preset::tiny)) == 32);
  CHECK(stage_stride(default_config(Preset::tiny), 0) == 4);
  CHECK_THROWS_AS(default_config("mit-b5"), ConfigError);
}

TEST_CASE("validation lists every violated invariant") {
  auto c = default_config(Preset::tiny);
  c.stage_heads[2] = 5;  // 24 channels are not divisible by 5 heads
  c.num_classes = 0;
  const auto errs = validate_config(c);
  CHECK(errs.size() >= 2);
  CHECK_THROWS_AS(require_valid(c), ConfigError);
  c = default_config(Preset::tiny);
  c.patch_kernels[1] = 1;  // kernel smaller than stride
  CHECK_FALSE(validate_config(c).empty());
}

TEST_CASE("enum names round-trip") {
  for (auto a : {Ablation::full, Ablation::no_amm, Ablation::frm_two_branch, Ablation::no_frm, Ablation::no_fusion})
    CHECK(parse_ablation(to_string(a)) == a);
  CHECK(parse_attn_scale("channels") == AttnScale::channels);
  CHECK(parse_amm_mode(to_string(AmmMode::per_branch_cross)) == AmmMode::per_branch_cross);
  CHECK_THROWS_AS(parse_ablation("no_decoder"), ConfigError);
  CHECK_THROWS_AS(parse_dataset("cityscapes"), ConfigError);
}

TEST_CASE("run config text round-trips and rejects unknown keys") {
  for (auto d : {DatasetKind::loveda, DatasetKind::potsdam, DatasetKind::toy}) {
    RunConfig rc = protocol_run_config(d);
    rc.model.ablation = Ablation::no_amm;
    rc.train.seed = 42;
    CHECK(parse_run_config(to_text(rc)) == rc);
  }
  CHECK_THROWS_AS(parse_run_config("[train]\nlearning_rate = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[optimizer]\nlr = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[train]\nlr = fast\n"), ConfigError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/run.cfg"), ConfigError);
}

TEST_CASE("preset applies before explicit model keys") {
  const auto rc = parse_run_config("[model]\npreset = potsdam\nwindow_size = 16\n");
  CHECK(rc.model.num_classes == 6);
  CHECK(rc.model.window_size == 16);
  CHECK(rc.preset == "potsdam");
}

TEST_CASE("protocol configs carry the reference training schedule") {
  const auto l = protocol_run_config(DatasetKind::loveda);
  CHECK(l.train.lr == 6e-5);
  CHECK(l.train.epochs == 50);
  CHECK(l.train.batch_size == 8);
  CHECK(l.data.crop == 512);
  CHECK(l.train.weight_decay == 0.01);
  const auto p = protocol_run_config(DatasetKind::potsdam);
  CHECK(p.train.lr == 6e-4);
  CHECK(p.train.epochs == 55);
  CHECK(p.train.batch_size == 8);
  CHECK(p.data.crop == 768);
  CHECK(p.train.weight_decay == 0.01);
}

TEST_CASE("describe_run echoes every resolved value") {
  const auto text = describe_run(protocol_run_config(DatasetKind::potsdam));
  for (const char* line : {"lr = 0.0006\n", "epochs = 55\n", "batch_size = 8\n", "crop = 768\n",
                           "weight_decay = 0.01\n", "ablation = full\n"})
    CHECK(text.find(line) != std::string::npos);
}
