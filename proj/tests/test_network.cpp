#include <cmath>

#include <doctest.h>

#include "helpers.hpp"
#include "remotenet/encoder.hpp"
#include "remotenet/errors.hpp"
#include "remotenet/frm_head.hpp"
#include "remotenet/fusion.hpp"
#include "remotenet/gltb.hpp"
#include "remotenet/network.hpp"
#include "remotenet/verification.hpp"

using namespace remotenet;
using testing_util::max_diff;
using testing_util::random_tensor;

TEST_CASE("tiny network maps an image to per-pixel class logits") {
  auto net = make_variant<float>(default_config(Preset::tiny), Ablation::full);
  for (auto [h, w] : {std::pair{64, 64}, std::pair{96, 64}}) {
    const auto y = net.predict(random_tensor<float>({2, 3, h, w}, 1));
    CHECK(y.shape() == Shape{2, 3, h, w});
    CHECK(y.all_finite());
  }
  CHECK_THROWS_AS(net.predict(Tensor<float>({1, 3, 60, 64})), ShapeError);
  CHECK_THROWS_AS(net.predict(Tensor<float>({1, 4, 64, 64})), ShapeError);
}

TEST_CASE("encoder features sit at strides 4, 8, 16 and 32") {
  const auto cfg = default_config(Preset::tiny);
  const auto p = init_params<float>(cfg, 0);
  NoGradGuard guard;
  const auto feats = encoder_forward(Var<float>(random_tensor<float>({1, 3, 64, 96}, 2)), cfg, p);
  for (int s = 0; s < 4; ++s) {
    const int stride = 4 << s;
    CHECK(feats[s].stride_from_input == stride);
    CHECK(feats[s].tensor.shape() == Shape{1, cfg.stage_dims[s], 64 / stride, 96 / stride});
  }
}

TEST_CASE("initialization is deterministic and per-name") {
  const auto cfg = default_config(Preset::tiny);
  CHECK(init_params<float>(cfg, 5).identical(init_params<float>(cfg, 5)));
  CHECK_FALSE(init_params<float>(cfg, 5).identical(init_params<float>(cfg, 6)));
  // Names shared between variants start from the same values.
  auto full = make_variant<float>(cfg, Ablation::full, 3);
  auto no_amm = make_variant<float>(cfg, Ablation::no_amm, 3);
  const auto name = "decoder.gltb4.0.gla.global.q.weight";
  CHECK(full.params().at(name).value() == no_amm.params().at(name).value());
}

TEST_CASE("trainable counts equal the closed-form oracle for every variant") {
  for (auto preset : {Preset::tiny, Preset::loveda}) {
    for (auto v : kAllVariants) {
      auto cfg = default_config(preset);
      cfg.ablation = v;
      CHECK(declare_network(cfg).trainable_count() == param_count_oracle(cfg, v));
    }
  }
}

TEST_CASE("dropping the AMM removes exactly three 1x1 convolutions") {
  const auto cfg = default_config(Preset::tiny);
  const int64_t d = cfg.decoder_dim;
  CHECK(param_count_oracle(cfg, Ablation::full) - param_count_oracle(cfg, Ablation::no_amm) == 3 * (d * d + d));
  // The third FRM branch is one 1x1 convolution.
  CHECK(param_count_oracle(cfg, Ablation::full) - param_count_oracle(cfg, Ablation::frm_two_branch) == d * d + d);
}

TEST_CASE("a checkpointed layout must match the variant") {
  const auto cfg = default_config(Preset::tiny);
  auto params = init_params<float>(cfg, 0);
  auto other = cfg;
  other.ablation = Ablation::no_amm;
  CHECK_THROWS_AS(RemoteNet<float>(other, params), ShapeError);
  other = cfg;
  other.decoder_dim = 32;
  CHECK_THROWS_AS(RemoteNet<float>(other, params), ShapeError);
}

TEST_CASE("relative position index clamps offsets on the key grid") {
  // 2x2 queries, 2x2 keys, radius 1: row = (dy + 1) * 3 + (dx + 1).
  const auto idx = relative_position_index(2, 2, 2, 2, 1, 1);
  REQUIRE(idx.size() == 16);
  CHECK(idx[0] == 4);   // q(0,0) - k(0,0)
  CHECK(idx[1] == 3);   // q(0,0) - k(0,1): dx = -1
  CHECK(idx[2] == 1);   // q(0,0) - k(1,0): dy = -1
  CHECK(idx[15] == 4);  // q(1,1) - k(1,1)
  // Reduced keys: query row 3 maps to key row 1 at ratio 2; offsets past the radius clamp.
  const auto red = relative_position_index(4, 1, 2, 1, 2, 0);
  for (auto v : red) CHECK(v == 0);
  CHECK_THROWS_AS(relative_position_index(4, 4, 3, 2, 2, 1), ShapeError);
}

TEST_CASE("window tiling pads only maps larger than the window") {
  CHECK(window_tiling(6, 8).tile == 6);
  CHECK(window_tiling(6, 8).count == 1);
  CHECK(window_tiling(8, 8).padded == 8);
  const auto t = window_tiling(17, 8);
  CHECK(t.tile == 8);
  CHECK(t.padded == 24);
  CHECK(t.count == 3);
}

TEST_CASE("attention scale follows the configured denominator") {
  CHECK(attention_scale(64, 8, AttnScale::head_dim) == doctest::Approx(1.0 / std::sqrt(8.0)));
  CHECK(attention_scale(64, 8, AttnScale::channels) == doctest::Approx(1.0 / 8.0));
}

TEST_CASE("AMM scores lie strictly inside (0, 1)") {
  const auto cfg = default_config(Preset::tiny);
  auto p = init_params<double>(cfg, 0);
  randomize_params(p, 4);
  const Var<double> e(random_tensor<double>({2, cfg.decoder_dim, 8, 8}, 5));
  const Var<double> d(random_tensor<double>({2, cfg.decoder_dim, 8, 8}, 6));
  const auto s = amm(p, "decoder.fuse1.amm", e, d).scores.value();
  CHECK(s.shape() == Shape{2, cfg.decoder_dim, 1, 1});
  for (double v : s.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("no_fusion adds features and no_frm passes them through") {
  auto cfg = default_config(Preset::tiny);
  const Var<double> e(random_tensor<double>({1, cfg.decoder_dim, 8, 8}, 7));
  const Var<double> d(random_tensor<double>({1, cfg.decoder_dim, 8, 8}, 8));
  const ForwardContext ctx;

  cfg.ablation = Ablation::no_fusion;
  const auto sum = fuse(init_params<double>(cfg, 0), "decoder.fuse1", e, d, cfg, ctx).value();
  for (int64_t i = 0; i < sum.numel(); ++i) CHECK(sum[i] == e.value()[i] + d.value()[i]);

  cfg.ablation = Ablation::no_frm;
  CHECK(frm_forward(init_params<double>(cfg, 0), "decoder.frm", e, cfg, ctx).value() == e.value());
}

TEST_CASE("window attention with a window covering the map equals dense attention") {
  ParamLayout l;
  declare_window_mhsa(l, "w", 8, 2, 8);
  auto p = init_params<double>(l, 0);
  randomize_params(p, 9);
  const auto x = random_tensor<double>({1, 8, 5, 7}, 10);
  const auto y = window_mhsa(p, "w", Var<double>(x), 8, 2).value();
  CHECK(max_diff(y, dense_attention_oracle(p, "w", x, 2, 7)) < 1e-10);
}

TEST_CASE("a wrong attention scale breaks agreement with the dense oracle") {
  ParamLayout l;
  declare_window_mhsa(l, "w", 8, 2, 8);
  auto p = init_params<double>(l, 0);
  randomize_params(p, 11);
  const auto x = random_tensor<double>({1, 8, 4, 4}, 12);
  faults::ScopedFault fault(faults::Fault::attention_scale);
  const auto y = window_mhsa(p, "w", Var<double>(x), 8, 2).value();
  CHECK(max_diff(y, dense_attention_oracle(p, "w", x, 2, 7)) > 1e-6);
}
