#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <doctest.h>

#include "remotenet/errors.hpp"
#include "remotenet/training.hpp"

namespace fs = std::filesystem;
using namespace remotenet;

namespace {

ParamStore<float> single(float value, float grad) {
  ParamStore<float> p;
  p.add("w", ParamKind::weight, Tensor<float>({1}, value));
  p.at("w").node()->grad = Tensor<float>({1}, grad);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("remotenet_test_" + name);
  fs::remove_all(p);
  return p;
}

RunConfig toy_run(int64_t max_steps) {
  RunConfig rc = protocol_run_config(DatasetKind::toy);
  rc.train.max_steps = static_cast<int>(max_steps);
  rc.data.toy_count = 8;
  rc.data.toy_size = 32;
  rc.data.crop = 32;
  rc.data.hflip = true;
  rc.data.scale_min = 0.75;
  rc.data.scale_max = 1.25;
  rc.eval.window = 32;
  rc.eval.stride = 32;
  return rc;
}

TrainRequest toy_request(int64_t max_steps) {
  TrainRequest req;
  req.cfg = toy_run(max_steps);
  req.train_set = toy_dataset(8, 32, 3, 0);
  return req;
}

}  // namespace

TEST_CASE("AdamW: first step moves by lr after decoupled decay") {
  TrainOptions opt;
  opt.lr = 0.1;
  opt.weight_decay = 0.01;
  auto p = single(1.0f, 0.5f);
  auto st = make_optim_state(p, opt);
  adamw_step(p, st, 0.1);
  // 1 * (1 - 0.1 * 0.01) - 0.1 * m_hat / (sqrt(v_hat) + eps), m_hat / sqrt(v_hat) = 1
  CHECK(p.at("w").value()[0] == doctest::Approx(0.899).epsilon(1e-6));
  CHECK(st.t == 1);
}

TEST_CASE("AdamW: a zero gradient only decays") {
  TrainOptions opt;
  auto p = single(2.0f, 0.0f);
  auto st = make_optim_state(p, opt);
  adamw_step(p, st, 0.5);
  CHECK(p.at("w").value()[0] == doctest::Approx(2.0 * (1 - 0.5 * 0.01)).epsilon(1e-7));
}

TEST_CASE("AdamW: with both betas zero every step is a sign step") {
  TrainOptions opt;
  opt.beta1 = 0;
  opt.beta2 = 0;
  opt.weight_decay = 0;
  auto p = single(0.0f, -3.0f);
  auto st = make_optim_state(p, opt);
  adamw_step(p, st, 0.25);
  CHECK(p.at("w").value()[0] == doctest::Approx(0.25).epsilon(1e-6));
  p.at("w").node()->grad = Tensor<float>({1}, 7.0f);
  adamw_step(p, st, 0.25);
  CHECK(p.at("w").value()[0] == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("AdamW refuses non-finite gradients before touching anything") {
  ParamStore<float> p;
  p.add("a", ParamKind::weight, Tensor<float>({2}, 1.0f));
  p.add("b", ParamKind::weight, Tensor<float>({2}, 1.0f));
  p.at("a").node()->grad = Tensor<float>({2}, 1.0f);
  p.at("b").node()->grad = Tensor<float>({2}, std::nanf(""));
  auto st = make_optim_state(p, TrainOptions{});
  try {
    adamw_step(p, st, 0.1);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("parameter b") != std::string::npos);
  }
  CHECK(p.at("a").value()[0] == 1.0f);
  CHECK(st.t == 0);
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 100, 6e-5) == doctest::Approx(6e-5));
  CHECK(cosine_lr(50, 100, 6e-5) == doctest::Approx(3e-5));
  CHECK(cosine_lr(100, 100, 6e-5, 1e-6) == 1e-6);
  double prev = 1;
  for (int t = 0; t <= 100; ++t) {
    const double lr = cosine_lr(t, 100, 6e-4);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK_THROWS_AS(cosine_lr(0, 0, 1e-3), ConfigError);
  CHECK_THROWS_AS(cosine_lr(101, 100, 1e-3), ConfigError);
}

TEST_CASE("gradient clipping rescales to the requested norm") {
  ParamStore<float> p;
  p.add("a", ParamKind::weight, Tensor<float>({2}, 0.0f));
  p.at("a").node()->grad = Tensor<float>({2}, std::vector<float>{3.0f, 4.0f});
  CHECK(clip_grad_norm(p, 1.0) == doctest::Approx(5.0));
  CHECK(p.at("a").grad()[0] == doctest::Approx(0.6f));
}

TEST_CASE("checkpoints round-trip byte for byte") {
  const auto dir = fresh_dir("ckpt");
  Checkpoint c;
  c.cfg = protocol_run_config(DatasetKind::toy);
  c.params = init_params<float>(c.cfg.model, 3);
  c.optim = make_optim_state(c.params, c.cfg.train);
  c.optim.t = 7;
  c.optim.m.begin()->second[0] = 0.125f;
  c.state = {2, 7, 0.5, 3};
  save_checkpoint((dir / "a").string(), c);
  const Checkpoint back = load_checkpoint((dir / "a").string());
  CHECK(back.cfg == c.cfg);
  CHECK(back.params.identical(c.params));
  CHECK(back.optim == c.optim);
  CHECK(back.state == c.state);
  save_checkpoint((dir / "b").string(), back);
  for (const char* f : {"manifest", "tensors.bin", "meta"}) CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));

  // Overwriting goes through a temporary directory and leaves nothing behind.
  save_checkpoint((dir / "a").string(), back);
  CHECK_FALSE(fs::exists(dir / "a.tmp"));
  CHECK_FALSE(fs::exists(dir / "a.old"));

  SUBCASE("tampered shape") {
    auto manifest = slurp(dir / "a/manifest");
    const auto pos = manifest.find("8,3,7,7");
    REQUIRE(pos != std::string::npos);
    manifest.replace(pos, 7, "3,8,7,7");
    std::ofstream(dir / "a/manifest", std::ios::binary) << manifest;
    CHECK_THROWS_AS(load_checkpoint((dir / "a").string()), CheckpointError);
  }
  SUBCASE("flipped payload byte") {
    auto bytes = slurp(dir / "a/tensors.bin");
    bytes[100] = static_cast<char>(bytes[100] ^ 0x40);
    std::ofstream(dir / "a/tensors.bin", std::ios::binary) << bytes;
    CHECK_THROWS_AS(load_checkpoint((dir / "a").string()), CheckpointError);
  }
  SUBCASE("missing file") {
    fs::remove(dir / "a/meta");
    CHECK_THROWS_AS(load_checkpoint((dir / "a").string()), CheckpointError);
  }
  SUBCASE("restoring into another variant") {
    auto other = c.cfg.model;
    other.ablation = Ablation::no_frm;
    CHECK_THROWS_AS(restore_network(back, other), ShapeError);
    CHECK_NOTHROW(restore_network(back, c.cfg.model));
  }
  fs::remove_all(dir);
}

TEST_CASE("fixed-seed training is bit-reproducible") {
  const auto a = train(toy_request(6));
  const auto b = train(toy_request(6));
  CHECK(a.finished);
  REQUIRE(a.losses.size() == 6);
  CHECK(a.losses == b.losses);
  CHECK(a.last.params.identical(b.last.params));
  CHECK(a.last.optim == b.last.optim);
}

TEST_CASE("worker threads do not change the trajectory") {
  auto req = toy_request(4);
  req.cfg.data.workers = 3;
  CHECK(train(req).losses == train(toy_request(4)).losses);
}

TEST_CASE("a resumed run continues the same loss trajectory") {
  const auto dir = fresh_dir("resume");
  const auto straight = train(toy_request(6));

  auto first = toy_request(6);
  first.out_dir = dir.string();
  first.stop_after = 3;  // mid-epoch: 2 steps per epoch of 4
  const auto part1 = train(first);
  CHECK_FALSE(part1.finished);
  REQUIRE(part1.losses.size() == 3);

  auto second = toy_request(6);
  second.resume = load_checkpoint((dir / "last").string());
  CHECK(second.resume->state.step == 3);
  const auto part2 = train(second);
  CHECK(part2.finished);

  std::vector<double> joined = part1.losses;
  joined.insert(joined.end(), part2.losses.begin(), part2.losses.end());
  CHECK(joined == straight.losses);
  CHECK(part2.last.params.identical(straight.last.params));
  CHECK(fs::exists(dir / "metrics.tsv"));
  fs::remove_all(dir);
}

TEST_CASE("a non-finite loss stops training and keeps a diverged snapshot") {
  const auto dir = fresh_dir("diverge");
  auto req = toy_request(3);
  req.out_dir = dir.string();
  Checkpoint bad;
  bad.cfg = req.cfg;
  bad.params = init_params<float>(req.cfg.model, 0);
  bad.optim = make_optim_state(bad.params, req.cfg.train);
  bad.params.at("head.cls.weight").mutable_value()[0] = 1e38f;
  bad.params.at("head.cls.weight").mutable_value()[1] = -1e38f;
  req.resume = bad;
  CHECK_THROWS_AS(train(req), DivergenceError);
  CHECK(fs::exists(dir / "diverged" / "manifest"));
  fs::remove_all(dir);
}

TEST_CASE("steps per epoch rounds up partial batches") {
  CHECK(steps_per_epoch(8, 4) == 2);
  CHECK(steps_per_epoch(9, 4) == 3);
}
