// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.
// Details of each check go to stderr, the summary lines to stdout.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <regex>
#include <sstream>
#include <string>

#include "remotenet/evaluation.hpp"
#include "remotenet/training.hpp"
#include "remotenet/verification.hpp"

namespace fs = std::filesystem;
using namespace remotenet;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    std::cerr << (ok ? "  ok   " : "  FAIL ") << what << '\n';
    if (!ok) {
      if (pass) detail = what;
      pass = false;
    }
  }
};

Outcome from_suite(const SuiteResult& r) {
  Outcome o;
  for (const auto& line : r.lines) o.require(line.rfind("PASS", 0) == 0, line.substr(5));
  o.require(r.pass, "suite " + r.name);
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- 7: TTA symmetry ----------------------------------------------------------

Outcome tta_symmetry() {
  Outcome o;
  auto net = make_variant<float>(default_config(Preset::tiny), Ablation::full, 0);
  auto params = net.params().cast<double>();
  randomize_params(params, 7);
  net = RemoteNet<float>(net.config(), params.cast<float>());
  const LogitFn f = padded_logits(net);

  std::mt19937 rng(1);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  Tensor<float> x({1, 3, 64, 64});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 64; ++i)
      for (int j = 0; j < 32; ++j) x.at(0, c, i, j) = x.at(0, c, i, 63 - j) = u(rng);

  TtaSpec flips;
  flips.transforms = {TtaTransform::identity, TtaTransform::hflip};
  const auto p = predict_probs(f, x, flips);
  const auto mirrored = apply_transform(p, TtaTransform::hflip, false);
  double asym = 0;
  for (int64_t i = 0; i < p.numel(); ++i) asym = std::max(asym, static_cast<double>(std::abs(p[i] - mirrored[i])));
  o.require(asym <= 1e-5, "{identity,hflip} softmax map is hflip-symmetric (max diff " + std::to_string(asym) + ")");

  const auto plain = f(x);
  const auto ident = predict_probs(f, x, TtaSpec{});
  o.require(argmax_labels(ident) == argmax_labels(plain), "{identity} labels equal plain inference");
  const int64_t plane = 64 * 64, k = plain.dim(1);
  double worst = 0;
  for (int64_t i = 0; i < plane; ++i) {
    double z = 0, mx = plain[i];
    for (int64_t c = 1; c < k; ++c) mx = std::max(mx, static_cast<double>(plain[c * plane + i]));
    for (int64_t c = 0; c < k; ++c) z += std::exp(plain[c * plane + i] - mx);
    for (int64_t c = 0; c < k; ++c)
      worst = std::max(worst, std::abs(ident[c * plane + i] - std::exp(plain[c * plane + i] - mx) / z));
  }
  o.require(worst <= 1e-6, "{identity} probabilities equal softmax of plain logits (max diff " +
                                std::to_string(worst) + ")");
  return o;
}

// ---- 8: determinism and persistence -------------------------------------------

TrainRequest toy_request(int64_t steps) {
  TrainRequest req;
  req.cfg = protocol_run_config(DatasetKind::toy);
  req.cfg.train.max_steps = static_cast<int>(steps);
  req.cfg.data.toy_count = 8;
  req.cfg.data.hflip = true;
  req.cfg.data.scale_min = 0.75;
  req.cfg.data.scale_max = 1.25;
  req.train_set = toy_dataset(8, 64, 3, 0);
  return req;
}

Outcome determinism() {
  Outcome o;
  const auto dir = fs::temp_directory_path() / "remotenet_acceptance";
  fs::remove_all(dir);

  const auto a = train(toy_request(12));
  const auto b = train(toy_request(12));
  o.require(a.losses == b.losses && a.last.params.identical(b.last.params) && a.last.optim == b.last.optim,
            "two fixed-seed single-worker runs are bit-identical (12 steps)");

  save_checkpoint((dir / "a").string(), a.last);
  save_checkpoint((dir / "b").string(), load_checkpoint((dir / "a").string()));
  bool same = true;
  for (const char* f : {"manifest", "tensors.bin", "meta"}) same = same && slurp(dir / "a" / f) == slurp(dir / "b" / f);
  o.require(same, "checkpoint save -> load -> save is byte-identical");

  auto first = toy_request(12);
  first.out_dir = (dir / "run").string();
  first.stop_after = 5;
  const auto part1 = train(first);
  auto second = toy_request(12);
  second.resume = load_checkpoint((dir / "run" / "last").string());
  const auto part2 = train(second);
  auto joined = part1.losses;
  joined.insert(joined.end(), part2.losses.begin(), part2.losses.end());
  o.require(joined == a.losses && part2.last.params.identical(a.last.params),
            "run stopped at step 5 and resumed reproduces the uninterrupted loss trajectory");
  fs::remove_all(dir);
  return o;
}

// ---- 9: protocol echo ------------------------------------------------------------

Outcome protocol_echo() {
  Outcome o;
  struct Expect {
    DatasetKind d;
    double lr;
    int epochs, batch, crop;
    double wd;
  };
  for (const Expect e : {Expect{DatasetKind::loveda, 6e-5, 50, 8, 512, 0.01},
                         Expect{DatasetKind::potsdam, 6e-4, 55, 8, 768, 0.01}}) {
    const std::string log = describe_run(protocol_run_config(e.d));
    std::map<std::string, std::string> kv;
    const std::regex line(R"(^(\w+) = (.*)$)", std::regex::multiline);
    for (auto it = std::sregex_iterator(log.begin(), log.end(), line); it != std::sregex_iterator(); ++it)
      kv.emplace((*it)[1], (*it)[2]);
    const std::string name = to_string(e.d);
    o.require(std::stod(kv["lr"]) == e.lr, name + " lr " + kv["lr"]);
    o.require(std::stoi(kv["epochs"]) == e.epochs, name + " epochs " + kv["epochs"]);
    o.require(std::stoi(kv["batch_size"]) == e.batch, name + " batch_size " + kv["batch_size"]);
    o.require(std::stoi(kv["crop"]) == e.crop, name + " crop " + kv["crop"]);
    o.require(std::stod(kv["weight_decay"]) == e.wd, name + " weight_decay " + kv["weight_decay"]);
  }
  return o;
}

}  // namespace

int main() {
  int failures = 0;
  const auto report = [&](int n, const std::string& title, const std::function<Outcome()>& run) {
    std::cerr << "[" << n << "] " << title << '\n';
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %d %s (%.1f s)%s%s\n", o.pass ? "PASS" : "FAIL", n, title.c_str(), secs, o.pass ? "" : ": ",
                o.pass ? "" : o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
  };

  SuiteResult gradients;
  report(1, "shape suite: presets give input-sized logits, encoder strides 4..32 with MiT-B2 widths",
         [] { return from_suite(run_suite("shapes")); });
  report(2, "gradient suite: grad_check tol 1e-4, h 1e-5, double, five variants, >= 8 coords per parameter", [&] {
    gradients = run_suite("gradients");
    return from_suite(gradients);
  });
  report(3, "attention invariants: rows sum to 1, sr=1 and covering-window attention equal dense attention",
         [] { return from_suite(run_suite("attention")); });
  report(4, "metric oracle: 1000 random cases exact, worked example mIoU 7/12, OA 0.75, meanF1 11/15",
         [] { return from_suite(run_suite("metrics")); });
  report(5, "overfit: toy_dataset(4, 64, 3, seed 0), tiny cfg, <= 300 steps, pixel accuracy >= 0.99",
         [] { return from_suite(run_suite("overfit")); });
  report(6, "ablation plumbing: five variants construct, forward, grad-check; counts match the oracle", [&] {
    Outcome o = from_suite(run_suite("ablations"));
    o.require(gradients.pass && !gradients.lines.empty(), "all five variants pass the gradient check");
    return o;
  });
  report(7, "TTA symmetry: {identity,hflip} map symmetric within 1e-5; {identity} equals plain inference",
         tta_symmetry);
  report(8, "determinism: bit-identical reruns, byte-identical checkpoint round trip, exact resume", determinism);
  report(9, "protocol echo: lr 6e-5/6e-4, epochs 50/55, batch 8, crops 512/768, weight decay 0.01", protocol_echo);

  std::printf("%d of 9 criteria passed\n", 9 - failures);
  return failures == 0 ? 0 : 1;
}
