#include <doctest.h>

#include "remotenet/errors.hpp"
#include "remotenet/verification.hpp"

using namespace remotenet;

TEST_CASE("suite registry") {
  const auto& names = suite_names();
  for (const char* n : {"shapes", "gradients", "attention", "metrics", "ablations", "overfit"})
    CHECK(std::find(names.begin(), names.end(), n) != names.end());
  CHECK_THROWS_AS(run_suite("speed"), ConfigError);
}

TEST_CASE("metric and attention suites pass, and catch an injected scale error") {
  CHECK(run_suite("metrics").pass);
  CHECK(run_suite("attention").pass);
  faults::ScopedFault fault(faults::Fault::attention_scale);
  const auto r = run_suite("attention");
  CHECK_FALSE(r.pass);
  bool any_fail = false;
  for (const auto& line : r.lines) any_fail = any_fail || line.rfind("FAIL", 0) == 0;
  CHECK(any_fail);
}

TEST_CASE("parameter oracle covers every preset") {
  for (auto preset : {Preset::tiny, Preset::loveda, Preset::potsdam}) {
    const auto cfg = default_config(preset);
    CHECK(init_params<float>(cfg, 0).trainable_count() == param_count_oracle(cfg, Ablation::full));
  }
  auto wide = default_config(Preset::tiny);
  wide.decoder_dim *= 2;
  CHECK(declare_network(wide).trainable_count() == param_count_oracle(wide, Ablation::full));
}

TEST_CASE("randomized parameters are reproducible") {
  const auto cfg = default_config(Preset::tiny);
  auto a = init_params<double>(cfg, 0), b = init_params<double>(cfg, 0);
  randomize_params(a, 1);
  randomize_params(b, 1);
  CHECK(a.identical(b));
  randomize_params(b, 2);
  CHECK_FALSE(a.identical(b));
}

TEST_CASE("gradient check of the tiny network, and its negative control") {
  const auto cfg = default_config(Preset::tiny);
  auto net = make_variant<double>(cfg, Ablation::no_frm);
  randomize_params(net.params(), 1);
  const auto prob = make_grad_problem(64, cfg.num_classes, 2);
  GradCheckOptions opts;
  opts.coords = 2;
  const auto ok = grad_check(net, prob.x, prob.labels, opts);
  INFO(ok.to_text());
  CHECK(ok.pass());
  int64_t trainable = 0;
  for (const auto& e : net.params().entries()) trainable += e.requires_grad;
  CHECK(static_cast<int64_t>(ok.entries.size()) == trainable);

  faults::ScopedFault fault(faults::Fault::softmax_backward);
  CHECK_FALSE(grad_check(net, prob.x, prob.labels, opts).pass());
}
