#include <cmath>
#include <random>

#include <doctest.h>

#include "helpers.hpp"
#include "remotenet/errors.hpp"
#include "remotenet/evaluation.hpp"
#include "remotenet/verification.hpp"

using namespace remotenet;
using testing_util::max_diff;
using testing_util::random_tensor;

namespace {

ConfusionMatrix worked_example() {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 1;
  cm.at(0, 1) = 1;
  cm.at(1, 1) = 2;
  return cm;
}

// Per-pixel linear map: logits = W x + b with a fixed 3 -> 4 channel matrix.
Tensor<float> pointwise_logits(const Tensor<float>& x) {
  const int64_t h = x.dim(2), w = x.dim(3), plane = h * w;
  Tensor<float> out({1, 4, h, w});
  for (int64_t c = 0; c < 4; ++c)
    for (int64_t i = 0; i < plane; ++i) {
      float s = 0.1f * static_cast<float>(c);
      for (int64_t k = 0; k < 3; ++k) s += static_cast<float>((c + 1) * (k + 2) % 5 - 2) * x[k * plane + i];
      out[c * plane + i] = s;
    }
  return out;
}

}  // namespace

TEST_CASE("worked confusion matrix") {
  const auto m = compute_metrics(worked_example());
  CHECK(*m.iou[0] == doctest::Approx(0.5));
  CHECK(*m.iou[1] == doctest::Approx(2.0 / 3.0));
  CHECK(*m.f1[0] == doctest::Approx(2.0 / 3.0));
  CHECK(*m.f1[1] == doctest::Approx(0.8));
  CHECK(*m.miou == doctest::Approx(7.0 / 12.0));
  CHECK(*m.mean_f1 == doctest::Approx(11.0 / 15.0));
  CHECK(*m.oa == doctest::Approx(0.75));
}

TEST_CASE("confusion updates skip ignored references and reject stray labels") {
  ConfusionMatrix cm(3);
  LabelMap pred({2, 2}, std::vector<int32_t>{0, 1, 2, 2});
  LabelMap ref({2, 2}, std::vector<int32_t>{0, kIgnoreIndex, 1, 2});
  cm.update(pred, ref);
  CHECK(cm.total() == 3);
  CHECK(cm.at(1, 2) == 1);
  ref[0] = 3;
  CHECK_THROWS_AS(cm.update(pred, ref), DataError);
  CHECK_THROWS_AS(cm.update(LabelMap({1, 4}), LabelMap({2, 2})), ShapeError);
}

TEST_CASE("absent classes are undefined rather than zero") {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 5;
  cm.at(1, 0) = 1;
  const auto m = compute_metrics(cm);
  CHECK(m.iou[1].has_value());
  CHECK(*m.iou[1] == 0.0);
  CHECK_FALSE(m.iou[2].has_value());
  CHECK(*m.miou == doctest::Approx((5.0 / 6.0 + 0.0) / 2.0));
  CHECK_FALSE(compute_metrics(ConfusionMatrix(3)).miou.has_value());
}

TEST_CASE("Potsdam clutter leaves means and overall accuracy") {
  CHECK(metric_exclusions(DatasetKind::potsdam, 6) == std::set<int>{5});
  CHECK(metric_exclusions(DatasetKind::loveda, 7).empty());
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 4;
  cm.at(1, 1) = 2;
  cm.at(1, 2) = 2;
  cm.at(2, 2) = 10;
  const auto m = compute_metrics(cm, {2});
  CHECK_FALSE(m.iou[2].has_value());
  CHECK(*m.oa == doctest::Approx(6.0 / 8.0));
  CHECK(*m.miou == doctest::Approx((1.0 + 0.5) / 2.0));
  const auto text = format_report(m, {"a", "b", "c"}, {2}, "demo");
  CHECK(text.find("excluded") != std::string::npos);
  CHECK(text.find("mIoU") != std::string::npos);
  CHECK(text.find("75.00") != std::string::npos);
}

TEST_CASE("metrics agree with the per-pixel oracle on random cases") {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 1 + static_cast<int>(rng() % 6);
    LabelMap pred({8, 8}), ref({8, 8});
    for (int64_t i = 0; i < 64; ++i) {
      pred[i] = static_cast<int32_t>(rng() % k);
      ref[i] = rng() % 7 == 0 ? kIgnoreIndex : static_cast<int32_t>(rng() % k);
    }
    std::set<int> exclude;
    if (k > 2 && rng() % 2) exclude.insert(k - 1);
    ConfusionMatrix cm(k);
    cm.update(pred, ref);
    std::string why;
    CHECK_MESSAGE(metrics_agree(cm, compute_metrics(cm, exclude), metric_oracle(pred, ref, k, exclude), 1e-12, &why),
                  why);
  }
}

TEST_CASE("confusion matrices of shards add up") {
  const auto data = toy_dataset(4, 32, 3, 5);
  const LogitFn f = pointwise_logits;
  EvalSetup setup;
  setup.window = 32;
  setup.stride = 32;
  ConfusionMatrix whole = evaluate(f, *data, 4, setup);
  std::shared_ptr<const Dataset> shared = toy_dataset(4, 32, 3, 5);
  ConfusionMatrix a = evaluate(f, *subset(shared, {0, 1}), 4, setup);
  const ConfusionMatrix b = evaluate(f, *subset(shared, {2, 3}), 4, setup);
  a.merge(b);
  CHECK(a == whole);
  CHECK(whole.total() == 4 * 32 * 32);
}

TEST_CASE("TTA grammar") {
  CHECK(parse_tta("none").transforms.size() == 1);
  const auto t = parse_tta("hflip,msc");
  CHECK(t.transforms.size() == 2);
  CHECK(t.scales == std::vector<double>{0.75, 1.0, 1.25});
  CHECK(parse_tta("hflip,vflip,rot90").transforms.size() == 4);
  CHECK_THROWS_AS(parse_tta("shear"), ConfigError);
}

TEST_CASE("every TTA transform is inverted exactly") {
  const auto x = random_tensor<float>({1, 2, 3, 5}, 1);
  for (auto t : {TtaTransform::identity, TtaTransform::hflip, TtaTransform::vflip, TtaTransform::rot90,
                 TtaTransform::rot180, TtaTransform::rot270}) {
    const auto y = apply_transform(x, t, false);
    CHECK(apply_transform(y, t, true) == x);
  }
  CHECK(apply_transform(x, TtaTransform::rot90, false).shape() == Shape{1, 2, 5, 3});
  // Counter-clockwise: the top-right corner moves to the top-left.
  CHECK(apply_transform(x, TtaTransform::rot90, false)[0] == x[4]);
}

TEST_CASE("identity TTA equals plain inference") {
  const auto x = random_tensor<float>({1, 3, 6, 7}, 2);
  const LogitFn f = pointwise_logits;
  const auto probs = predict_probs(f, x, TtaSpec{});
  CHECK(argmax_labels(probs) == argmax_labels(f(x)));
  const auto logits = f(x);
  for (int64_t i = 0; i < 42; ++i) {
    double z = 0;
    for (int c = 0; c < 4; ++c) z += std::exp(static_cast<double>(logits[c * 42 + i]));
    for (int c = 0; c < 4; ++c)
      CHECK(probs[c * 42 + i] == doctest::Approx(std::exp(static_cast<double>(logits[c * 42 + i])) / z).epsilon(1e-6));
  }
}

TEST_CASE("flip-averaged probabilities are symmetric on a symmetric input") {
  auto x = random_tensor<float>({1, 3, 8, 8}, 3);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 4; ++j) x.at(0, c, i, 7 - j) = x.at(0, c, i, j);
  // A network that is not flip-equivariant: logits depend on the column.
  const LogitFn f = [](const Tensor<float>& in) {
    Tensor<float> out = pointwise_logits(in);
    for (int64_t c = 0; c < 4; ++c)
      for (int64_t i = 0; i < in.dim(2); ++i)
        for (int64_t j = 0; j < in.dim(3); ++j) out.at(0, c, i, j) += 0.3f * static_cast<float>(j * (c + 1));
    return out;
  };
  TtaSpec spec;
  spec.transforms = {TtaTransform::identity, TtaTransform::hflip};
  const auto p = predict_probs(f, x, spec);
  const auto mirrored = apply_transform(p, TtaTransform::hflip, false);
  CHECK(max_diff(p, mirrored) < 1e-5);
  CHECK(max_diff(predict_probs(f, x, TtaSpec{}), apply_transform(predict_probs(f, x, TtaSpec{}), TtaTransform::hflip,
                                                                      false)) > 1e-3);
}

TEST_CASE("sliding windows reproduce whole-image output for a per-pixel map") {
  const auto x = random_tensor<float>({1, 3, 37, 50}, 4);
  const LogitFn f = pointwise_logits;
  const auto whole = predict_probs(f, x, TtaSpec{});
  for (auto [window, stride] : {std::pair{16, 8}, std::pair{20, 20}, std::pair{16, 30}}) {
    CHECK(predict_probs_sliding(f, x, TtaSpec{}, window, stride) == whole);
  }
  CHECK(predict_probs_sliding(f, x, TtaSpec{}, 64, 32) == whole);
}

TEST_CASE("argmax breaks ties toward the lower class") {
  Tensor<float> p({1, 3, 1, 2}, std::vector<float>{0.4f, 0.2f, 0.4f, 0.4f, 0.2f, 0.4f});
  CHECK(argmax_labels(p).storage() == std::vector<int32_t>{0, 1});
}

TEST_CASE("padded inference crops back to the input size") {
  auto net = make_variant<float>(default_config(Preset::tiny), Ablation::full);
  const auto f = padded_logits(net);
  const auto y = f(random_tensor<float>({1, 3, 45, 70}, 5));
  CHECK(y.shape() == Shape{1, 3, 45, 70});
}
