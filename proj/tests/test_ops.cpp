#include <cmath>

#include <doctest.h>

#include "helpers.hpp"
#include "remotenet/errors.hpp"
#include "remotenet/ops.hpp"
#include "remotenet/verification.hpp"

using namespace remotenet;
using testing_util::max_diff;
using testing_util::random_tensor;

namespace {

// Direct loop convolution.
Tensor<double> conv_loops(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, int stride, int pad,
                          int groups) {
  const int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t cout = w.dim(0), k = w.dim(2);
  const int64_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  const int64_t cin_g = cin / groups, cout_g = cout / groups;
  Tensor<double> y({n, cout, oh, ow});
  for (int64_t bn = 0; bn < n; ++bn)
    for (int64_t co = 0; co < cout; ++co)
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j) {
          double s = b.empty() ? 0.0 : b[co];
          const int64_t g = co / cout_g;
          for (int64_t ci = 0; ci < cin_g; ++ci)
            for (int64_t u = 0; u < k; ++u)
              for (int64_t v = 0; v < k; ++v) {
                const int64_t yy = i * stride - pad + u, xx = j * stride - pad + v;
                if (yy < 0 || yy >= h || xx < 0 || xx >= wd) continue;
                s += x.at(bn, g * cin_g + ci, yy, xx) * w.at(co, ci, u, v);
              }
          y.at(bn, co, i, j) = s;
        }
  return y;
}

}  // namespace

TEST_CASE("conv2d matches a direct loop convolution") {
  struct Case {
    int cin, cout, k, stride, pad, groups;
  };
  for (const Case c : {Case{3, 4, 3, 1, 1, 1}, Case{4, 6, 3, 2, 1, 2}, Case{4, 4, 3, 1, 1, 4}, Case{3, 5, 7, 4, 3, 1}}) {
    const auto x = random_tensor<double>({2, c.cin, 9, 11}, 1);
    const auto w = random_tensor<double>({c.cout, c.cin / c.groups, c.k, c.k}, 2);
    const auto b = random_tensor<double>({c.cout}, 3);
    const auto y = ops::conv2d(Var<double>(x), Var<double>(w), Var<double>(b), {c.stride, c.pad, c.groups}).value();
    const auto ref = conv_loops(x, w, b, c.stride, c.pad, c.groups);
    REQUIRE(y.shape() == ref.shape());
    CHECK(max_diff(y, ref) < 1e-12);
  }
}

TEST_CASE("reflect padding mirrors without repeating the edge") {
  Tensor<double> x({1, 1, 1, 4}, std::vector<double>{0, 1, 2, 3});
  const auto y = ops::pad2d(Var<double>(x), 0, 0, 2, 2, ops::PadMode::reflect).value();
  CHECK(y.storage() == std::vector<double>{2, 1, 0, 1, 2, 3, 2, 1});
  const auto z = ops::pad2d(Var<double>(x), 0, 0, 0, 2, ops::PadMode::zero).value();
  CHECK(z.storage() == std::vector<double>{0, 1, 2, 3, 0, 0});
}

TEST_CASE("bilinear resize keeps constants and identity sizes exact") {
  Tensor<float> c({1, 2, 5, 7}, 0.3f);
  const auto up = ops::resize_bilinear(Var<float>(c), 13, 4).value();
  for (float v : up.values()) CHECK(v == 0.3f);
  const auto x = random_tensor<float>({1, 2, 5, 7}, 4);
  CHECK(ops::resize_bilinear(Var<float>(x), 5, 7).value() == x);
}

TEST_CASE("bilinear 2x upsampling of a ramp uses half-pixel centres") {
  Tensor<double> x({1, 1, 1, 2}, std::vector<double>{0, 1});
  const auto y = ops::resize_bilinear(Var<double>(x), 1, 4).value();
  // Output centres at 0.25 and 0.75 of an input pixel; edges clamp.
  CHECK(y.storage() == std::vector<double>{0, 0.25, 0.75, 1});
}

TEST_CASE("softmax rows sum to one and gelu matches the erf form") {
  const auto x = random_tensor<double>({3, 5, 9}, 5, -20, 20);
  const auto s = ops::softmax_lastdim(Var<double>(x)).value();
  for (int64_t r = 0; r < 15; ++r) {
    double sum = 0;
    for (int64_t j = 0; j < 9; ++j) sum += s[r * 9 + j];
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
  const auto g = ops::gelu(Var<double>(x)).value();
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(g[i] == doctest::Approx(0.5 * x[i] * (1 + std::erf(x[i] / std::sqrt(2.0)))).epsilon(1e-12));
}

TEST_CASE("eval-mode batch norm applies running statistics") {
  const auto x = random_tensor<double>({2, 3, 4, 4}, 6);
  Var<double> gamma(Tensor<double>({3}, std::vector<double>{1.0, 2.0, 0.5}));
  Var<double> beta(Tensor<double>({3}, std::vector<double>{0.0, -1.0, 0.25}));
  Var<double> mean(Tensor<double>({3}, std::vector<double>{0.1, -0.2, 0.3}));
  Var<double> var(Tensor<double>({3}, std::vector<double>{1.0, 4.0, 0.25}));
  const auto y = ops::batch_norm(Var<double>(x), gamma, beta, mean, var, false, 0.1, 1e-5).value();
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t i = 0; i < 16; ++i) {
        const double in = x[(n * 3 + c) * 16 + i];
        const double ref = (in - mean.value()[c]) / std::sqrt(var.value()[c] + 1e-5) * gamma.value()[c] + beta.value()[c];
        CHECK(y[(n * 3 + c) * 16 + i] == doctest::Approx(ref).epsilon(1e-12));
      }
}

TEST_CASE("cross entropy: uniform logits give ln K") {
  Tensor<double> logits({1, 7, 3, 3}, 0.25);
  LabelMap labels({1, 3, 3}, 4);
  CHECK(ops::cross_entropy(Var<double>(logits), labels).value()[0] == doctest::Approx(std::log(7.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy: all ignored pixels give zero loss and zero gradient") {
  Var<double> logits(random_tensor<double>({1, 3, 4, 4}, 7), true);
  LabelMap labels({1, 4, 4}, kIgnoreIndex);
  const auto loss = ops::cross_entropy(logits, labels);
  CHECK(loss.value()[0] == 0.0);
  backward(loss);
  const auto grad = logits.grad();
  for (double g : grad.values()) CHECK(g == 0.0);
}

TEST_CASE("cross entropy matches brute force and rejects bad labels") {
  const auto x = random_tensor<double>({2, 4, 3, 5}, 8, -3, 3);
  LabelMap labels({2, 3, 5});
  std::mt19937 rng(9);
  for (auto& v : labels.values()) v = rng() % 5 == 0 ? kIgnoreIndex : static_cast<int32_t>(rng() % 4);
  double total = 0;
  int valid = 0;
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < 15; ++i) {
      const int32_t y = labels[b * 15 + i];
      if (y == kIgnoreIndex) continue;
      double z = 0;
      for (int64_t c = 0; c < 4; ++c) z += std::exp(x[(b * 4 + c) * 15 + i]);
      total += -std::log(std::exp(x[(b * 4 + y) * 15 + i]) / z);
      ++valid;
    }
  CHECK(ops::cross_entropy(Var<double>(x), labels).value()[0] == doctest::Approx(total / valid).epsilon(1e-12));

  labels[0] = 4;
  CHECK_THROWS_AS(ops::cross_entropy(Var<double>(x), labels), DataError);
  CHECK_THROWS_AS(ops::cross_entropy(Var<double>(x), LabelMap({2, 3, 4})), ShapeError);
}

TEST_CASE("quadratic probe: analytic gradient equals central differences") {
  ParamStore<double> p;
  p.add("w", ParamKind::weight, random_tensor<double>({4, 3, 1, 1}, 10));
  p.add("b", ParamKind::bias, random_tensor<double>({4}, 11));
  const auto x = random_tensor<double>({1, 3, 5, 5}, 12);
  auto loss = [&] {
    const auto y = ops::conv2d(Var<double>(x), p.at("w"), p.at("b"), {});
    return ops::sum_all(ops::mul(y, y));
  };
  GradCheckOptions opts;
  opts.tol = 1e-8;
  opts.coords = 16;
  const auto report = grad_check(p, loss, opts);
  INFO(report.to_text());
  CHECK(report.pass());
  CHECK(report.coords() == 16);
}

TEST_CASE("a corrupted softmax backward is caught by the gradient check") {
  ParamStore<double> p;
  p.add("w", ParamKind::weight, random_tensor<double>({1, 6, 4}, 13));
  const auto target = random_tensor<double>({1, 6, 4}, 14);
  auto loss = [&] { return ops::sum_all(ops::mul(ops::softmax_lastdim(p.at("w")), Var<double>(target))); };
  CHECK(grad_check(p, loss).pass());
  faults::ScopedFault fault(faults::Fault::softmax_backward);
  CHECK_FALSE(grad_check(p, loss).pass());
}

TEST_CASE("gradients of several ops agree with finite differences") {
  ParamStore<double> p;
  p.add("a", ParamKind::weight, random_tensor<double>({1, 4, 5, 6}, 15));
  p.add("g", ParamKind::norm_scale, random_tensor<double>({4}, 16, 0.5, 1.5));
  p.add("s", ParamKind::norm_shift, random_tensor<double>({4}, 17));
  p.add("m", ParamKind::weight, random_tensor<double>({2, 6, 9}, 18));
  LabelMap labels({1, 7, 9});
  std::mt19937 rng(19);
  for (auto& v : labels.values()) v = static_cast<int32_t>(rng() % 4);
  auto loss = [&] {
    auto a = ops::layer_norm(p.at("a"), p.at("g"), p.at("s"), 1e-6);
    a = ops::gelu(ops::pad2d(a, 1, 0, 2, 1, ops::PadMode::reflect));  // [1,4,6,9]
    auto t = ops::reshape(ops::permute(a, {0, 2, 1, 3}), {2, 12, 9});
    auto mm = ops::matmul(ops::softmax_lastdim(t), p.at("m"), false, true);  // [2,12,6]
    auto img = ops::reshape(mm, {1, 4, 6, 6});
    img = ops::resize_bilinear(ops::mul(img, ops::sigmoid(ops::mean_hw(img))), 7, 9);
    return ops::cross_entropy(img, labels);
  };
  GradCheckOptions opts;
  opts.coords = 12;
  const auto report = grad_check(p, loss, opts);
  INFO(report.to_text());
  CHECK(report.pass());
}

TEST_CASE("no-grad guard records no graph") {
  Var<double> a(Tensor<double>({2}, 1.0), true);
  {
    NoGradGuard guard;
    CHECK_FALSE(ops::scale(a, 2.0).requires_grad());
  }
  CHECK(ops::scale(a, 2.0).requires_grad());
}
