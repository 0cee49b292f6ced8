#include "remotenet/verification.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "remotenet/encoder.hpp"
#include "remotenet/frm_head.hpp"
#include "remotenet/fusion.hpp"
#include "remotenet/gltb.hpp"
#include "remotenet/training.hpp"

namespace remotenet {

// ---- gradient check -------------------------------------------------------------

bool GradReport::pass() const {
  return std::all_of(entries.begin(), entries.end(), [&](const GradEntry& e) { return e.max_rel_err <= tol; });
}

const GradEntry* GradReport::worst() const {
  const GradEntry* w = nullptr;
  for (const auto& e : entries) {
    if (!w || e.max_rel_err > w->max_rel_err) w = &e;
  }
  return w;
}

int64_t GradReport::coords() const {
  int64_t n = 0;
  for (const auto& e : entries) n += e.coords;
  return n;
}

std::string GradReport::to_text() const {
  std::string out = fmt::format("{:<60} {:>6} {:>12} {:>12}\n", "parameter", "coords", "max_rel_err", "max|grad|");
  for (const auto& e : entries) {
    out += fmt::format("{:<60} {:>6} {:>12.3e} {:>12.3e}{}\n", e.name, e.coords, e.max_rel_err, e.max_abs_grad,
                       e.max_rel_err > tol ? "  FAIL" : "");
  }
  const auto* w = worst();
  out += fmt::format("{} parameters, {} coordinates, worst {:.3e} ({}), tol {:.1e}: {}\n", entries.size(), coords(),
                     w ? w->max_rel_err : 0.0, w ? w->name : "-", tol, pass() ? "PASS" : "FAIL");
  return out;
}

GradReport grad_check(const ParamStore<double>& params, const std::function<Var<double>()>& loss,
                      const GradCheckOptions& opts) {
  GradReport report;
  report.tol = opts.tol;
  const_cast<ParamStore<double>&>(params).zero_grad();
  const Var<double> l = loss();
  if (!std::isfinite(l.value()[0])) throw NumericError("grad_check: loss is not finite");
  backward(l);

  std::mt19937_64 rng(opts.seed);
  const auto eval = [&] {
    NoGradGuard guard;
    const double v = loss().value()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: perturbed loss is not finite");
    return v;
  };
  for (const auto& e : params.entries()) {
    if (!e.requires_grad) continue;
    const Tensor<double> analytic = e.var.grad();
    const int64_t n = analytic.numel();
    std::vector<int64_t> coords(static_cast<size_t>(n));
    std::iota(coords.begin(), coords.end(), int64_t{0});
    if (n > opts.coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<size_t>(opts.coords));
    }
    GradEntry g{e.name, static_cast<int>(coords.size()), 0.0, 0.0};
    Var<double> var = e.var;
    for (int64_t i : coords) {
      double& theta = var.mutable_value()[i];
      const double saved = theta;
      theta = saved + opts.h;
      const double lp = eval();
      theta = saved - opts.h;
      const double lm = eval();
      theta = saved;
      const double num = (lp - lm) / (2 * opts.h);
      const double a = analytic[i];
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-8});
      g.max_rel_err = std::max(g.max_rel_err, rel);
      g.max_abs_grad = std::max(g.max_abs_grad, std::abs(a));
    }
    report.entries.push_back(std::move(g));
  }
  const_cast<ParamStore<double>&>(params).zero_grad();
  return report;
}

GradReport grad_check(RemoteNet<double>& net, const Tensor<double>& x, const LabelMap& labels,
                      const GradCheckOptions& opts) {
  net.set_mode(Mode::eval);
  const Var<double> input(x);
  return grad_check(net.params(), [&] { return ops::cross_entropy(net.forward(input), labels); }, opts);
}

void randomize_params(ParamStore<double>& params, unsigned long long seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (const auto& e : params.entries()) {
    Var<double> v = e.var;
    auto& t = v.mutable_value();
    const double fan_in = static_cast<double>(t.numel()) / static_cast<double>(t.dim(0));
    for (auto& x : t.values()) {
      switch (e.kind) {
        case ParamKind::weight: x = normal(rng) / std::sqrt(fan_in); break;
        case ParamKind::pos_table: x = 0.5 * normal(rng); break;
        case ParamKind::norm_scale: x = 1.0 + 0.2 * unit(rng); break;
        case ParamKind::norm_shift:
        case ParamKind::bias:
        case ParamKind::running_mean: x = 0.1 * unit(rng); break;
        case ParamKind::running_var: x = 1.0 + 0.5 * unit(rng); break;
      }
    }
  }
}

GradProblem make_grad_problem(int hw, int num_classes, unsigned long long seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, num_classes - 1);
  std::uniform_int_distribution<int> pct(0, 99);
  GradProblem p{Tensor<double>({1, 3, hw, hw}), LabelMap({1, hw, hw})};
  for (auto& v : p.x.values()) v = normal(rng);
  for (auto& l : p.labels.values()) l = pct(rng) < 5 ? kIgnoreIndex : cls(rng);
  return p;
}

// ---- metric oracle -----------------------------------------------------------------

OracleMetrics metric_oracle(const LabelMap& pred, const LabelMap& ref, int num_classes, const std::set<int>& exclude) {
  if (pred.shape() != ref.shape()) throw ShapeError("metric_oracle: prediction and reference differ in shape");
  const auto k = static_cast<size_t>(num_classes);
  OracleMetrics o;
  o.tp.assign(k, 0);
  o.fp.assign(k, 0);
  o.fn.assign(k, 0);
  o.iou.resize(k);
  o.f1.resize(k);
  int64_t correct = 0, counted = 0;
  for (int64_t i = 0; i < ref.numel(); ++i) {
    const int r = ref[i], p = pred[i];
    if (r == kIgnoreIndex) continue;
    if (r == p) {
      ++o.tp[static_cast<size_t>(r)];
    } else {
      ++o.fn[static_cast<size_t>(r)];
      ++o.fp[static_cast<size_t>(p)];
    }
    if (!exclude.count(r)) {
      ++counted;
      if (r == p) ++correct;
    }
  }
  double iou_sum = 0, f1_sum = 0;
  int n = 0;
  for (size_t c = 0; c < k; ++c) {
    if (exclude.count(static_cast<int>(c))) continue;
    const int64_t tp = o.tp[c], fp = o.fp[c], fn = o.fn[c];
    if (tp + fp + fn == 0) continue;
    o.iou[c] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    o.f1[c] = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    iou_sum += *o.iou[c];
    f1_sum += *o.f1[c];
    ++n;
  }
  if (n) {
    o.miou = iou_sum / n;
    o.mean_f1 = f1_sum / n;
  }
  if (counted) o.oa = static_cast<double>(correct) / static_cast<double>(counted);
  return o;
}

bool metrics_agree(const ConfusionMatrix& cm, const Metrics& m, const OracleMetrics& o, double tol, std::string* why) {
  const auto fail = [&](const std::string& msg) {
    if (why) *why = msg;
    return false;
  };
  const auto same = [&](const std::optional<double>& a, const std::optional<double>& b) {
    return a.has_value() == b.has_value() && (!a || std::abs(*a - *b) <= tol);
  };
  const int k = cm.num_classes();
  for (int c = 0; c < k; ++c) {
    int64_t row = 0, col = 0;
    for (int j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const auto cc = static_cast<size_t>(c);
    if (cm.at(c, c) != o.tp[cc] || row - cm.at(c, c) != o.fn[cc] || col - cm.at(c, c) != o.fp[cc]) {
      return fail(fmt::format("class {} counts differ", c));
    }
    if (!same(m.iou[cc], o.iou[cc])) return fail(fmt::format("class {} IoU differs", c));
    if (!same(m.f1[cc], o.f1[cc])) return fail(fmt::format("class {} F1 differs", c));
  }
  if (!same(m.miou, o.miou)) return fail("mIoU differs");
  if (!same(m.mean_f1, o.mean_f1)) return fail("mean F1 differs");
  if (!same(m.oa, o.oa)) return fail("OA differs");
  return true;
}

// ---- parameter count oracle ------------------------------------------------------------

int64_t param_count_oracle(const ModelConfig& cfg, Ablation variant) {
  const auto conv = [](int64_t cin, int64_t cout, int64_t k, int64_t groups = 1, bool bias = true) {
    return cout * (cin / groups) * k * k + (bias ? cout : 0);
  };
  const auto ffn = [&](int64_t c, int64_t ratio) {
    const int64_t h = c * ratio;
    return conv(c, h, 1) + conv(h, h, 3, h) + conv(h, c, 1);
  };
  int64_t n = 0;
  for (int s = 0; s < 4; ++s) {
    const int64_t c = cfg.stage_dims[s];
    const int64_t cin = s == 0 ? cfg.in_channels : cfg.stage_dims[s - 1];
    const int64_t sr = cfg.sr_ratios[s];
    const int64_t side = 2 * cfg.pos_bias_radius + 1;
    n += conv(cin, c, cfg.patch_kernels[s]) + 2 * c;
    const int64_t attn =
        3 * conv(c, c, 1) + conv(c, c, 1, 1, false) + (sr > 1 ? conv(c, c, sr) + 2 * c : 0) + side * side * cfg.stage_heads[s];
    n += cfg.stage_depths[s] * (2 * c + attn + 2 * c + ffn(c, cfg.mlp_ratio));
  }
  const int64_t d = cfg.decoder_dim;
  for (int s = 0; s < 4; ++s) n += conv(cfg.stage_dims[s], d, 1);

  const int64_t wside = 2 * cfg.window_size - 1;
  const int64_t window_attn = 3 * conv(d, d, 1) + conv(d, d, 1, 1, false) + wside * wside * cfg.decoder_heads;
  const int64_t local = conv(d, d, 1, 1, false) + conv(d, d, 3, 1, false) + conv(d, d, 5, 1, false) + 3 * 2 * d;
  const int64_t dwsep = conv(d, d, 3, d, false) + conv(d, d, 1);
  const int64_t gltb = 2 * d + window_attn + local + dwsep + 2 * d + ffn(d, cfg.decoder_mlp_ratio);
  n += 3 * cfg.gltb_per_scale * gltb;

  if (variant != Ablation::no_fusion) {
    int64_t amm = 0;
    if (variant != Ablation::no_amm) amm = (cfg.amm_mode == AmmMode::shared ? 1 : 2) * conv(d, d, 1);
    n += 3 * (amm + 2 * conv(d, d, 1) + conv(d, d, 3, 1, false) + 2 * d);
  }
  if (variant != Ablation::no_frm) {
    n += conv(d, d, cfg.frm_kernels[0], d) + conv(d, d, cfg.frm_kernels[1], d);
    if (variant != Ablation::frm_two_branch) n += conv(d, d, 1);
    n += conv(2 * d, d, 1) + conv(d, d, 3, 1, false) + 2 * d;
  }
  n += conv(d, cfg.num_classes, 1);
  return n;
}

// ---- overfit harness ---------------------------------------------------------------------

OverfitResult overfit_toy(int64_t max_steps, unsigned long long seed) {
  RunConfig rc = protocol_run_config(DatasetKind::toy);
  rc.train.seed = seed;
  std::shared_ptr<const Dataset> data =
      toy_dataset(rc.data.toy_count, rc.data.toy_size, rc.model.num_classes, seed);
  const int64_t planned = static_cast<int64_t>(rc.train.epochs) * steps_per_epoch(data->size(), rc.train.batch_size);
  if (max_steps > 0 && max_steps < planned) rc.train.max_steps = static_cast<int>(max_steps);
  TrainRequest req;
  req.cfg = rc;
  req.train_set = data;
  TrainResult res = train(req);
  RemoteNet<float> net(rc.model, res.last.params);
  OverfitResult out;
  out.steps = res.total_steps;
  out.accuracy = pixel_accuracy(net, *data, rc.data.mean, rc.data.std);
  out.final_loss = res.losses.empty() ? 0.0 : res.losses.back();
  out.params = std::move(res.last.params);
  return out;
}

// ---- suites -------------------------------------------------------------------------------

void SuiteResult::check(bool ok, const std::string& what) {
  pass = pass && ok;
  lines.push_back((ok ? "PASS " : "FAIL ") + what);
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"shapes", "gradients", "attention", "metrics", "ablations", "overfit"};
  return names;
}

Tensor<double> dense_attention_oracle(const ParamStore<double>& p, const std::string& prefix, const Tensor<double>& x,
                                      int heads, int radius) {
  const int64_t c = x.dim(1), h = x.dim(2), w = x.dim(3), n = h * w, d = c / heads;
  const auto project = [&](const std::string& name, const Tensor<double>& in) {
    const Tensor<double>& wt = p.at(prefix + "." + name + ".weight").value();
    const std::string bias = prefix + "." + name + ".bias";
    const std::optional<Tensor<double>> b =
        p.contains(bias) ? std::optional<Tensor<double>>(p.at(bias).value()) : std::nullopt;
    Tensor<double> out({c, n});
    for (int64_t o = 0; o < c; ++o) {
      for (int64_t t = 0; t < n; ++t) {
        double s = b ? (*b)[o] : 0.0;
        for (int64_t i = 0; i < c; ++i) s += wt[o * c + i] * in[i * n + t];
        out[o * n + t] = s;
      }
    }
    return out;
  };
  const Tensor<double> xin = x.reshaped({c, n});
  const Tensor<double> q = project("q", xin), k = project("k", xin), v = project("v", xin);
  const Tensor<double>& table = p.at(prefix + ".pos_table").value();
  const int64_t side = 2 * radius + 1;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor<double> mixed({c, n});
  std::vector<double> logits(static_cast<size_t>(n));
  for (int64_t hd = 0; hd < heads; ++hd) {
    for (int64_t i = 0; i < n; ++i) {
      double mx = -1e300;
      for (int64_t j = 0; j < n; ++j) {
        double s = 0;
        for (int64_t e = 0; e < d; ++e) s += q[(hd * d + e) * n + i] * k[(hd * d + e) * n + j];
        const int64_t dy = std::clamp<int64_t>(i / w - j / w, -radius, radius);
        const int64_t dx = std::clamp<int64_t>(i % w - j % w, -radius, radius);
        s = s * scale + table[((dy + radius) * side + dx + radius) * heads + hd];
        logits[static_cast<size_t>(j)] = s;
        mx = std::max(mx, s);
      }
      double z = 0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (int64_t e = 0; e < d; ++e) {
        double s = 0;
        for (int64_t j = 0; j < n; ++j) s += logits[static_cast<size_t>(j)] / z * v[(hd * d + e) * n + j];
        mixed[(hd * d + e) * n + i] = s;
      }
    }
  }
  return project("proj", mixed).reshaped({1, c, h, w});
}

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(normal(rng));
  return t;
}

template <typename T>
double max_row_sum_error(const Tensor<T>& weights) {
  const int64_t cols = weights.dim(-1), rows = weights.numel() / cols;
  double worst = 0;
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0;
    for (int64_t j = 0; j < cols; ++j) s += weights[r * cols + j];
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

void shapes_suite(SuiteResult& r) {
  std::mt19937_64 rng(0);
  struct Case {
    Preset preset;
    int64_t hw;
    int classes;
  };
  for (const Case& c : {Case{Preset::tiny, 64, 3}, Case{Preset::loveda, 512, 7}, Case{Preset::potsdam, 768, 6}}) {
    const ModelConfig cfg = default_config(c.preset);
    auto net = make_variant<float>(cfg, Ablation::full, 0);
    const Tensor<float> x = random_tensor<float>({1, 3, c.hw, c.hw}, rng);
    const std::string tag = fmt::format("{} {}x{}", to_string(c.preset), c.hw, c.hw);
    const Shape expect{1, c.classes, c.hw, c.hw};
    const Tensor<float> y = net.predict(x);
    r.check(y.shape() == expect, fmt::format("{}: logits {} (expected {})", tag, shape_str(y.shape()),
                                             shape_str(expect)));
    r.check(y.all_finite(), tag + ": logits finite");
    NoGradGuard guard;
    const auto feats = encoder_forward(Var<float>(x), cfg, net.params());
    for (int s = 0; s < 4; ++s) {
      const int64_t stride = int64_t{4} << s;
      const Shape fe{1, cfg.stage_dims[s], c.hw / stride, c.hw / stride};
      r.check(feats[s].tensor.shape() == fe && feats[s].stride_from_input == stride,
              fmt::format("{}: stage {} feature {} at stride {}", tag, s + 1, shape_str(feats[s].tensor.shape()),
                          feats[s].stride_from_input));
    }
    if (c.preset != Preset::tiny) {
      r.check(cfg.stage_dims == std::array<int, 4>{64, 128, 320, 512},
              tag + ": MiT-B2 channel widths 64/128/320/512");
    }
  }
}

void gradients_suite(SuiteResult& r, const std::function<void(const std::string&)>& progress) {
  for (const Ablation a : kAllVariants) {
    ModelConfig cfg = default_config(Preset::tiny);
    cfg.ablation = a;
    auto net = make_variant<double>(cfg, a, 0);
    randomize_params(net.params(), 1);
    const auto prob = make_grad_problem(64, cfg.num_classes, 2);
    GradCheckOptions opts;
    opts.seed = 3;
    const GradReport rep = grad_check(net, prob.x, prob.labels, opts);
    const auto* w = rep.worst();
    r.check(rep.pass() && rep.entries.size() == static_cast<size_t>(net.params().size() - [&] {
      size_t buffers = 0;
      for (const auto& e : net.params().entries()) buffers += e.requires_grad ? 0 : 1;
      return buffers;
    }()),
            fmt::format("grad_check {}: {} params, {} coords, worst rel err {:.2e} ({}) <= {:.0e}", to_string(a),
                        rep.entries.size(), rep.coords(), w ? w->max_rel_err : 0.0, w ? w->name : "-", rep.tol));
    if (progress) progress(r.lines.back());
  }
}

void attention_suite(SuiteResult& r) {
  std::mt19937_64 rng(7);
  const int c = 8, heads = 2;

  // Encoder efficient attention.
  for (int sr : {1, 2}) {
    ParamLayout l;
    declare_efficient_attention(l, "attn", c, heads, sr, 3);
    auto p = init_params<double>(l, 11);
    randomize_params(p, 12);
    ModelConfig cfg = default_config(Preset::tiny);
    const Tensor<double> x = random_tensor<double>({1, c, 5, 6}, rng);
    Var<double> weights;
    const Tensor<double> y = efficient_self_attention(p, "attn", Var<double>(x), sr, heads, cfg, &weights).value();
    r.check(max_row_sum_error(weights.value()) <= 1e-6,
            fmt::format("efficient attention sr={}: softmax rows sum to 1 (max err {:.1e})", sr,
                        max_row_sum_error(weights.value())));
    if (sr == 1) {
      const double diff = max_abs_diff(y, dense_attention_oracle(p, "attn", x, heads, 3));
      r.check(diff <= 1e-6, fmt::format("efficient attention sr=1 equals dense attention (max diff {:.1e})", diff));
    }
  }

  // Decoder window attention.
  struct WCase {
    int64_t h, w;
    int window;
  };
  for (const WCase& wc : {WCase{6, 7, 8}, WCase{8, 8, 8}, WCase{17, 17, 8}}) {
    ParamLayout l;
    declare_window_mhsa(l, "wattn", c, heads, wc.window);
    auto p = init_params<double>(l, 21);
    randomize_params(p, 22);
    const Tensor<double> x = random_tensor<double>({1, c, wc.h, wc.w}, rng);
    Var<double> weights;
    const Tensor<double> y = window_mhsa(p, "wattn", Var<double>(x), wc.window, heads, &weights).value();
    const std::string tag = fmt::format("window attention {}x{} window {}", wc.h, wc.w, wc.window);
    r.check(max_row_sum_error(weights.value()) <= 1e-6, tag + ": softmax rows sum to 1");
    r.check(y.shape() == x.shape(), tag + ": output shape " + shape_str(y.shape()));
    if (wc.h <= wc.window && wc.w <= wc.window) {
      const double diff = max_abs_diff(y, dense_attention_oracle(p, "wattn", x, heads, wc.window - 1));
      r.check(diff <= 1e-6, fmt::format("{}: equals dense attention (max diff {:.1e})", tag, diff));
    } else {
      const auto ty = window_tiling(wc.h, wc.window), tx = window_tiling(wc.w, wc.window);
      r.check(weights.dim(0) == ty.count * tx.count * heads && ty.padded == 24,
              fmt::format("{}: padded to {}x{}, {} tiles", tag, ty.padded, tx.padded, ty.count * tx.count));
    }
  }

  // Plain multi-head attention rows.
  const Tensor<double> q = random_tensor<double>({2, 9, c}, rng), k = random_tensor<double>({2, 4, c}, rng);
  const auto res = self_attention<double>({Var<double>(q), Var<double>(k), Var<double>(k), heads});
  r.check(max_row_sum_error(res.weights.value()) <= 1e-6, "self_attention: softmax rows sum to 1");
}

void metrics_suite(SuiteResult& r) {
  {
    ConfusionMatrix cm(2);
    cm.update(LabelMap({4}, std::vector<int32_t>{0, 1, 1, 1}), LabelMap({4}, std::vector<int32_t>{0, 1, 0, 1}));
    const Metrics m = compute_metrics(cm);
    const bool counts = cm.at(0, 0) == 1 && cm.at(0, 1) == 1 && cm.at(1, 0) == 0 && cm.at(1, 1) == 2;
    r.check(counts, "worked example: counts [[1,1],[0,2]]");
    r.check(std::abs(*m.miou - 7.0 / 12) <= 1e-12 && std::abs(*m.oa - 0.75) <= 1e-12 &&
                std::abs(*m.mean_f1 - 11.0 / 15) <= 1e-12,
            fmt::format("worked example: mIoU {:.6f} (7/12), OA {:.6f} (0.75), meanF1 {:.6f} (11/15)", *m.miou, *m.oa,
                        *m.mean_f1));
  }
  std::mt19937_64 rng(99);
  int agreed = 0;
  std::string first_failure;
  const int trials = 1000;
  for (int t = 0; t < trials; ++t) {
    const int k = std::uniform_int_distribution<int>(1, 6)(rng);
    std::uniform_int_distribution<int> cls(0, k - 1), pct(0, 99);
    const int ignore_pct = t % 10 == 0 ? 100 : pct(rng) / 4;
    LabelMap pred({16, 16}), ref({16, 16});
    for (int64_t i = 0; i < 256; ++i) {
      pred[i] = cls(rng);
      ref[i] = pct(rng) < ignore_pct ? kIgnoreIndex : cls(rng);
    }
    std::set<int> exclude;
    if (k > 2 && t % 3 == 0) exclude.insert(k - 1);
    ConfusionMatrix cm(k);
    cm.update(pred, ref);
    std::string why;
    if (metrics_agree(cm, compute_metrics(cm, exclude), metric_oracle(pred, ref, k, exclude), 1e-12, &why)) {
      ++agreed;
    } else if (first_failure.empty()) {
      first_failure = fmt::format(" (trial {}: {})", t, why);
    }
  }
  r.check(agreed == trials, fmt::format("{}/{} randomized 16x16 cases agree with per-pixel oracle{}", agreed, trials,
                                        first_failure));
  {
    ConfusionMatrix cm(3);
    cm.update(LabelMap({4}, 1), LabelMap({4}, kIgnoreIndex));
    const Metrics m = compute_metrics(cm);
    r.check(cm.total() == 0 && !m.miou && !m.oa && !m.mean_f1, "all-ignore reference: metrics flagged undefined");
  }
  {
    ConfusionMatrix cm(1);
    cm.update(LabelMap({5}, 0), LabelMap({5}, std::vector<int32_t>{0, 0, kIgnoreIndex, 0, 0}));
    const Metrics m = compute_metrics(cm);
    r.check(m.iou[0] && m.oa && *m.iou[0] == *m.oa, "single-class case: IoU equals OA");
  }
}

void ablations_suite(SuiteResult& r) {
  for (Preset preset : {Preset::tiny, Preset::loveda, Preset::potsdam}) {
    ModelConfig base = default_config(preset);
    int64_t full = 0;
    for (const Ablation a : kAllVariants) {
      ModelConfig cfg = base;
      cfg.ablation = a;
      const int64_t declared = declare_network(cfg).trainable_count();
      const int64_t oracle = param_count_oracle(base, a);
      if (a == Ablation::full) full = declared;
      r.check(declared == oracle, fmt::format("{} {}: {} parameters (closed form {}, {:+d} vs full)",
                                              to_string(preset), to_string(a), declared, oracle, declared - full));
    }
  }
  {
    ModelConfig cfg = default_config(Preset::tiny);
    cfg.decoder_dim = 32;
    cfg.decoder_heads = 4;
    r.check(declare_network(cfg).trainable_count() == param_count_oracle(cfg, Ablation::full),
            "tiny with decoder_dim doubled: count matches closed form");
  }

  std::mt19937_64 rng(5);
  const ModelConfig tiny = default_config(Preset::tiny);
  const Tensor<float> x = random_tensor<float>({1, 3, 64, 64}, rng);
  for (const Ablation a : kAllVariants) {
    auto net = make_variant<float>(tiny, a, 0);
    const Tensor<float> y = net.predict(x);
    r.check(y.shape() == Shape{1, 3, 64, 64} && y.all_finite(), "tiny " + to_string(a) + ": constructs and forwards");
  }

  const ForwardContext ctx;
  {
    ModelConfig cfg = tiny;
    cfg.ablation = Ablation::no_frm;
    ParamStore<float> p;
    const Tensor<float> f = random_tensor<float>({1, cfg.decoder_dim, 16, 16}, rng);
    NoGradGuard guard;
    r.check(frm_forward(p, "frm", Var<float>(f), cfg, ctx).value() == f, "no_frm: refinement is the identity");
  }
  {
    ModelConfig cfg = tiny;
    cfg.ablation = Ablation::no_fusion;
    ParamStore<float> p;
    const Tensor<float> e = random_tensor<float>({1, cfg.decoder_dim, 16, 16}, rng);
    const Tensor<float> d = random_tensor<float>({1, cfg.decoder_dim, 16, 16}, rng);
    Tensor<float> sum = e;
    for (int64_t i = 0; i < sum.numel(); ++i) sum[i] = e[i] + d[i];
    NoGradGuard guard;
    r.check(fuse(p, "fuse", Var<float>(e), Var<float>(d), cfg, ctx).value() == sum, "no_fusion: output equals e + d");
  }
}

void overfit_suite(SuiteResult& r) {
  const OverfitResult o = overfit_toy(300, 0);
  r.check(o.steps <= 300 && o.accuracy >= 0.99,
          fmt::format("toy overfit: pixel accuracy {:.4f} after {} steps (final loss {:.4f})", o.accuracy, o.steps,
                      o.final_loss));
}

}  // namespace

SuiteResult run_suite(const std::string& name, const std::function<void(const std::string&)>& progress) {
  SuiteResult r;
  r.name = name;
  if (name == "shapes") {
    shapes_suite(r);
  } else if (name == "gradients") {
    gradients_suite(r, progress);
    return r;
  } else if (name == "attention") {
    attention_suite(r);
  } else if (name == "metrics") {
    metrics_suite(r);
  } else if (name == "ablations") {
    ablations_suite(r);
  } else if (name == "overfit") {
    overfit_suite(r);
  } else {
    throw ConfigError("unknown verification suite '" + name + "'");
  }
  if (progress) {
    for (const auto& l : r.lines) progress(l);
  }
  return r;
}

}  // namespace remotenet
