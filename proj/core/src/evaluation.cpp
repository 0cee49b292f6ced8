#include "remotenet/evaluation.hpp"

#include <algorithm>
#include <cmath>

#include <boost/algorithm/string.hpp>
#include <fmt/format.h>

namespace remotenet {

// ---- confusion matrix --------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
  if (num_classes < 1) throw ConfigError("confusion matrix needs at least one class");
  counts_.assign(static_cast<size_t>(k_) * static_cast<size_t>(k_), 0);
}

int64_t ConfusionMatrix::total() const {
  int64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

void ConfusionMatrix::update(const LabelMap& pred, const LabelMap& ref) {
  if (pred.shape() != ref.shape()) {
    throw ShapeError("prediction " + shape_str(pred.shape()) + " and reference " + shape_str(ref.shape()) +
                     " differ");
  }
  for (int64_t i = 0; i < ref.numel(); ++i) {
    const int32_t r = ref[i];
    if (r == kIgnoreIndex) continue;
    const int32_t p = pred[i];
    if (r < 0 || r >= k_ || p < 0 || p >= k_) {
      throw DataError(fmt::format("label out of range at pixel {}: reference {}, prediction {}", i, r, p));
    }
    ++counts_[static_cast<size_t>(r * k_ + p)];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw ShapeError("cannot merge confusion matrices of different sizes");
  for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

Metrics compute_metrics(const ConfusionMatrix& cm, const std::set<int>& exclude) {
  const int k = cm.num_classes();
  Metrics m;
  m.iou.resize(static_cast<size_t>(k));
  m.f1.resize(static_cast<size_t>(k));
  double iou_sum = 0, f1_sum = 0;
  int n = 0;
  int64_t correct = 0, counted = 0;
  for (int c = 0; c < k; ++c) {
    int64_t row = 0, col = 0;
    for (int j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    if (exclude.count(c)) continue;
    const int64_t tp = cm.at(c, c), fn = row - tp, fp = col - tp;
    correct += tp;
    counted += row;
    if (row + col == 0) continue;
    const double iou = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    m.iou[static_cast<size_t>(c)] = iou;
    m.f1[static_cast<size_t>(c)] = f1;
    iou_sum += iou;
    f1_sum += f1;
    ++n;
  }
  if (n > 0) {
    m.miou = iou_sum / n;
    m.mean_f1 = f1_sum / n;
  }
  if (counted > 0) m.oa = static_cast<double>(correct) / static_cast<double>(counted);
  return m;
}

std::set<int> metric_exclusions(DatasetKind d, int num_classes) {
  if (d == DatasetKind::potsdam && num_classes == 6) return {5};
  return {};
}

std::string format_report(const Metrics& m, const std::vector<std::string>& class_names,
                          const std::set<int>& exclude, const std::string& header) {
  const auto pct = [](const std::optional<double>& v) { return v ? fmt::format("{:7.2f}", 100.0 * *v) : std::string("    n/a"); };
  std::string out = header;
  if (!out.empty() && out.back() != '\n') out += '\n';
  if (!exclude.empty()) {
    std::vector<std::string> names;
    for (int c : exclude) {
      names.push_back(c < static_cast<int>(class_names.size()) ? class_names[static_cast<size_t>(c)]
                                                               : std::to_string(c));
    }
    out += "# excluded from means and OA (reference pixels): " + boost::algorithm::join(names, ", ") + "\n";
  }
  out += fmt::format("{:<22}{:>8}{:>8}\n", "class", "IoU", "F1");
  for (size_t c = 0; c < m.iou.size(); ++c) {
    const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
    if (exclude.count(static_cast<int>(c))) {
      out += fmt::format("{:<22}{:>16}\n", name, "excluded");
    } else {
      out += fmt::format("{:<22} {} {}\n", name, pct(m.iou[c]), pct(m.f1[c]));
    }
  }
  out += fmt::format("{:<22} {}\n", "mIoU", pct(m.miou));
  out += fmt::format("{:<22} {}\n", "MeanF1", pct(m.mean_f1));
  out += fmt::format("{:<22} {}\n", "OA", pct(m.oa));
  return out;
}

// ---- TTA ---------------------------------------------------------------------

std::string to_string(TtaTransform t) {
  switch (t) {
    case TtaTransform::identity: return "identity";
    case TtaTransform::hflip: return "hflip";
    case TtaTransform::vflip: return "vflip";
    case TtaTransform::rot90: return "rot90";
    case TtaTransform::rot180: return "rot180";
    case TtaTransform::rot270: return "rot270";
  }
  return "?";
}

TtaSpec parse_tta(std::string_view text, const std::vector<double>& msc_scales) {
  TtaSpec spec;
  std::vector<std::string> tokens;
  boost::algorithm::split(tokens, text, boost::is_any_of(","));
  const auto add = [&](TtaTransform t) {
    if (std::find(spec.transforms.begin(), spec.transforms.end(), t) == spec.transforms.end()) {
      spec.transforms.push_back(t);
    }
  };
  for (auto tok : tokens) {
    boost::algorithm::trim(tok);
    if (tok.empty() || tok == "none" || tok == "identity") continue;
    if (tok == "hflip") {
      add(TtaTransform::hflip);
    } else if (tok == "vflip") {
      add(TtaTransform::vflip);
    } else if (tok == "rot90") {
      add(TtaTransform::rot90);
    } else if (tok == "rot180") {
      add(TtaTransform::rot180);
    } else if (tok == "rot270") {
      add(TtaTransform::rot270);
    } else if (tok == "msc") {
      if (msc_scales.empty()) throw ConfigError("msc requested with an empty scale set");
      for (double s : msc_scales) {
        if (!(s > 0)) throw ConfigError(fmt::format("TTA scale must be positive, got {}", s));
      }
      spec.scales = msc_scales;
    } else {
      throw ConfigError("TTA transform '" + tok + "' has no exact inverse or is unknown");
    }
  }
  return spec;
}

template <typename T>
Tensor<T> apply_transform(const Tensor<T>& x, TtaTransform t, bool inverse) {
  if (x.rank() != 4) throw ShapeError("apply_transform expects rank 4, got " + shape_str(x.shape()));
  if (inverse) {
    if (t == TtaTransform::rot90) {
      t = TtaTransform::rot270;
    } else if (t == TtaTransform::rot270) {
      t = TtaTransform::rot90;
    }
  }
  if (t == TtaTransform::identity) return x;
  const int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const bool swap = t == TtaTransform::rot90 || t == TtaTransform::rot270;
  const int64_t oh = swap ? w : h, ow = swap ? h : w;
  Tensor<T> out({x.dim(0), x.dim(1), oh, ow});
  for (int64_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * h * w;
    T* dst = out.data() + p * oh * ow;
    for (int64_t i = 0; i < oh; ++i) {
      for (int64_t j = 0; j < ow; ++j) {
        int64_t si = i, sj = j;
        switch (t) {
          case TtaTransform::hflip: sj = w - 1 - j; break;
          case TtaTransform::vflip: si = h - 1 - i; break;
          case TtaTransform::rot180: si = h - 1 - i; sj = w - 1 - j; break;
          // Counter-clockwise quarter turn.
          case TtaTransform::rot90: si = j; sj = w - 1 - i; break;
          case TtaTransform::rot270: si = h - 1 - j; sj = i; break;
          case TtaTransform::identity: break;
        }
        dst[i * ow + j] = src[si * w + sj];
      }
    }
  }
  return out;
}

template Tensor<float> apply_transform<float>(const Tensor<float>&, TtaTransform, bool);
template Tensor<double> apply_transform<double>(const Tensor<double>&, TtaTransform, bool);

LogitFn padded_logits(RemoteNet<float>& net, int multiple) {
  return [&net, multiple](const Tensor<float>& x) {
    net.set_mode(Mode::eval);
    const int64_t h = x.dim(2), w = x.dim(3);
    const int64_t ph = (h + multiple - 1) / multiple * multiple, pw = (w + multiple - 1) / multiple * multiple;
    NoGradGuard guard;
    Var<float> in(x);
    if (ph != h || pw != w) {
      in = ops::pad2d(in, 0, static_cast<int>(ph - h), 0, static_cast<int>(pw - w), ops::PadMode::zero);
    }
    Var<float> logits = net.forward(in);
    if (ph != h || pw != w) logits = ops::crop2d(logits, 0, 0, h, w);
    return logits.value();
  };
}

namespace {

Tensor<float> softmax_channels(const Tensor<float>& logits) {
  const int64_t n = logits.dim(0), k = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  Tensor<float> out(logits.shape());
  for (int64_t b = 0; b < n; ++b) {
    const float* src = logits.data() + b * k * plane;
    float* dst = out.data() + b * k * plane;
    for (int64_t i = 0; i < plane; ++i) {
      float mx = src[i];
      for (int64_t c = 1; c < k; ++c) mx = std::max(mx, src[c * plane + i]);
      double sum = 0;
      for (int64_t c = 0; c < k; ++c) {
        const float e = std::exp(src[c * plane + i] - mx);
        dst[c * plane + i] = e;
        sum += e;
      }
      const auto inv = static_cast<float>(1.0 / sum);
      for (int64_t c = 0; c < k; ++c) dst[c * plane + i] *= inv;
    }
  }
  return out;
}

Tensor<float> resize(const Tensor<float>& x, int64_t h, int64_t w) {
  if (x.dim(2) == h && x.dim(3) == w) return x;
  NoGradGuard guard;
  return ops::resize_bilinear(Var<float>(x), h, w).value();
}

void check_image(const Tensor<float>& image) {
  if (image.rank() != 4 || image.dim(0) != 1) {
    throw ShapeError("expected a single image [1, C, H, W], got " + shape_str(image.shape()));
  }
}

}  // namespace

Tensor<float> predict_probs(const LogitFn& f, const Tensor<float>& image, const TtaSpec& spec) {
  check_image(image);
  const int64_t h = image.dim(2), w = image.dim(3);
  std::vector<double> acc;
  Shape shape;
  int count = 0;
  for (double s : spec.scales) {
    const int64_t sh = std::max<int64_t>(1, std::llround(h * s)), sw = std::max<int64_t>(1, std::llround(w * s));
    const Tensor<float> scaled = resize(image, sh, sw);
    for (auto t : spec.transforms) {
      Tensor<float> probs = softmax_channels(f(apply_transform(scaled, t, false)));
      probs = resize(apply_transform(probs, t, true), h, w);
      if (acc.empty()) {
        shape = probs.shape();
        acc.assign(static_cast<size_t>(probs.numel()), 0.0);
      }
      for (int64_t i = 0; i < probs.numel(); ++i) acc[static_cast<size_t>(i)] += probs[i];
      ++count;
    }
  }
  if (count == 0) throw ConfigError("TTA spec has no transforms or scales");
  Tensor<float> out(shape);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>(acc[static_cast<size_t>(i)] / count);
  return out;
}

Tensor<float> predict_probs_sliding(const LogitFn& f, const Tensor<float>& image, const TtaSpec& spec, int window,
                                    int stride) {
  check_image(image);
  const int64_t h = image.dim(2), w = image.dim(3);
  if (h <= window && w <= window) return predict_probs(f, image, spec);
  const int64_t wh = std::min<int64_t>(window, h), ww = std::min<int64_t>(window, w);
  std::vector<double> acc;
  std::vector<int> hits(static_cast<size_t>(h * w), 0);
  int64_t k = 0;
  for (auto y : axis_offsets(h, wh, stride)) {
    for (auto x : axis_offsets(w, ww, stride)) {
      Tensor<float> tile;
      {
        NoGradGuard guard;
        tile = ops::crop2d(Var<float>(image), y, x, wh, ww).value();
      }
      const Tensor<float> probs = predict_probs(f, tile, spec);
      if (acc.empty()) {
        k = probs.dim(1);
        acc.assign(static_cast<size_t>(k * h * w), 0.0);
      }
      for (int64_t c = 0; c < k; ++c) {
        for (int64_t i = 0; i < wh; ++i) {
          for (int64_t j = 0; j < ww; ++j) acc[static_cast<size_t>((c * h + y + i) * w + x + j)] += probs[(c * wh + i) * ww + j];
        }
      }
      for (int64_t i = 0; i < wh; ++i) {
        for (int64_t j = 0; j < ww; ++j) ++hits[static_cast<size_t>((y + i) * w + x + j)];
      }
    }
  }
  Tensor<float> out({1, k, h, w});
  for (int64_t c = 0; c < k; ++c) {
    for (int64_t i = 0; i < h * w; ++i) {
      out[c * h * w + i] = static_cast<float>(acc[static_cast<size_t>(c * h * w + i)] / hits[static_cast<size_t>(i)]);
    }
  }
  return out;
}

LabelMap argmax_labels(const Tensor<float>& probs) {
  check_image(probs);
  const int64_t k = probs.dim(1), h = probs.dim(2), w = probs.dim(3), plane = h * w;
  LabelMap out({h, w});
  for (int64_t i = 0; i < plane; ++i) {
    int32_t best = 0;
    float bv = probs[i];
    for (int64_t c = 1; c < k; ++c) {
      if (probs[c * plane + i] > bv) {
        bv = probs[c * plane + i];
        best = static_cast<int32_t>(c);
      }
    }
    out[i] = best;
  }
  return out;
}

LabelMap predict_tta(RemoteNet<float>& net, const Tensor<float>& image, const TtaSpec& spec) {
  return argmax_labels(predict_probs(padded_logits(net), image, spec));
}

EvalSetup make_eval_setup(const RunConfig& cfg) {
  EvalSetup s;
  s.tta = parse_tta(cfg.eval.tta, cfg.eval.scales);
  s.window = cfg.eval.window;
  s.stride = cfg.eval.stride;
  s.mean = cfg.data.mean;
  s.std = cfg.data.std;
  return s;
}

ConfusionMatrix evaluate(const LogitFn& f, const Dataset& data, int num_classes, const EvalSetup& setup,
                         const std::function<void(size_t, const Sample&, const LabelMap&)>& on_prediction) {
  ConfusionMatrix cm(num_classes);
  for (size_t i = 0; i < data.size(); ++i) {
    const Sample s = data.get(i);
    const Tensor<float> x = normalize_image(s.image, setup.mean, setup.std);
    const LabelMap pred =
        argmax_labels(predict_probs_sliding(f, x.reshaped({1, 3, x.dim(1), x.dim(2)}), setup.tta, setup.window,
                                            setup.stride));
    cm.update(pred, s.label);
    if (on_prediction) on_prediction(i, s, pred);
  }
  return cm;
}

ConfusionMatrix evaluate(RemoteNet<float>& net, const Dataset& data, const EvalSetup& setup) {
  return evaluate(padded_logits(net), data, net.config().num_classes, setup);
}

double pixel_accuracy(RemoteNet<float>& net, const Dataset& data, const std::array<double, 3>& mean,
                      const std::array<double, 3>& std) {
  const LogitFn f = padded_logits(net);
  int64_t correct = 0, total = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    const Sample s = data.get(i);
    const Tensor<float> x = normalize_image(s.image, mean, std);
    const LabelMap pred = argmax_labels(f(x.reshaped({1, 3, x.dim(1), x.dim(2)})));
    for (int64_t p = 0; p < pred.numel(); ++p) {
      if (s.label[p] == kIgnoreIndex) continue;
      ++total;
      correct += pred[p] == s.label[p];
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace remotenet
