#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "remotenet/config.hpp"
#include "remotenet/datasets.hpp"
#include "remotenet/network.hpp"

namespace remotenet {

/// K x K counts, rows = reference class, columns = predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  int num_classes() const { return k_; }
  int64_t at(int ref, int pred) const { return counts_[static_cast<size_t>(ref * k_ + pred)]; }
  int64_t& at(int ref, int pred) { return counts_[static_cast<size_t>(ref * k_ + pred)]; }
  int64_t total() const;

  /// Skips pixels whose reference is kIgnoreIndex. Other out-of-range values
  /// in either map raise DataError.
  void update(const LabelMap& pred, const LabelMap& ref);
  void merge(const ConfusionMatrix& other);

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  int k_;
  std::vector<int64_t> counts_;
};

/// Per-class values are empty for excluded classes and for classes absent
/// from both prediction and reference; aggregates are empty when nothing
/// remains to average (for instance an empty matrix).
struct Metrics {
  std::vector<std::optional<double>> iou;
  std::vector<std::optional<double>> f1;
  std::optional<double> miou;
  std::optional<double> mean_f1;
  std::optional<double> oa;
};

/// IoU = TP/(TP+FP+FN), F1 = 2TP/(2TP+FP+FN). Excluded classes leave the
/// means and, as reference pixels, both sides of the OA ratio.
Metrics compute_metrics(const ConfusionMatrix& cm, const std::set<int>& exclude = {});

/// Classes excluded from metrics for a dataset (Potsdam: clutter).
std::set<int> metric_exclusions(DatasetKind d, int num_classes);

std::string format_report(const Metrics& m, const std::vector<std::string>& class_names,
                          const std::set<int>& exclude, const std::string& header);

// ---- test-time augmentation -----------------------------------------------

enum class TtaTransform { identity, hflip, vflip, rot90, rot180, rot270 };

std::string to_string(TtaTransform t);

struct TtaSpec {
  std::vector<TtaTransform> transforms{TtaTransform::identity};
  std::vector<double> scales{1.0};
};

/// Comma-separated tokens: none, identity, hflip, vflip, rot90, rot180,
/// rot270, msc (use `msc_scales`). Identity is always included.
TtaSpec parse_tta(std::string_view text, const std::vector<double>& msc_scales = {0.75, 1.0, 1.25});

/// Applies t (or its inverse) to the last two axes of a rank-4 tensor.
template <typename T>
Tensor<T> apply_transform(const Tensor<T>& x, TtaTransform t, bool inverse);

/// Normalized images [1, 3, H, W] -> logits [1, K, H, W].
using LogitFn = std::function<Tensor<float>(const Tensor<float>&)>;

/// Eval-mode forward of net that pads H and W up to a multiple of `multiple`
/// (zeros, bottom/right) and crops the logits back.
LogitFn padded_logits(RemoteNet<float>& net, int multiple = 32);

/// Softmax probabilities [1, K, H, W] averaged over every transform x scale.
Tensor<float> predict_probs(const LogitFn& f, const Tensor<float>& image, const TtaSpec& spec);

/// Probabilities averaged over overlapping window x window tiles; an image
/// no larger than the window is processed whole.
Tensor<float> predict_probs_sliding(const LogitFn& f, const Tensor<float>& image, const TtaSpec& spec, int window,
                                    int stride);

/// Per-pixel argmax of [1, K, H, W]; ties go to the lowest class index.
LabelMap argmax_labels(const Tensor<float>& probs);

LabelMap predict_tta(RemoteNet<float>& net, const Tensor<float>& image, const TtaSpec& spec);

struct EvalSetup {
  TtaSpec tta;
  int window = 1024;
  int stride = 512;
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> std{0.5, 0.5, 0.5};
};

EvalSetup make_eval_setup(const RunConfig& cfg);

/// Accumulates the confusion matrix of `f` over every sample of `data`.
ConfusionMatrix evaluate(const LogitFn& f, const Dataset& data, int num_classes, const EvalSetup& setup,
                         const std::function<void(size_t, const Sample&, const LabelMap&)>& on_prediction = {});

ConfusionMatrix evaluate(RemoteNet<float>& net, const Dataset& data, const EvalSetup& setup);

/// Fraction of non-ignored pixels predicted correctly (plain forward, eval mode).
double pixel_accuracy(RemoteNet<float>& net, const Dataset& data, const std::array<double, 3>& mean,
                      const std::array<double, 3>& std);

}  // namespace remotenet
