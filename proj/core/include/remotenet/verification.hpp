#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "remotenet/evaluation.hpp"
#include "remotenet/network.hpp"

namespace remotenet {

// ---- finite-difference gradient check ------------------------------------------

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  int coords = 8;  // sampled per parameter (all of them when fewer exist)
  unsigned long long seed = 0;
};

struct GradEntry {
  std::string name;
  int coords = 0;
  double max_rel_err = 0;
  double max_abs_grad = 0;
};

struct GradReport {
  std::vector<GradEntry> entries;
  double tol = 1e-4;

  bool pass() const;
  const GradEntry* worst() const;
  int64_t coords() const;
  std::string to_text() const;
};

/// Compares backward() against central differences (L(t+h) - L(t-h)) / 2h on
/// sampled coordinates of every parameter that takes gradients. `loss` must
/// rebuild the graph from the current parameter values on every call.
/// rel err = |a - n| / max(|a|, |n|, 1e-8).
GradReport grad_check(const ParamStore<double>& params, const std::function<Var<double>()>& loss,
                      const GradCheckOptions& opts = {});

/// Cross-entropy of net(x) against labels with frozen (eval-mode) normalization.
GradReport grad_check(RemoteNet<double>& net, const Tensor<double>& x, const LabelMap& labels,
                      const GradCheckOptions& opts = {});

/// Replaces values with well-conditioned random ones (weights ~ N(0, 1/fan_in),
/// perturbed norm affines and running statistics) so gradients are far from
/// the finite-difference noise floor.
void randomize_params(ParamStore<double>& params, unsigned long long seed);

struct GradProblem {
  Tensor<double> x;  // [1, 3, hw, hw]
  LabelMap labels;   // [1, hw, hw], a few pixels ignored
};
GradProblem make_grad_problem(int hw, int num_classes, unsigned long long seed);

// ---- metric oracle ----------------------------------------------------------------

/// Metrics computed by enumerating pixels, without a confusion matrix.
struct OracleMetrics {
  std::vector<int64_t> tp, fp, fn;
  std::vector<std::optional<double>> iou, f1;
  std::optional<double> miou, mean_f1, oa;
};

OracleMetrics metric_oracle(const LabelMap& pred, const LabelMap& ref, int num_classes, const std::set<int>& exclude);

/// Exact agreement of presence/undefined flags and counts, ratios within tol.
bool metrics_agree(const ConfusionMatrix& cm, const Metrics& m, const OracleMetrics& o, double tol,
                   std::string* why = nullptr);

// ---- parameter counts ---------------------------------------------------------------

/// Closed-form count of trainable parameters for cfg with `variant` substituted.
int64_t param_count_oracle(const ModelConfig& cfg, Ablation variant);

// ---- overfit harness ----------------------------------------------------------------

struct OverfitResult {
  int64_t steps = 0;
  double accuracy = 0;
  double final_loss = 0;
  ParamStore<float> params;
};

/// Trains the toy protocol (tiny model, toy_dataset(4, 64, 3, seed)) for at most
/// max_steps and reports train pixel accuracy.
OverfitResult overfit_toy(int64_t max_steps, unsigned long long seed = 0);

// ---- suites ---------------------------------------------------------------------------

struct SuiteResult {
  std::string name;
  bool pass = true;
  std::vector<std::string> lines;  // one per check, prefixed PASS/FAIL

  void check(bool ok, const std::string& what);
};

/// shapes, gradients, attention, metrics, ablations.
const std::vector<std::string>& suite_names();

/// Unknown names raise ConfigError. `progress` receives lines as checks finish.
SuiteResult run_suite(const std::string& name, const std::function<void(const std::string&)>& progress = {});

/// Independent loop implementation of multi-head attention with a relative
/// position table over a single [1, C, H, W] map (every token attends to
/// every token), using params q/k/v/proj/pos_table under `prefix`.
Tensor<double> dense_attention_oracle(const ParamStore<double>& p, const std::string& prefix, const Tensor<double>& x,
                                      int heads, int radius);

}  // namespace remotenet
