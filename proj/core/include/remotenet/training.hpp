#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "remotenet/config.hpp"
#include "remotenet/datasets.hpp"
#include "remotenet/network.hpp"

namespace remotenet {

/// Mean cross-entropy over non-ignored pixels (see ops::cross_entropy).
template <typename T>
Var<T> cross_entropy_loss(const Var<T>& logits, const LabelMap& labels) {
  return ops::cross_entropy(logits, labels);
}

struct OptimState {
  std::map<std::string, Tensor<float>> m;  // keyed by parameter name
  std::map<std::string, Tensor<float>> v;
  int64_t t = 0;
  double lr_base = 6e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  friend bool operator==(const OptimState&, const OptimState&) = default;
};

OptimState make_optim_state(const ParamStore<float>& params, const TrainOptions& opt);

/// One decoupled-weight-decay Adam step at learning rate lr:
///   theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
/// Every gradient is checked before anything is updated; a non-finite one
/// raises NumericError naming its parameter. Buffers are skipped.
void adamw_step(ParamStore<float>& params, OptimState& st, double lr);

/// lr_min + (lr_base - lr_min) * (1 + cos(pi * t / total)) / 2.
double cosine_lr(int64_t t, int64_t total, double lr_base, double lr_min = 0.0);

/// Scales all gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping.
double clip_grad_norm(ParamStore<float>& params, double max_norm);

// ---- checkpoints ---------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

struct TrainState {
  int64_t epoch = 0;  // completed epochs
  int64_t step = 0;   // completed optimizer steps
  double best_score = -std::numeric_limits<double>::infinity();
  unsigned long long seed = 0;

  friend bool operator==(const TrainState&, const TrainState&) = default;
};

struct Checkpoint {
  RunConfig cfg;
  ParamStore<float> params;
  OptimState optim;
  TrainState state;
};

/// Directory with `manifest`, `tensors.bin` and `meta`, written to a sibling
/// temporary directory and renamed into place.
void save_checkpoint(const std::string& dir, const Checkpoint& ckpt);

/// Throws CheckpointError for a missing file, version mismatch, corrupt data
/// or a manifest that disagrees with the layout its own config implies.
Checkpoint load_checkpoint(const std::string& dir);

/// Builds a network for `cfg` from checkpointed parameters; a layout mismatch
/// raises ShapeError naming the first differing entry.
RemoteNet<float> restore_network(const Checkpoint& ckpt, const ModelConfig& cfg);

// ---- training loop -------------------------------------------------------------

struct TrainRequest {
  RunConfig cfg;
  std::shared_ptr<const Dataset> train_set;
  std::shared_ptr<const Dataset> val_set;  // optional; best checkpoint tracks val mIoU when set
  std::string out_dir;                     // empty: nothing written
  std::optional<Checkpoint> resume;
  int64_t stop_after = 0;  // stop once this many total steps are done (0: run to the end)
  std::function<void(const std::string&)> log;
};

struct TrainResult {
  std::vector<double> losses;  // one per optimizer step taken in this call
  Checkpoint last;
  int64_t total_steps = 0;
  bool finished = false;
};

int64_t steps_per_epoch(size_t dataset_size, int batch_size);

/// Per epoch: shuffled batches, augmentation, forward, cross-entropy,
/// backward, AdamW with per-step cosine lr. Randomness for step s comes from
/// streams seeded by (seed, epoch) for shuffling and (seed, s, slot) for
/// augmentation, so a resumed run replays the same draws. A non-finite loss
/// writes `<out>/diverged` and throws DivergenceError.
TrainResult train(const TrainRequest& req);

/// Text block echoing every resolved hyperparameter of a run.
std::string describe_run(const RunConfig& cfg);

}  // namespace remotenet
