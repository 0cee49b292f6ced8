#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace remotenet {

enum class Preset { loveda, potsdam, tiny };

/// Table III ablations plus the full model.
enum class Ablation { full, no_amm, frm_two_branch, no_frm, no_fusion };

/// Denominator of the attention logits: sqrt(head_dim) or sqrt(channels).
enum class AttnScale { head_dim, channels };

/// How channel scores gate the two fusion branches.
///   shared:            one AMM on e + d gates both branches
///   per_branch_self:   AMM_e(e) gates e, AMM_d(d) gates d
///   per_branch_cross:  AMM_e(e) gates d, AMM_d(d) gates e
enum class AmmMode { shared, per_branch_self, per_branch_cross };

struct ModelConfig {
  std::array<int, 4> stage_dims{64, 128, 320, 512};
  std::array<int, 4> stage_depths{3, 4, 6, 3};
  std::array<int, 4> stage_heads{1, 2, 5, 8};
  std::array<int, 4> sr_ratios{8, 4, 2, 1};
  std::array<int, 4> patch_strides{4, 2, 2, 2};
  std::array<int, 4> patch_kernels{7, 3, 3, 3};
  int in_channels = 3;
  int mlp_ratio = 4;
  // Relative-position bias tables cover offsets in [-radius, radius] on the
  // key grid; larger offsets clamp to the border entry.
  int pos_bias_radius = 15;
  AttnScale attn_scale = AttnScale::head_dim;

  int decoder_dim = 64;
  int decoder_heads = 8;
  int decoder_mlp_ratio = 4;
  int window_size = 8;
  int gltb_per_scale = 1;
  bool gltb_residual = true;
  AmmMode amm_mode = AmmMode::shared;
  std::array<int, 2> frm_kernels{3, 5};

  int num_classes = 7;
  Ablation ablation = Ablation::full;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

ModelConfig default_config(Preset preset);
/// Throws ConfigError for unknown names.
ModelConfig default_config(std::string_view preset);

/// Every violated invariant as a human-readable message; empty when valid.
std::vector<std::string> validate_config(const ModelConfig& cfg);
/// Throws ConfigError listing all violations.
void require_valid(const ModelConfig& cfg);

/// Product of the first `stage + 1` patch strides.
int stage_stride(const ModelConfig& cfg, int stage);
int total_stride(const ModelConfig& cfg);

std::string to_string(Preset p);
std::string to_string(Ablation a);
std::string to_string(AttnScale s);
std::string to_string(AmmMode m);
Ablation parse_ablation(std::string_view s);
AttnScale parse_attn_scale(std::string_view s);
AmmMode parse_amm_mode(std::string_view s);
Preset parse_preset(std::string_view s);

// ---- run configuration ------------------------------------------------------

enum class DatasetKind { loveda, potsdam, toy };

std::string to_string(DatasetKind d);
DatasetKind parse_dataset(std::string_view s);

struct TrainOptions {
  double lr = 6e-5;
  double lr_min = 0.0;
  int epochs = 50;
  int batch_size = 8;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // 0 disables global-norm clipping
  double bn_momentum = 0.1;
  int max_steps = 0;       // 0 = epochs * steps_per_epoch
  unsigned long long seed = 0;

  friend bool operator==(const TrainOptions&, const TrainOptions&) = default;
};

struct DataOptions {
  DatasetKind dataset = DatasetKind::loveda;
  std::string root;  // empty: REMOTENET_DATA
  int crop = 512;
  double scale_min = 0.5;
  double scale_max = 1.5;
  bool hflip = true;
  bool vflip = false;
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> std{0.5, 0.5, 0.5};
  std::string rendition = "RGB";  // Potsdam: RGB or IRRG
  std::string palette;            // empty: built-in ISPRS colors
  int patch_size = 1024;
  int patch_stride = 512;
  int toy_count = 4;
  int toy_size = 64;
  int workers = 1;

  friend bool operator==(const DataOptions&, const DataOptions&) = default;
};

struct EvalOptions {
  std::string tta = "none";
  std::vector<double> scales{0.75, 1.0, 1.25};
  int window = 1024;
  int stride = 512;

  friend bool operator==(const EvalOptions&, const EvalOptions&) = default;
};

struct RunConfig {
  std::string preset = "loveda";
  ModelConfig model = default_config(Preset::loveda);
  TrainOptions train;
  DataOptions data;
  EvalOptions eval;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// INI-style text: [model], [train], [data], [eval] sections of key = value.
/// In [model], `preset` is applied first and other keys override it.
/// Unknown sections or keys raise ConfigError.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string to_text(const RunConfig& rc);

/// Run defaults matching the published training protocol for a dataset.
RunConfig protocol_run_config(DatasetKind dataset);

}  // namespace remotenet
