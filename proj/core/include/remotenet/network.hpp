#pragma once

#include <array>
#include <string>

#include "remotenet/config.hpp"
#include "remotenet/encoder.hpp"
#include "remotenet/layers.hpp"
#include "remotenet/params.hpp"

namespace remotenet {

/// Complete parameter layout for cfg, including its ablation variant.
ParamLayout declare_network(const ModelConfig& cfg);

enum class Mode { train, eval };

/// Encoder -> per-scale 1x1 projection -> GLTB/fusion ladder -> FRM -> head.
template <typename T>
class RemoteNet {
 public:
  /// Throws ConfigError for an invalid cfg and ShapeError when params do not
  /// match the layout cfg implies.
  RemoteNet(ModelConfig cfg, ParamStore<T> params);

  const ModelConfig& config() const { return cfg_; }
  const ParamStore<T>& params() const { return params_; }
  ParamStore<T>& params() { return params_; }

  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }
  void set_bn_momentum(double m) { bn_momentum_ = m; }

  /// Logits [B, num_classes, H, W]. Train mode updates batch-norm running
  /// statistics, so it must not run concurrently with anything else.
  Var<T> forward(const Var<T>& x);

  /// Graph-free forward of a plain tensor in the current mode.
  Tensor<T> predict(const Tensor<T>& x);

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  Mode mode_ = Mode::eval;
  double bn_momentum_ = 0.1;
};

/// Network with the given ablation variant substituted into cfg, initialized
/// with init_params(cfg, seed).
template <typename T>
RemoteNet<T> make_variant(ModelConfig cfg, Ablation variant, unsigned long long seed = 0);
/// Variant by name; unknown names throw ConfigError.
template <typename T>
RemoteNet<T> make_variant(ModelConfig cfg, std::string_view variant, unsigned long long seed = 0);

inline constexpr std::array<Ablation, 5> kAllVariants{Ablation::full, Ablation::no_amm, Ablation::frm_two_branch,
                                                      Ablation::no_frm, Ablation::no_fusion};

}  // namespace remotenet
