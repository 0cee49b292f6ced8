#pragma once

#include <string>

#include "remotenet/config.hpp"
#include "remotenet/layers.hpp"

namespace remotenet {

/// Channel attention scores [B, C, 1, 1], every value in (0, 1).
template <typename T>
struct ChannelScores {
  Var<T> scores;
};

/// Attention map module: sigmoid(GAP(GELU(Conv1x1(input)))).
void declare_amm(ParamLayout& l, const std::string& prefix, int channels);
template <typename T>
ChannelScores<T> amm_scores(const ParamStore<T>& p, const std::string& prefix, const Var<T>& input);

/// AMM over the sum of an encoder and a decoder feature of equal shape.
template <typename T>
ChannelScores<T> amm(const ParamStore<T>& p, const std::string& prefix, const Var<T>& e, const Var<T>& d);

/// Fusion of an encoder feature e (already projected to decoder_dim) with a
/// decoder feature d at the same resolution:
///   s = AMM(e + d); f = s * Conv1x1(e) + s * Conv1x1(d);
///   out = f + GELU(BN(Conv3x3(f)))
/// no_amm forces s = 1; no_fusion returns e + d with no parameters.
void declare_fusion(ParamLayout& l, const std::string& prefix, const ModelConfig& cfg);
template <typename T>
Var<T> fuse(const ParamStore<T>& p, const std::string& prefix, const Var<T>& e, const Var<T>& d, const ModelConfig& cfg,
            const ForwardContext& ctx);

}  // namespace remotenet
