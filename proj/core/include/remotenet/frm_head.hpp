#pragma once

#include <string>

#include "remotenet/config.hpp"
#include "remotenet/layers.hpp"

namespace remotenet {

/// Feature refinement over the fused shallow-encoder / deep-decoder map.
///   b1 = DW(k0)(x), b2 = DW(k1)(x), b3 = Conv1x1(x)
///   y  = x + b3 + Conv1x1(concat(b1, b2))
///   out = y + GELU(BN(Conv3x3(y)))
/// frm_two_branch drops b3; no_frm is the identity.
void declare_frm(ParamLayout& l, const std::string& prefix, const ModelConfig& cfg);
template <typename T>
Var<T> frm_forward(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, const ModelConfig& cfg,
                   const ForwardContext& ctx);

/// Conv1x1 to num_classes followed by bilinear upsampling to out_h x out_w.
void declare_seg_head(ParamLayout& l, const std::string& prefix, const ModelConfig& cfg);
template <typename T>
Var<T> seg_head(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, const ModelConfig& cfg,
                int64_t out_h, int64_t out_w);

}  // namespace remotenet
