#pragma once

#include <string>

#include "remotenet/config.hpp"
#include "remotenet/layers.hpp"

namespace remotenet {

/// Sum of 1x1, 3x3 and 5x5 bias-free convolutions, each followed by batch norm.
void declare_local_branch(ParamLayout& l, const std::string& prefix, int channels);
template <typename T>
Var<T> local_branch(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, const ForwardContext& ctx);

/// Window multi-head self-attention with a (2w-1)^2 relative-position bias.
/// Maps larger than the window are reflect-padded to a multiple of it and
/// tiled; a map that fits inside one window is a single unpadded tile.
void declare_window_mhsa(ParamLayout& l, const std::string& prefix, int channels, int heads, int window);
template <typename T>
Var<T> window_mhsa(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, int window, int heads,
                   Var<T>* weights = nullptr);

/// Padded extent and tile count used by window_mhsa for one spatial axis.
struct WindowTiling {
  int64_t tile;
  int64_t padded;
  int64_t count;
};
WindowTiling window_tiling(int64_t extent, int window);

/// Depthwise 3x3 (no bias) followed by pointwise 1x1.
void declare_dwsep_conv(ParamLayout& l, const std::string& prefix, int channels);
template <typename T>
Var<T> dwsep_conv(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x);

/// out = DWSepConv(window_mhsa(x) + local_branch(x))
void declare_gla(ParamLayout& l, const std::string& prefix, int channels, int heads, int window);
template <typename T>
Var<T> gla(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, int window, int heads,
           const ForwardContext& ctx);

/// y = x + gla(BN1(x)); out = y + mix_ffn(BN2(y)). Residuals are dropped when
/// cfg.gltb_residual is false.
void declare_gltb(ParamLayout& l, const std::string& prefix, const ModelConfig& cfg);
template <typename T>
Var<T> gltb_forward(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, const ModelConfig& cfg,
                    const ForwardContext& ctx);

}  // namespace remotenet
