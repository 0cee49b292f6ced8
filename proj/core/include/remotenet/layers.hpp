#pragma once

#include <string>

#include "remotenet/ops.hpp"
#include "remotenet/params.hpp"

// Parameterized building blocks shared by the encoder and decoder. Each block
// comes as a declare_* (shapes into a ParamLayout) and a forward function that
// reads the same names back from a ParamStore.

namespace remotenet {

struct ForwardContext {
  bool training = false;
  double bn_momentum = 0.1;
};

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kBatchNormEps = 1e-5;

void declare_conv(ParamLayout& l, const std::string& name, int cin, int cout, int kernel, int groups = 1,
                  bool bias = true);
void declare_layer_norm(ParamLayout& l, const std::string& name, int channels);
void declare_batch_norm(ParamLayout& l, const std::string& name, int channels);

/// Uses `name.weight` and, when present, `name.bias`.
template <typename T>
Var<T> conv(const ParamStore<T>& p, const std::string& name, const Var<T>& x, int stride = 1, int pad = 0,
            int groups = 1);

/// Layer normalization over the channel axis of [N, C, ...].
template <typename T>
Var<T> layer_norm(const ParamStore<T>& p, const std::string& name, const Var<T>& x);

template <typename T>
Var<T> batch_norm(const ParamStore<T>& p, const std::string& name, const Var<T>& x, const ForwardContext& ctx);

/// Mix-FFN: 1x1 expand -> 3x3 depthwise -> GELU -> 1x1 project.
void declare_mix_ffn(ParamLayout& l, const std::string& prefix, int channels, int expansion);
template <typename T>
Var<T> mix_ffn(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x);

/// Tokens of a [B, C, H, W] map split into heads: [B * heads, H * W, C / heads].
template <typename T>
Var<T> to_heads(const Var<T>& x, int heads);
/// Inverse of to_heads for a given spatial extent.
template <typename T>
Var<T> from_heads(const Var<T>& x, int64_t batch, int heads, int64_t h, int64_t w);

}  // namespace remotenet
