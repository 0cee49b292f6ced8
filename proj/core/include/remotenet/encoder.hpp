#pragma once

#include <array>
#include <string>
#include <vector>

#include "remotenet/config.hpp"
#include "remotenet/layers.hpp"

namespace remotenet {

template <typename T>
struct StageFeature {
  Var<T> tensor;
  int stage_index;  // 1..4
  int stride_from_input;
};

/// Query/key/value tokens, each [batch, tokens, channels].
template <typename T>
struct AttentionInputs {
  Var<T> q, k, v;
  int heads = 1;
};

template <typename T>
struct AttentionResult {
  Var<T> out;      // [batch, tokens_q, channels]
  Var<T> weights;  // softmax rows, [batch * heads, tokens_q, tokens_kv]
};

/// 1/sqrt(head_dim) or 1/sqrt(channels) depending on the configured mode.
double attention_scale(int channels, int heads, AttnScale mode);

/// Per-head Softmax(Q K^T * scale + bias) V on head-split tensors
/// [B * heads, N, d]. `bias`, when defined, is [1 or B, heads, Nq, Nk].
template <typename T>
AttentionResult<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, double scale,
                                        const Var<T>& bias);

/// Multi-head self-attention over token tensors, head_dim scaling.
template <typename T>
AttentionResult<T> self_attention(const AttentionInputs<T>& inp, AttnScale mode = AttnScale::head_dim);

// ---- overlap patch embedding ----------------------------------------------

void declare_patch_embed(ParamLayout& l, const std::string& prefix, int cin, int cout, int kernel);
/// Strided convolution (padding kernel/2) followed by channel layer norm.
/// Throws ConfigError when stride <= 0 or kernel < stride.
template <typename T>
Var<T> overlap_patch_embed(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, int kernel,
                           int stride);

// ---- 2D positional attention ----------------------------------------------

/// Rows of a (2r+1)^2 relative-position table for every (query, key) pair.
/// Query (i, j) on a qh x qw grid maps onto the key grid as (i / ratio, j / ratio);
/// offsets to key (p, q) are clamped to [-radius, radius] per axis.
std::vector<int64_t> relative_position_index(int64_t qh, int64_t qw, int64_t kh, int64_t kw, int ratio, int radius);

/// Adds table[index] (table [(2r+1)^2, heads]) to logits [B, heads, Nq, Nk].
template <typename T>
Var<T> positional_attention_2d(const Var<T>& logits, const Var<T>& table, const std::vector<int64_t>& index);

// ---- efficient self-attention ---------------------------------------------

void declare_efficient_attention(ParamLayout& l, const std::string& prefix, int channels, int heads, int sr_ratio,
                                 int pos_radius);
/// Q from full resolution; K and V from a map reduced by a sr x sr strided
/// convolution (+ layer norm). Output has the input shape. When `weights` is
/// non-null it receives the softmax rows.
template <typename T>
Var<T> efficient_self_attention(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, int sr_ratio,
                                int heads, const ModelConfig& cfg, Var<T>* weights = nullptr);

// ---- encoder ----------------------------------------------------------------

void declare_encoder(ParamLayout& l, const ModelConfig& cfg);

std::string encoder_stage_prefix(int stage);
std::string encoder_block_prefix(int stage, int block);

/// Four stages of patch embedding and pre-norm transformer blocks. Input
/// height and width must be multiples of the total stride.
template <typename T>
std::array<StageFeature<T>, 4> encoder_forward(const Var<T>& x, const ModelConfig& cfg, const ParamStore<T>& p);

}  // namespace remotenet
