#include "remotenet/encoder.hpp"

#include <cmath>

namespace remotenet {

double attention_scale(int channels, int heads, AttnScale mode) {
  const double denom = mode == AttnScale::channels ? channels : static_cast<double>(channels) / heads;
  double s = 1.0 / std::sqrt(denom);
  if (faults::active() == faults::Fault::attention_scale) s *= 2.0;
  return s;
}

template <typename T>
AttentionResult<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, double scale,
                                        const Var<T>& bias) {
  if (q.dim(2) != k.dim(2) || k.dim(1) != v.dim(1) || q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0)) {
    throw ShapeError("attention: inconsistent q/k/v shapes " + shape_str(q.shape()) + " " + shape_str(k.shape()) +
                     " " + shape_str(v.shape()));
  }
  if (!q.value().all_finite() || !k.value().all_finite() || !v.value().all_finite()) {
    throw NumericError("attention: non-finite inputs");
  }
  const int64_t bh = q.dim(0), nq = q.dim(1), nk = k.dim(1);
  Var<T> logits = ops::scale(ops::matmul(q, k, false, true), static_cast<T>(scale));
  if (bias.defined()) {
    logits = ops::reshape(logits, {bh / heads, heads, nq, nk});
    logits = ops::add(logits, bias);
    logits = ops::reshape(logits, {bh, nq, nk});
  }
  Var<T> w = ops::softmax_lastdim(logits);
  return {ops::matmul(w, v), w};
}

template <typename T>
AttentionResult<T> self_attention(const AttentionInputs<T>& inp, AttnScale mode) {
  const auto& qs = inp.q.shape();
  if (qs.size() != 3 || inp.k.shape() != inp.v.shape() || inp.k.value().rank() != 3 || qs[2] != inp.k.dim(2) ||
      qs[0] != inp.k.dim(0)) {
    throw ShapeError("self_attention: q/k/v must be [B, N, C] with equal channels");
  }
  const int64_t b = qs[0], nq = qs[1], c = qs[2], nk = inp.k.dim(1);
  const int heads = inp.heads;
  if (heads < 1 || c % heads != 0) throw ShapeError("self_attention: channels not divisible by heads");
  const int64_t d = c / heads;
  auto split = [&](const Var<T>& t, int64_t n) {
    Var<T> r = ops::reshape(t, {b, n, heads, d});
    r = ops::permute(r, {0, 2, 1, 3});
    return ops::reshape(r, {b * heads, n, d});
  };
  auto res = scaled_dot_attention(split(inp.q, nq), split(inp.k, nk), split(inp.v, nk), heads,
                                  attention_scale(static_cast<int>(c), heads, mode), Var<T>());
  Var<T> out = ops::reshape(res.out, {b, heads, nq, d});
  out = ops::permute(out, {0, 2, 1, 3});
  return {ops::reshape(out, {b, nq, c}), res.weights};
}

void declare_patch_embed(ParamLayout& l, const std::string& prefix, int cin, int cout, int kernel) {
  declare_conv(l, prefix + ".proj", cin, cout, kernel);
  declare_layer_norm(l, prefix + ".norm", cout);
}

template <typename T>
Var<T> overlap_patch_embed(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, int kernel,
                           int stride) {
  if (stride <= 0) throw ConfigError("overlap_patch_embed: stride must be positive");
  if (kernel < stride) throw ConfigError("overlap_patch_embed: kernel smaller than stride (patches must overlap)");
  const auto& w = p.at(prefix + ".proj.weight");
  if (w.dim(2) != kernel) throw ShapeError("overlap_patch_embed: weight kernel does not match " + std::to_string(kernel));
  Var<T> y = conv(p, prefix + ".proj", x, stride, kernel / 2);
  return layer_norm(p, prefix + ".norm", y);
}

std::vector<int64_t> relative_position_index(int64_t qh, int64_t qw, int64_t kh, int64_t kw, int ratio, int radius) {
  if (ratio < 1) throw ConfigError("relative_position_index: ratio must be >= 1");
  if ((qh + ratio - 1) / ratio != kh || (qw + ratio - 1) / ratio != kw) {
    throw ShapeError("positional attention: query grid " + std::to_string(qh) + "x" + std::to_string(qw) +
                     " does not reduce to key grid " + std::to_string(kh) + "x" + std::to_string(kw));
  }
  const int64_t side = 2 * radius + 1;
  auto clamp = [radius](int64_t v) { return std::max<int64_t>(-radius, std::min<int64_t>(radius, v)); };
  std::vector<int64_t> idx;
  idx.reserve(static_cast<size_t>(qh * qw * kh * kw));
  for (int64_t i = 0; i < qh; ++i) {
    for (int64_t j = 0; j < qw; ++j) {
      const int64_t ki = i / ratio, kj = j / ratio;
      for (int64_t a = 0; a < kh; ++a) {
        for (int64_t b = 0; b < kw; ++b) {
          idx.push_back((clamp(ki - a) + radius) * side + (clamp(kj - b) + radius));
        }
      }
    }
  }
  return idx;
}

template <typename T>
Var<T> positional_attention_2d(const Var<T>& logits, const Var<T>& table, const std::vector<int64_t>& index) {
  if (logits.value().rank() != 4) throw ShapeError("positional_attention_2d: logits must be [B, heads, Nq, Nk]");
  const int64_t heads = logits.dim(1), nq = logits.dim(2), nk = logits.dim(3);
  if (static_cast<int64_t>(index.size()) != nq * nk || table.dim(1) != heads) {
    throw ShapeError("positional_attention_2d: grid mismatch between logits " + shape_str(logits.shape()) +
                     " and bias index of " + std::to_string(index.size()) + " entries");
  }
  Var<T> bias = ops::gather_rows(table, index);  // [Nq*Nk, heads]
  bias = ops::permute(bias, {1, 0});
  bias = ops::reshape(bias, {1, heads, nq, nk});
  return ops::add(logits, bias);
}

void declare_efficient_attention(ParamLayout& l, const std::string& prefix, int channels, int heads, int sr_ratio,
                                 int pos_radius) {
  declare_conv(l, prefix + ".q", channels, channels, 1);
  if (sr_ratio > 1) {
    declare_conv(l, prefix + ".sr", channels, channels, sr_ratio);
    declare_layer_norm(l, prefix + ".sr_norm", channels);
  }
  // A key bias would shift a whole softmax row by a constant, so keys have none.
  declare_conv(l, prefix + ".k", channels, channels, 1, 1, false);
  declare_conv(l, prefix + ".v", channels, channels, 1);
  const int64_t side = 2 * pos_radius + 1;
  l.add(prefix + ".pos_table", {side * side, heads}, ParamKind::pos_table);
  declare_conv(l, prefix + ".proj", channels, channels, 1);
}

template <typename T>
Var<T> efficient_self_attention(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, int sr_ratio,
                                int heads, const ModelConfig& cfg, Var<T>* weights) {
  if (sr_ratio <= 0) throw ConfigError("efficient_self_attention: sr_ratio must be positive");
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Var<T> q = to_heads(conv(p, prefix + ".q", x), heads);
  Var<T> src = x;
  if (sr_ratio > 1) {
    const int ph = static_cast<int>((sr_ratio - h % sr_ratio) % sr_ratio);
    const int pw = static_cast<int>((sr_ratio - w % sr_ratio) % sr_ratio);
    if (ph || pw) src = ops::pad2d(src, 0, ph, 0, pw, ops::PadMode::zero);
    src = conv(p, prefix + ".sr", src, sr_ratio, 0);
    src = layer_norm(p, prefix + ".sr_norm", src);
  }
  const int64_t kh = src.dim(2), kw = src.dim(3);
  Var<T> k = to_heads(conv(p, prefix + ".k", src), heads);
  Var<T> v = to_heads(conv(p, prefix + ".v", src), heads);

  Var<T> table = p.at(prefix + ".pos_table");
  const int64_t side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(table.dim(0)))));
  const int radius = static_cast<int>((side - 1) / 2);

  // Logits are assembled here rather than in scaled_dot_attention so the
  // positional bias goes through positional_attention_2d.
  const double scale = attention_scale(static_cast<int>(c), heads, cfg.attn_scale);
  Var<T> logits = ops::scale(ops::matmul(q, k, false, true), static_cast<T>(scale));
  logits = ops::reshape(logits, {b, heads, h * w, kh * kw});
  logits = positional_attention_2d(logits, table, relative_position_index(h, w, kh, kw, sr_ratio, radius));
  logits = ops::reshape(logits, {b * heads, h * w, kh * kw});
  Var<T> attn = ops::softmax_lastdim(logits);
  if (weights) *weights = attn;
  Var<T> out = from_heads(ops::matmul(attn, v), b, heads, h, w);
  return conv(p, prefix + ".proj", out);
}

std::string encoder_stage_prefix(int stage) { return "encoder.stage" + std::to_string(stage + 1); }

std::string encoder_block_prefix(int stage, int block) {
  return encoder_stage_prefix(stage) + ".block" + std::to_string(block);
}

void declare_encoder(ParamLayout& l, const ModelConfig& cfg) {
  int cin = cfg.in_channels;
  for (int s = 0; s < 4; ++s) {
    const int dim = cfg.stage_dims[s];
    declare_patch_embed(l, encoder_stage_prefix(s) + ".patch_embed", cin, dim, cfg.patch_kernels[s]);
    for (int b = 0; b < cfg.stage_depths[s]; ++b) {
      const std::string pre = encoder_block_prefix(s, b);
      declare_layer_norm(l, pre + ".norm1", dim);
      declare_efficient_attention(l, pre + ".attn", dim, cfg.stage_heads[s], cfg.sr_ratios[s], cfg.pos_bias_radius);
      declare_layer_norm(l, pre + ".norm2", dim);
      declare_mix_ffn(l, pre + ".ffn", dim, cfg.mlp_ratio);
    }
    cin = dim;
  }
}

template <typename T>
std::array<StageFeature<T>, 4> encoder_forward(const Var<T>& x, const ModelConfig& cfg, const ParamStore<T>& p) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != cfg.in_channels) {
    throw ShapeError("encoder: expected [B, " + std::to_string(cfg.in_channels) + ", H, W], got " + shape_str(s));
  }
  const int stride = total_stride(cfg);
  if (s[2] % stride != 0 || s[3] % stride != 0) {
    throw ShapeError("encoder: input " + shape_str(s) + " spatial dims not divisible by " + std::to_string(stride) +
                     " (pad the input first)");
  }
  std::array<StageFeature<T>, 4> out;
  Var<T> h = x;
  for (int st = 0; st < 4; ++st) {
    h = overlap_patch_embed(p, encoder_stage_prefix(st) + ".patch_embed", h, cfg.patch_kernels[st],
                            cfg.patch_strides[st]);
    for (int b = 0; b < cfg.stage_depths[st]; ++b) {
      const std::string pre = encoder_block_prefix(st, b);
      Var<T> a = efficient_self_attention(p, pre + ".attn", layer_norm(p, pre + ".norm1", h), cfg.sr_ratios[st],
                                          cfg.stage_heads[st], cfg);
      h = ops::add(h, a);
      h = ops::add(h, mix_ffn(p, pre + ".ffn", layer_norm(p, pre + ".norm2", h)));
    }
    out[st] = {h, st + 1, stage_stride(cfg, st)};
  }
  return out;
}

#define REMOTENET_INSTANTIATE_ENCODER(T)                                                                         \
  template AttentionResult<T> scaled_dot_attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, double, \
                                                      const Var<T>&);                                           \
  template AttentionResult<T> self_attention<T>(const AttentionInputs<T>&, AttnScale);                          \
  template Var<T> overlap_patch_embed<T>(const ParamStore<T>&, const std::string&, const Var<T>&, int, int);    \
  template Var<T> positional_attention_2d<T>(const Var<T>&, const Var<T>&, const std::vector<int64_t>&);         \
  template Var<T> efficient_self_attention<T>(const ParamStore<T>&, const std::string&, const Var<T>&, int, int, \
                                              const ModelConfig&, Var<T>*);                                     \
  template std::array<StageFeature<T>, 4> encoder_forward<T>(const Var<T>&, const ModelConfig&, const ParamStore<T>&);

REMOTENET_INSTANTIATE_ENCODER(float)
REMOTENET_INSTANTIATE_ENCODER(double)

}  // namespace remotenet
