#include "remotenet/gltb.hpp"

#include "remotenet/encoder.hpp"

namespace remotenet {

namespace {
constexpr int kLocalKernels[3] = {1, 3, 5};
}

void declare_local_branch(ParamLayout& l, const std::string& prefix, int channels) {
  for (int k : kLocalKernels) {
    const std::string pre = prefix + ".conv" + std::to_string(k);
    declare_conv(l, pre, channels, channels, k, 1, false);
    declare_batch_norm(l, pre + "_bn", channels);
  }
}

template <typename T>
Var<T> local_branch(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, const ForwardContext& ctx) {
  Var<T> sum;
  for (int k : kLocalKernels) {
    const std::string pre = prefix + ".conv" + std::to_string(k);
    Var<T> y = batch_norm(p, pre + "_bn", conv(p, pre, x, 1, k / 2), ctx);
    sum = sum.defined() ? ops::add(sum, y) : y;
  }
  return sum;
}

WindowTiling window_tiling(int64_t extent, int window) {
  if (window <= 0) throw ConfigError("window size must be positive");
  if (extent <= window) return {extent, extent, 1};
  const int64_t count = (extent + window - 1) / window;
  return {window, count * window, count};
}

void declare_window_mhsa(ParamLayout& l, const std::string& prefix, int channels, int heads, int window) {
  declare_conv(l, prefix + ".q", channels, channels, 1);
  declare_conv(l, prefix + ".k", channels, channels, 1, 1, false);
  declare_conv(l, prefix + ".v", channels, channels, 1);
  const int64_t side = 2 * window - 1;
  l.add(prefix + ".pos_table", {side * side, heads}, ParamKind::pos_table);
  declare_conv(l, prefix + ".proj", channels, channels, 1);
}

template <typename T>
Var<T> window_mhsa(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, int window, int heads,
                   Var<T>* weights) {
  if (window <= 0) throw ConfigError("window_mhsa: window must be positive");
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c % heads != 0) throw ShapeError("window_mhsa: channels not divisible by heads");
  const int64_t d = c / heads;
  const auto ty = window_tiling(h, window);
  const auto tx = window_tiling(w, window);

  Var<T> src = x;
  if (ty.padded != h || tx.padded != w) {
    src = ops::pad2d(src, 0, static_cast<int>(ty.padded - h), 0, static_cast<int>(tx.padded - w),
                     ops::PadMode::reflect);
  }
  const int64_t tiles = b * ty.count * tx.count;
  const int64_t n = ty.tile * tx.tile;
  // [B, C, Hp, Wp] -> [B * tiles * heads, tile tokens, d]
  auto partition = [&](const Var<T>& t) {
    Var<T> r = ops::reshape(t, {b, heads, d, ty.count, ty.tile, tx.count, tx.tile});
    r = ops::permute(r, {0, 3, 5, 1, 4, 6, 2});
    return ops::reshape(r, {tiles * heads, n, d});
  };
  Var<T> q = partition(conv(p, prefix + ".q", src));
  Var<T> k = partition(conv(p, prefix + ".k", src));
  Var<T> v = partition(conv(p, prefix + ".v", src));

  Var<T> table = p.at(prefix + ".pos_table");
  const int64_t side = 2 * static_cast<int64_t>(window) - 1;
  if (table.dim(0) != side * side) throw ShapeError("window_mhsa: position table does not match window size");
  Var<T> bias = ops::gather_rows(table, relative_position_index(ty.tile, tx.tile, ty.tile, tx.tile, 1, window - 1));
  bias = ops::reshape(ops::permute(bias, {1, 0}), {1, heads, n, n});

  auto res = scaled_dot_attention(q, k, v, heads, attention_scale(static_cast<int>(c), heads, AttnScale::head_dim),
                                  bias);
  if (weights) *weights = res.weights;

  Var<T> out = ops::reshape(res.out, {b, ty.count, tx.count, heads, ty.tile, tx.tile, d});
  out = ops::permute(out, {0, 3, 6, 1, 4, 2, 5});
  out = ops::reshape(out, {b, c, ty.padded, tx.padded});
  if (ty.padded != h || tx.padded != w) out = ops::crop2d(out, 0, 0, h, w);
  return conv(p, prefix + ".proj", out);
}

void declare_dwsep_conv(ParamLayout& l, const std::string& prefix, int channels) {
  declare_conv(l, prefix + ".dw", channels, channels, 3, channels, false);
  declare_conv(l, prefix + ".pw", channels, channels, 1);
}

template <typename T>
Var<T> dwsep_conv(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x) {
  const int c = static_cast<int>(x.dim(1));
  return conv(p, prefix + ".pw", conv(p, prefix + ".dw", x, 1, 1, c));
}

void declare_gla(ParamLayout& l, const std::string& prefix, int channels, int heads, int window) {
  declare_window_mhsa(l, prefix + ".global", channels, heads, window);
  declare_local_branch(l, prefix + ".local", channels);
  declare_dwsep_conv(l, prefix + ".out", channels);
}

template <typename T>
Var<T> gla(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, int window, int heads,
           const ForwardContext& ctx) {
  Var<T> g = window_mhsa(p, prefix + ".global", x, window, heads);
  Var<T> loc = local_branch(p, prefix + ".local", x, ctx);
  return dwsep_conv(p, prefix + ".out", ops::add(g, loc));
}

void declare_gltb(ParamLayout& l, const std::string& prefix, const ModelConfig& cfg) {
  declare_batch_norm(l, prefix + ".norm1", cfg.decoder_dim);
  declare_gla(l, prefix + ".gla", cfg.decoder_dim, cfg.decoder_heads, cfg.window_size);
  declare_batch_norm(l, prefix + ".norm2", cfg.decoder_dim);
  declare_mix_ffn(l, prefix + ".ffn", cfg.decoder_dim, cfg.decoder_mlp_ratio);
}

template <typename T>
Var<T> gltb_forward(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, const ModelConfig& cfg,
                    const ForwardContext& ctx) {
  if (x.value().rank() != 4 || x.dim(1) != cfg.decoder_dim) {
    throw ShapeError("gltb: expected " + std::to_string(cfg.decoder_dim) + " channels, got " + shape_str(x.shape()));
  }
  Var<T> a = gla(p, prefix + ".gla", batch_norm(p, prefix + ".norm1", x, ctx), cfg.window_size, cfg.decoder_heads, ctx);
  Var<T> y = cfg.gltb_residual ? ops::add(x, a) : a;
  Var<T> f = mix_ffn(p, prefix + ".ffn", batch_norm(p, prefix + ".norm2", y, ctx));
  return cfg.gltb_residual ? ops::add(y, f) : f;
}

#define REMOTENET_INSTANTIATE_GLTB(T)                                                                             \
  template Var<T> local_branch<T>(const ParamStore<T>&, const std::string&, const Var<T>&, const ForwardContext&); \
  template Var<T> window_mhsa<T>(const ParamStore<T>&, const std::string&, const Var<T>&, int, int, Var<T>*);     \
  template Var<T> dwsep_conv<T>(const ParamStore<T>&, const std::string&, const Var<T>&);                         \
  template Var<T> gla<T>(const ParamStore<T>&, const std::string&, const Var<T>&, int, int, const ForwardContext&); \
  template Var<T> gltb_forward<T>(const ParamStore<T>&, const std::string&, const Var<T>&, const ModelConfig&,     \
                                  const ForwardContext&);

REMOTENET_INSTANTIATE_GLTB(float)
REMOTENET_INSTANTIATE_GLTB(double)

}  // namespace remotenet
