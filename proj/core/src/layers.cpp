#include "remotenet/layers.hpp"

namespace remotenet {

void declare_conv(ParamLayout& l, const std::string& name, int cin, int cout, int kernel, int groups, bool bias) {
  l.add(name + ".weight", {cout, cin / groups, kernel, kernel}, ParamKind::weight);
  if (bias) l.add(name + ".bias", {cout}, ParamKind::bias);
}

void declare_layer_norm(ParamLayout& l, const std::string& name, int channels) {
  l.add(name + ".weight", {channels}, ParamKind::norm_scale);
  l.add(name + ".bias", {channels}, ParamKind::norm_shift);
}

void declare_batch_norm(ParamLayout& l, const std::string& name, int channels) {
  l.add(name + ".weight", {channels}, ParamKind::norm_scale);
  l.add(name + ".bias", {channels}, ParamKind::norm_shift);
  l.add(name + ".running_mean", {channels}, ParamKind::running_mean);
  l.add(name + ".running_var", {channels}, ParamKind::running_var);
}

template <typename T>
Var<T> conv(const ParamStore<T>& p, const std::string& name, const Var<T>& x, int stride, int pad, int groups) {
  const std::string bias_name = name + ".bias";
  Var<T> bias = p.contains(bias_name) ? p.at(bias_name) : Var<T>();
  return ops::conv2d(x, p.at(name + ".weight"), bias, {stride, pad, groups});
}

template <typename T>
Var<T> layer_norm(const ParamStore<T>& p, const std::string& name, const Var<T>& x) {
  return ops::layer_norm(x, p.at(name + ".weight"), p.at(name + ".bias"), static_cast<T>(kLayerNormEps));
}

template <typename T>
Var<T> batch_norm(const ParamStore<T>& p, const std::string& name, const Var<T>& x, const ForwardContext& ctx) {
  Var<T> rm = p.at(name + ".running_mean");
  Var<T> rv = p.at(name + ".running_var");
  return ops::batch_norm(x, p.at(name + ".weight"), p.at(name + ".bias"), rm, rv, ctx.training,
                         static_cast<T>(ctx.bn_momentum), static_cast<T>(kBatchNormEps));
}

void declare_mix_ffn(ParamLayout& l, const std::string& prefix, int channels, int expansion) {
  const int hidden = channels * expansion;
  declare_conv(l, prefix + ".fc1", channels, hidden, 1);
  declare_conv(l, prefix + ".dw", hidden, hidden, 3, hidden);
  declare_conv(l, prefix + ".fc2", hidden, channels, 1);
}

template <typename T>
Var<T> mix_ffn(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x) {
  const int hidden = static_cast<int>(p.at(prefix + ".fc1.weight").dim(0));
  Var<T> h = conv(p, prefix + ".fc1", x);
  h = conv(p, prefix + ".dw", h, 1, 1, hidden);
  h = ops::gelu(h);
  return conv(p, prefix + ".fc2", h);
}

template <typename T>
Var<T> to_heads(const Var<T>& x, int heads) {
  const int64_t b = x.dim(0), c = x.dim(1), n = x.dim(2) * x.dim(3);
  if (c % heads != 0) throw ShapeError("to_heads: channels not divisible by heads");
  const int64_t d = c / heads;
  Var<T> t = ops::reshape(x, {b, heads, d, n});
  t = ops::permute(t, {0, 1, 3, 2});
  return ops::reshape(t, {b * heads, n, d});
}

template <typename T>
Var<T> from_heads(const Var<T>& x, int64_t batch, int heads, int64_t h, int64_t w) {
  const int64_t d = x.dim(2);
  Var<T> t = ops::reshape(x, {batch, heads, h * w, d});
  t = ops::permute(t, {0, 1, 3, 2});
  return ops::reshape(t, {batch, heads * d, h, w});
}

#define REMOTENET_INSTANTIATE_LAYERS(T)                                                                      \
  template Var<T> conv<T>(const ParamStore<T>&, const std::string&, const Var<T>&, int, int, int);           \
  template Var<T> layer_norm<T>(const ParamStore<T>&, const std::string&, const Var<T>&);                    \
  template Var<T> batch_norm<T>(const ParamStore<T>&, const std::string&, const Var<T>&, const ForwardContext&); \
  template Var<T> mix_ffn<T>(const ParamStore<T>&, const std::string&, const Var<T>&);                       \
  template Var<T> to_heads<T>(const Var<T>&, int);                                                           \
  template Var<T> from_heads<T>(const Var<T>&, int64_t, int, int64_t, int64_t);

REMOTENET_INSTANTIATE_LAYERS(float)
REMOTENET_INSTANTIATE_LAYERS(double)

}  // namespace remotenet
