#include "remotenet/frm_head.hpp"

namespace remotenet {

void declare_frm(ParamLayout& l, const std::string& prefix, const ModelConfig& cfg) {
  if (cfg.ablation == Ablation::no_frm) return;
  const int c = cfg.decoder_dim;
  declare_conv(l, prefix + ".branch1", c, c, cfg.frm_kernels[0], c);
  declare_conv(l, prefix + ".branch2", c, c, cfg.frm_kernels[1], c);
  if (cfg.ablation != Ablation::frm_two_branch) declare_conv(l, prefix + ".branch3", c, c, 1);
  declare_conv(l, prefix + ".merge", 2 * c, c, 1);
  declare_conv(l, prefix + ".post", c, c, 3, 1, false);
  declare_batch_norm(l, prefix + ".post_bn", c);
}

template <typename T>
Var<T> frm_forward(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, const ModelConfig& cfg,
                   const ForwardContext& ctx) {
  if (x.value().rank() != 4 || x.dim(1) != cfg.decoder_dim) {
    throw ShapeError("frm: expected " + std::to_string(cfg.decoder_dim) + " channels, got " + shape_str(x.shape()));
  }
  if (cfg.ablation == Ablation::no_frm) return x;
  const int c = cfg.decoder_dim;
  Var<T> b1 = conv(p, prefix + ".branch1", x, 1, cfg.frm_kernels[0] / 2, c);
  Var<T> b2 = conv(p, prefix + ".branch2", x, 1, cfg.frm_kernels[1] / 2, c);
  Var<T> m = conv(p, prefix + ".merge", ops::concat_channels<T>({b1, b2}));
  Var<T> y = ops::add(x, m);
  if (cfg.ablation != Ablation::frm_two_branch) y = ops::add(y, conv(p, prefix + ".branch3", x));
  Var<T> post = ops::gelu(batch_norm(p, prefix + ".post_bn", conv(p, prefix + ".post", y, 1, 1), ctx));
  return ops::add(y, post);
}

void declare_seg_head(ParamLayout& l, const std::string& prefix, const ModelConfig& cfg) {
  declare_conv(l, prefix + ".cls", cfg.decoder_dim, cfg.num_classes, 1);
}

template <typename T>
Var<T> seg_head(const ParamStore<T>& p, const std::string& prefix, const Var<T>& x, const ModelConfig& cfg,
                int64_t out_h, int64_t out_w) {
  if (x.value().rank() != 4 || x.dim(1) != cfg.decoder_dim) {
    throw ShapeError("seg_head: expected " + std::to_string(cfg.decoder_dim) + " channels, got " +
                     shape_str(x.shape()));
  }
  if (out_h < x.dim(2) || out_w < x.dim(3)) {
    throw ConfigError("seg_head: output size " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                      " smaller than feature map " + shape_str(x.shape()));
  }
  return ops::resize_bilinear(conv(p, prefix + ".cls", x), out_h, out_w);
}

#define REMOTENET_INSTANTIATE_FRM(T)                                                                         \
  template Var<T> frm_forward<T>(const ParamStore<T>&, const std::string&, const Var<T>&, const ModelConfig&, \
                                 const ForwardContext&);                                                      \
  template Var<T> seg_head<T>(const ParamStore<T>&, const std::string&, const Var<T>&, const ModelConfig&,    \
                              int64_t, int64_t);

REMOTENET_INSTANTIATE_FRM(float)
REMOTENET_INSTANTIATE_FRM(double)

}  // namespace remotenet
