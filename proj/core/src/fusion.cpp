#include "remotenet/fusion.hpp"

namespace remotenet {

void declare_amm(ParamLayout& l, const std::string& prefix, int channels) {
  declare_conv(l, prefix + ".conv", channels, channels, 1);
}

template <typename T>
ChannelScores<T> amm_scores(const ParamStore<T>& p, const std::string& prefix, const Var<T>& input) {
  Var<T> h = ops::gelu(conv(p, prefix + ".conv", input));
  return {ops::sigmoid(ops::mean_hw(h))};
}

template <typename T>
ChannelScores<T> amm(const ParamStore<T>& p, const std::string& prefix, const Var<T>& e, const Var<T>& d) {
  if (e.shape() != d.shape()) {
    throw ShapeError("amm: encoder " + shape_str(e.shape()) + " and decoder " + shape_str(d.shape()) + " differ");
  }
  return amm_scores(p, prefix, ops::add(e, d));
}

void declare_fusion(ParamLayout& l, const std::string& prefix, const ModelConfig& cfg) {
  if (cfg.ablation == Ablation::no_fusion) return;
  const int c = cfg.decoder_dim;
  if (cfg.ablation != Ablation::no_amm) {
    if (cfg.amm_mode == AmmMode::shared) {
      declare_amm(l, prefix + ".amm", c);
    } else {
      declare_amm(l, prefix + ".amm_enc", c);
      declare_amm(l, prefix + ".amm_dec", c);
    }
  }
  declare_conv(l, prefix + ".enc_proj", c, c, 1);
  declare_conv(l, prefix + ".dec_proj", c, c, 1);
  declare_conv(l, prefix + ".post", c, c, 3, 1, false);
  declare_batch_norm(l, prefix + ".post_bn", c);
}

template <typename T>
Var<T> fuse(const ParamStore<T>& p, const std::string& prefix, const Var<T>& e, const Var<T>& d, const ModelConfig& cfg,
            const ForwardContext& ctx) {
  if (e.shape() != d.shape()) {
    throw ShapeError("fuse: encoder " + shape_str(e.shape()) + " and decoder " + shape_str(d.shape()) +
                     " differ (upsample the decoder feature first)");
  }
  if (cfg.ablation == Ablation::no_fusion) return ops::add(e, d);

  Var<T> ee = conv(p, prefix + ".enc_proj", e);
  Var<T> dd = conv(p, prefix + ".dec_proj", d);
  if (cfg.ablation != Ablation::no_amm) {
    if (cfg.amm_mode == AmmMode::shared) {
      Var<T> s = amm(p, prefix + ".amm", e, d).scores;
      ee = ops::mul(ee, s);
      dd = ops::mul(dd, s);
    } else {
      Var<T> se = amm_scores(p, prefix + ".amm_enc", e).scores;
      Var<T> sd = amm_scores(p, prefix + ".amm_dec", d).scores;
      const bool cross = cfg.amm_mode == AmmMode::per_branch_cross;
      ee = ops::mul(ee, cross ? sd : se);
      dd = ops::mul(dd, cross ? se : sd);
    }
  }
  Var<T> f = ops::add(ee, dd);
  Var<T> post = ops::gelu(batch_norm(p, prefix + ".post_bn", conv(p, prefix + ".post", f, 1, 1), ctx));
  return ops::add(f, post);
}

#define REMOTENET_INSTANTIATE_FUSION(T)                                                                           \
  template ChannelScores<T> amm_scores<T>(const ParamStore<T>&, const std::string&, const Var<T>&);               \
  template ChannelScores<T> amm<T>(const ParamStore<T>&, const std::string&, const Var<T>&, const Var<T>&);       \
  template Var<T> fuse<T>(const ParamStore<T>&, const std::string&, const Var<T>&, const Var<T>&, const ModelConfig&, \
                          const ForwardContext&);

REMOTENET_INSTANTIATE_FUSION(float)
REMOTENET_INSTANTIATE_FUSION(double)

}  // namespace remotenet
