#include "remotenet/network.hpp"

#include "remotenet/frm_head.hpp"
#include "remotenet/fusion.hpp"
#include "remotenet/gltb.hpp"

namespace remotenet {

namespace {

std::string proj_name(int stage) { return "decoder.proj" + std::to_string(stage + 1); }
std::string gltb_name(int stage, int i) {
  return "decoder.gltb" + std::to_string(stage + 1) + "." + std::to_string(i);
}
std::string fuse_name(int stage) { return "decoder.fuse" + std::to_string(stage + 1); }

}  // namespace

ParamLayout declare_network(const ModelConfig& cfg) {
  ParamLayout l;
  declare_encoder(l, cfg);
  for (int s = 0; s < 4; ++s) declare_conv(l, proj_name(s), cfg.stage_dims[s], cfg.decoder_dim, 1);
  // Ladder from the deepest scale: GLTBs at stages 4, 3, 2 and fusions into
  // stages 3, 2, 1.
  for (int s = 3; s >= 1; --s) {
    if (s < 3) declare_fusion(l, fuse_name(s), cfg);
    for (int i = 0; i < cfg.gltb_per_scale; ++i) declare_gltb(l, gltb_name(s, i), cfg);
  }
  declare_fusion(l, fuse_name(0), cfg);
  declare_frm(l, "decoder.frm", cfg);
  declare_seg_head(l, "head", cfg);
  return l;
}

template <typename T>
RemoteNet<T>::RemoteNet(ModelConfig cfg, ParamStore<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  require_valid(cfg_);
  check_layout(params_, declare_network(cfg_));
}

template <typename T>
Var<T> RemoteNet<T>::forward(const Var<T>& x) {
  const ForwardContext ctx{mode_ == Mode::train, bn_momentum_};
  const auto feats = encoder_forward(x, cfg_, params_);
  std::array<Var<T>, 4> proj;
  for (int s = 0; s < 4; ++s) proj[s] = conv(params_, proj_name(s), feats[s].tensor);

  Var<T> d;
  for (int s = 3; s >= 1; --s) {
    Var<T> h = proj[s];
    if (s < 3) {
      Var<T> up = ops::resize_bilinear(d, h.dim(2), h.dim(3));
      h = fuse(params_, fuse_name(s), h, up, cfg_, ctx);
    }
    for (int i = 0; i < cfg_.gltb_per_scale; ++i) h = gltb_forward(params_, gltb_name(s, i), h, cfg_, ctx);
    d = h;
  }
  Var<T> up = ops::resize_bilinear(d, proj[0].dim(2), proj[0].dim(3));
  Var<T> r = frm_forward(params_, "decoder.frm", fuse(params_, fuse_name(0), proj[0], up, cfg_, ctx), cfg_, ctx);
  return seg_head(params_, "head", r, cfg_, x.dim(2), x.dim(3));
}

template <typename T>
Tensor<T> RemoteNet<T>::predict(const Tensor<T>& x) {
  NoGradGuard guard;
  return forward(Var<T>(x)).value();
}

template <typename T>
RemoteNet<T> make_variant(ModelConfig cfg, Ablation variant, unsigned long long seed) {
  cfg.ablation = variant;
  auto params = init_params<T>(cfg, seed);
  return RemoteNet<T>(std::move(cfg), std::move(params));
}

template <typename T>
RemoteNet<T> make_variant(ModelConfig cfg, std::string_view variant, unsigned long long seed) {
  return make_variant<T>(std::move(cfg), parse_ablation(variant), seed);
}

template class RemoteNet<float>;
template class RemoteNet<double>;
template RemoteNet<float> make_variant<float>(ModelConfig, Ablation, unsigned long long);
template RemoteNet<double> make_variant<double>(ModelConfig, Ablation, unsigned long long);
template RemoteNet<float> make_variant<float>(ModelConfig, std::string_view, unsigned long long);
template RemoteNet<double> make_variant<double>(ModelConfig, std::string_view, unsigned long long);

}  // namespace remotenet
