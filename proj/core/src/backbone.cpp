#include "uniseg/backbone.hpp"

#include <string>

namespace uniseg {

namespace {

// Conv order: enc0, then (down_s, enc_s) for s = 1..S-1, then (red_s, fuse_s)
// for s = S-1..1. A single-stage net has one fuse conv after enc0 instead.
std::size_t enc0_index() { return 0; }
std::size_t down_index(int s) { return 1 + 2 * static_cast<std::size_t>(s - 1); }
std::size_t enc_index(int s) { return s == 0 ? 0 : 2 + 2 * static_cast<std::size_t>(s - 1); }
std::size_t decoder_base(int stages) { return 1 + 2 * static_cast<std::size_t>(stages - 1); }
std::size_t red_index(int stages, int s) { return decoder_base(stages) + 2 * static_cast<std::size_t>(stages - 1 - s); }
std::size_t fuse_index(int stages, int s) { return red_index(stages, s) + 1; }

Tensor4 conv_act(const Tensor4& in, const nn::Conv3d& conv) {
  Tensor4 out = nn::conv3d_forward(in, conv);
  nn::leaky_relu_inplace(out);
  return out;
}

// grad is dL/d(activated output); on return grad_in has dL/d(input) added.
void conv_act_backward(const Tensor4& in, const Tensor4& activated, const nn::Conv3d& conv, Tensor4 grad,
                       nn::Conv3d& conv_grads, Tensor4* grad_in) {
  nn::leaky_relu_backward(activated, grad);
  nn::conv3d_backward(in, conv, grad, conv_grads, grad_in);
}

}  // namespace

void BackboneConfig::validate() const {
  if (channels.empty()) throw Error(ErrorCode::InvalidArgument, "backbone needs at least one stage");
  for (int c : channels)
    if (c < 1) throw Error(ErrorCode::InvalidArgument, "stage channels must be >= 1");
  if (decoder_channels < 1) throw Error(ErrorCode::InvalidArgument, "decoder_channels must be >= 1");
  if (in_channels < 1) throw Error(ErrorCode::InvalidArgument, "in_channels must be >= 1");
}

BackboneParams BackboneParams::create(const BackboneConfig& config) {
  config.validate();
  const int S = config.stages();
  const auto& c = config.channels;
  BackboneParams p;
  p.config = config;
  p.convs.emplace_back(config.in_channels, c[0], 3, 1, 1);
  for (int s = 1; s < S; ++s) {
    p.convs.emplace_back(c[s - 1], c[s], 3, 2, 1);
    p.convs.emplace_back(c[s], c[s], 3, 1, 1);
  }
  if (S == 1) {
    p.convs.emplace_back(c[0], config.decoder_channels, 3, 1, 1);
  } else {
    for (int s = S - 1; s >= 1; --s) {
      p.convs.emplace_back(c[s], c[s - 1], 3, 1, 1);
      p.convs.emplace_back(2 * c[s - 1], s == 1 ? config.decoder_channels : c[s - 1], 3, 1, 1);
    }
  }
  return p;
}

BackboneParams BackboneParams::init(const BackboneConfig& config, Rng& rng) {
  BackboneParams p = create(config);
  for (auto& conv : p.convs) conv.init_he(rng);
  return p;
}

BackboneParams BackboneParams::zeros_like() const {
  BackboneParams g = *this;
  for (auto& conv : g.convs) conv.zero();
  return g;
}

std::size_t BackboneParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& conv : convs) n += conv.parameter_count();
  return n;
}

BackboneOutput backbone_forward(const Tensor4& x, const BackboneParams& params) {
  const BackboneConfig& cfg = params.config;
  const int S = cfg.stages();
  const int div = cfg.divisor();
  const Shape4 xs = x.shape();
  if (xs.c != cfg.in_channels) {
    throw Error(ErrorCode::BadPatchShape, "expected " + std::to_string(cfg.in_channels) + " input channels");
  }
  if (xs.d % div || xs.h % div || xs.w % div) {
    throw Error(ErrorCode::BadPatchShape, "patch dims must be multiples of " + std::to_string(div));
  }

  BackboneOutput out;
  BackboneTape& t = out.tape;
  t.input = x;
  t.enc.resize(S);
  t.down.resize(S);
  t.red.resize(S);
  t.cat.resize(S);
  t.fused.resize(S);

  t.enc[0] = conv_act(x, params.convs[enc0_index()]);
  for (int s = 1; s < S; ++s) {
    t.down[s] = conv_act(t.enc[s - 1], params.convs[down_index(s)]);
    t.enc[s] = conv_act(t.down[s], params.convs[enc_index(s)]);
  }
  out.global = nn::gap_forward(t.enc[S - 1]);

  if (S == 1) {
    t.fused[0] = conv_act(t.enc[0], params.convs[decoder_base(1)]);
    out.features = t.fused[0];
    return out;
  }
  const Tensor4* u = &t.enc[S - 1];
  for (int s = S - 1; s >= 1; --s) {
    t.red[s] = conv_act(*u, params.convs[red_index(S, s)]);
    t.cat[s] = nn::concat_forward(nn::upsample2_forward(t.red[s]), t.enc[s - 1]);
    t.fused[s] = conv_act(t.cat[s], params.convs[fuse_index(S, s)]);
    u = &t.fused[s];
  }
  out.features = t.fused[1];
  return out;
}

Tensor4 backbone_backward(const BackboneTape& t, const BackboneParams& params, const Tensor4& grad_features,
                          const std::vector<double>& grad_global, BackboneParams& grads, bool want_input_grad) {
  const int S = params.config.stages();
  if (grads.convs.size() != params.convs.size()) {
    throw Error(ErrorCode::GradShapeMismatch, "gradient buffer does not match backbone layout");
  }
  const Tensor4& top = S == 1 ? t.fused[0] : t.fused[1];
  if (!(grad_features.shape() == top.shape())) {
    throw Error(ErrorCode::GradShapeMismatch, "grad on F_D has the wrong shape");
  }
  if (!grad_global.empty() && grad_global.size() != static_cast<std::size_t>(params.config.bottleneck_channels())) {
    throw Error(ErrorCode::GradShapeMismatch, "grad on the global feature has the wrong length");
  }

  std::vector<Tensor4> g_enc(S);
  for (int s = 0; s < S; ++s) g_enc[s] = Tensor4(t.enc[s].shape());

  if (S == 1) {
    conv_act_backward(t.enc[0], t.fused[0], params.convs[decoder_base(1)], grad_features,
                      grads.convs[decoder_base(1)], &g_enc[0]);
  } else {
    Tensor4 g_fused = grad_features;
    for (int s = 1; s < S; ++s) {
      Tensor4 g_cat(t.cat[s].shape());
      conv_act_backward(t.cat[s], t.fused[s], params.convs[fuse_index(S, s)], std::move(g_fused),
                        grads.convs[fuse_index(S, s)], &g_cat);
      Tensor4 g_up({t.red[s].shape().c, t.cat[s].shape().d, t.cat[s].shape().h, t.cat[s].shape().w});
      nn::concat_backward(g_cat, g_up, g_enc[s - 1]);
      Tensor4 g_red(t.red[s].shape());
      nn::upsample2_backward(g_up, g_red);
      const Tensor4& red_in = s == S - 1 ? t.enc[S - 1] : t.fused[s + 1];
      Tensor4 g_red_in(red_in.shape());
      conv_act_backward(red_in, t.red[s], params.convs[red_index(S, s)], std::move(g_red),
                        grads.convs[red_index(S, s)], &g_red_in);
      if (s == S - 1) {
        for (std::size_t i = 0; i < g_red_in.size(); ++i) g_enc[S - 1][i] += g_red_in[i];
      } else {
        g_fused = std::move(g_red_in);
      }
    }
  }
  if (!grad_global.empty()) nn::gap_backward(grad_global, g_enc[S - 1]);

  for (int s = S - 1; s >= 1; --s) {
    Tensor4 g_down(t.down[s].shape());
    conv_act_backward(t.down[s], t.enc[s], params.convs[enc_index(s)], std::move(g_enc[s]),
                      grads.convs[enc_index(s)], &g_down);
    conv_act_backward(t.enc[s - 1], t.down[s], params.convs[down_index(s)], std::move(g_down),
                      grads.convs[down_index(s)], &g_enc[s - 1]);
  }
  Tensor4 g_x;
  if (want_input_grad) g_x = Tensor4(t.input.shape());
  conv_act_backward(t.input, t.enc[0], params.convs[enc0_index()], std::move(g_enc[0]), grads.convs[enc0_index()],
                    want_input_grad ? &g_x : nullptr);
  return g_x;
}

}  // namespace uniseg
