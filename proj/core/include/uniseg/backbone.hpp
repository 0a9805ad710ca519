#pragma once

#include <vector>

#include "uniseg/layers.hpp"
#include "uniseg/tensor.hpp"

namespace uniseg {

/// A small 3D U-Net-style encoder/decoder.
///
/// Encoder: stage 0 is conv3 + act at full resolution; each later stage is a
/// stride-2 conv3 + act followed by conv3 + act. The last stage is the
/// bottleneck, and its channel-wise spatial mean is the global feature f.
///
/// Decoder, from the bottleneck upward: conv3 + act to the skip's width at
/// the coarse resolution, nearest-neighbour x2 upsample, concat with the
/// encoder skip, conv3 + act. The top fuse conv emits `decoder_channels`
/// maps (F_D) at input resolution.
struct BackboneConfig {
  std::vector<int> channels{8, 16, 32};
  int decoder_channels = 8;
  int in_channels = 1;

  int stages() const { return static_cast<int>(channels.size()); }
  int bottleneck_channels() const { return channels.back(); }
  /// Patch edges must be multiples of this.
  int divisor() const { return 1 << (stages() - 1); }
  void validate() const;

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

struct BackboneParams {
  BackboneConfig config;
  std::vector<nn::Conv3d> convs;  // fixed order, see layer_index helpers in backbone.cpp

  static BackboneParams create(const BackboneConfig& config);
  /// He-normal weights, zero biases.
  static BackboneParams init(const BackboneConfig& config, Rng& rng);
  BackboneParams zeros_like() const;
  std::size_t parameter_count() const;

  friend bool operator==(const BackboneParams&, const BackboneParams&) = default;
};

/// Activations retained by forward() for the adjoint pass.
struct BackboneTape {
  Tensor4 input;
  std::vector<Tensor4> enc;    // enc[s]: output of stage s
  std::vector<Tensor4> down;   // down[s]: stride-2 conv output of stage s (s >= 1)
  std::vector<Tensor4> red;    // red[s]: coarse conv output feeding upsample (decoder level s)
  std::vector<Tensor4> cat;    // cat[s]: concat input to fuse conv at level s - 1
  std::vector<Tensor4> fused;  // fused[s]: output of fuse conv producing level s - 1 features
};

struct BackboneOutput {
  Tensor4 features;            // F_D, decoder_channels x D x H x W
  std::vector<double> global;  // f = GAP(bottleneck)
  BackboneTape tape;
};

BackboneOutput backbone_forward(const Tensor4& x, const BackboneParams& params);

/// Accumulates parameter gradients into `grads` (laid out like `params`).
/// `grad_global` may be empty (no gradient through f). Returns dL/dx when
/// `want_input_grad` is set, otherwise an empty tensor.
Tensor4 backbone_backward(const BackboneTape& tape, const BackboneParams& params, const Tensor4& grad_features,
                          const std::vector<double>& grad_global, BackboneParams& grads,
                          bool want_input_grad = false);

}  // namespace uniseg
