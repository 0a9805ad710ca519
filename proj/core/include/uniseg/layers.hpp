#pragma once

#include <vector>

#include "uniseg/rng.hpp"
#include "uniseg/tensor.hpp"

// Building blocks of the vision branch. Every forward has a matching adjoint;
// adjoints accumulate (+=) into caller-owned gradient buffers.
namespace uniseg::nn {

inline constexpr double kLeakySlope = 0.01;

struct Conv3d {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  std::vector<double> weight;  // [out][in][kz][ky][kx]
  std::vector<double> bias;    // [out]

  Conv3d() = default;
  Conv3d(int in_c, int out_c, int k, int stride, int pad);

  std::size_t weight_index(int o, int i, int kz, int ky, int kx) const {
    return ((((static_cast<std::size_t>(o) * in_channels + i) * kernel + kz) * kernel + ky) * kernel) + kx;
  }
  Shape4 output_shape(const Shape4& in) const;
  std::size_t parameter_count() const { return weight.size() + bias.size(); }

  /// He-normal (fan-in) weights, zero bias.
  void init_he(Rng& rng);
  void zero();

  friend bool operator==(const Conv3d&, const Conv3d&) = default;
};

Tensor4 conv3d_forward(const Tensor4& in, const Conv3d& conv);
/// grads.weight/bias += dL/dW, dL/db; grad_in (if non-null) += dL/dx.
void conv3d_backward(const Tensor4& in, const Conv3d& conv, const Tensor4& grad_out, Conv3d& grads,
                     Tensor4* grad_in);

double leaky_relu(double x, double slope = kLeakySlope);
void leaky_relu_inplace(Tensor4& t, double slope = kLeakySlope);
/// Multiplies grad in place by the activation derivative, read off the
/// activation output (the slope is positive, so signs are preserved).
void leaky_relu_backward(const Tensor4& activated, Tensor4& grad, double slope = kLeakySlope);

Tensor4 upsample2_forward(const Tensor4& in);
void upsample2_backward(const Tensor4& grad_out, Tensor4& grad_in);

Tensor4 concat_forward(const Tensor4& a, const Tensor4& b);
void concat_backward(const Tensor4& grad_out, Tensor4& grad_a, Tensor4& grad_b);

/// Channel-wise spatial mean; f64 accumulation.
std::vector<double> gap_forward(const Tensor4& in);
void gap_backward(const std::vector<double>& grad_f, Tensor4& grad_in);

}  // namespace uniseg::nn
