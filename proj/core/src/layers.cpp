#include "uniseg/layers.hpp"

#include <algorithm>
#include <cmath>

namespace uniseg::nn {

Conv3d::Conv3d(int in_c, int out_c, int k, int s, int p)
    : in_channels(in_c), out_channels(out_c), kernel(k), stride(s), pad(p),
      weight(static_cast<std::size_t>(out_c) * in_c * k * k * k, 0.0), bias(out_c, 0.0) {
  if (in_c < 1 || out_c < 1 || k < 1 || s < 1 || p < 0) {
    throw Error(ErrorCode::InvalidArgument, "bad conv3d geometry");
  }
}

Shape4 Conv3d::output_shape(const Shape4& in) const {
  auto out_n = [&](int n) { return (n + 2 * pad - kernel) / stride + 1; };
  return {out_channels, out_n(in.d), out_n(in.h), out_n(in.w)};
}

void Conv3d::init_he(Rng& rng) {
  const double std_dev = std::sqrt(2.0 / (static_cast<double>(in_channels) * kernel * kernel * kernel));
  for (auto& w : weight) w = std_dev * normal01(rng);
  std::fill(bias.begin(), bias.end(), 0.0);
}

void Conv3d::zero() {
  std::fill(weight.begin(), weight.end(), 0.0);
  std::fill(bias.begin(), bias.end(), 0.0);
}

namespace {

struct Range {
  int lo, hi;
};

// Output positions o in [0, out_n) whose tap o*s + k - p lands inside [0, in_n).
Range valid_range(int out_n, int in_n, int k, int s, int p) {
  const int need = p - k;
  const int lo = need <= 0 ? 0 : (need + s - 1) / s;
  const int m = in_n - 1 - k + p;
  const int hi = m < 0 ? 0 : std::min(out_n, m / s + 1);
  return {lo, std::max(lo, hi)};
}

void check_input(const Tensor4& in, const Conv3d& conv) {
  if (in.shape().c != conv.in_channels) {
    throw Error(ErrorCode::ShapeMismatch, "conv3d: expected " + std::to_string(conv.in_channels) +
                                              " input channels, got " + std::to_string(in.shape().c));
  }
}

}  // namespace

Tensor4 conv3d_forward(const Tensor4& in, const Conv3d& conv) {
  check_input(in, conv);
  const Shape4 is = in.shape();
  const Shape4 os = conv.output_shape(is);
  Tensor4 out(os);
  const int k = conv.kernel;
  const int s = conv.stride;
  const int p = conv.pad;
  for (int o = 0; o < os.c; ++o) {
    double* out_c = out.channel(o);
    std::fill(out_c, out_c + os.spatial(), conv.bias[o]);
    for (int i = 0; i < is.c; ++i) {
      const double* in_c = in.channel(i);
      for (int kz = 0; kz < k; ++kz) {
        const Range rz = valid_range(os.d, is.d, kz, s, p);
        for (int ky = 0; ky < k; ++ky) {
          const Range ry = valid_range(os.h, is.h, ky, s, p);
          for (int kx = 0; kx < k; ++kx) {
            const Range rx = valid_range(os.w, is.w, kx, s, p);
            const double w = conv.weight[conv.weight_index(o, i, kz, ky, kx)];
            for (int z = rz.lo; z < rz.hi; ++z) {
              const int iz = z * s + kz - p;
              for (int y = ry.lo; y < ry.hi; ++y) {
                const int iy = y * s + ky - p;
                double* orow = out_c + (static_cast<std::size_t>(z) * os.h + y) * os.w;
                const double* irow = in_c + (static_cast<std::size_t>(iz) * is.h + iy) * is.w;
                const int off = kx - p;
                if (s == 1) {
                  for (int x = rx.lo; x < rx.hi; ++x) orow[x] += w * irow[x + off];
                } else {
                  for (int x = rx.lo; x < rx.hi; ++x) orow[x] += w * irow[x * s + off];
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

void conv3d_backward(const Tensor4& in, const Conv3d& conv, const Tensor4& grad_out, Conv3d& grads,
                     Tensor4* grad_in) {
  check_input(in, conv);
  const Shape4 is = in.shape();
  const Shape4 os = conv.output_shape(is);
  if (!(grad_out.shape() == os)) throw Error(ErrorCode::GradShapeMismatch, "conv3d_backward: grad_out shape");
  if (grads.weight.size() != conv.weight.size() || grads.bias.size() != conv.bias.size()) {
    throw Error(ErrorCode::GradShapeMismatch, "conv3d_backward: gradient buffer layout");
  }
  if (grad_in && !(grad_in->shape() == is)) throw Error(ErrorCode::GradShapeMismatch, "conv3d_backward: grad_in shape");
  const int k = conv.kernel;
  const int s = conv.stride;
  const int p = conv.pad;
  for (int o = 0; o < os.c; ++o) {
    const double* go = grad_out.channel(o);
    double bsum = 0.0;
    for (std::size_t j = 0; j < os.spatial(); ++j) bsum += go[j];
    grads.bias[o] += bsum;
    for (int i = 0; i < is.c; ++i) {
      const double* in_c = in.channel(i);
      double* gi_c = grad_in ? grad_in->channel(i) : nullptr;
      for (int kz = 0; kz < k; ++kz) {
        const Range rz = valid_range(os.d, is.d, kz, s, p);
        for (int ky = 0; ky < k; ++ky) {
          const Range ry = valid_range(os.h, is.h, ky, s, p);
          for (int kx = 0; kx < k; ++kx) {
            const Range rx = valid_range(os.w, is.w, kx, s, p);
            const std::size_t widx = conv.weight_index(o, i, kz, ky, kx);
            const double w = conv.weight[widx];
            double wsum = 0.0;
            for (int z = rz.lo; z < rz.hi; ++z) {
              const int iz = z * s + kz - p;
              for (int y = ry.lo; y < ry.hi; ++y) {
                const int iy = y * s + ky - p;
                const double* grow = go + (static_cast<std::size_t>(z) * os.h + y) * os.w;
                const std::size_t ioff = (static_cast<std::size_t>(iz) * is.h + iy) * is.w;
                const double* irow = in_c + ioff;
                const int off = kx - p;
                double acc = 0.0;
                if (s == 1) {
                  for (int x = rx.lo; x < rx.hi; ++x) acc += grow[x] * irow[x + off];
                  if (gi_c) {
                    double* girow = gi_c + ioff;
                    for (int x = rx.lo; x < rx.hi; ++x) girow[x + off] += w * grow[x];
                  }
                } else {
                  for (int x = rx.lo; x < rx.hi; ++x) acc += grow[x] * irow[x * s + off];
                  if (gi_c) {
                    double* girow = gi_c + ioff;
                    for (int x = rx.lo; x < rx.hi; ++x) girow[x * s + off] += w * grow[x];
                  }
                }
                wsum += acc;
              }
            }
            grads.weight[widx] += wsum;
          }
        }
      }
    }
  }
}

double leaky_relu(double x, double slope) { return x > 0.0 ? x : slope * x; }

void leaky_relu_inplace(Tensor4& t, double slope) {
  for (auto& v : t.values()) v = v > 0.0 ? v : slope * v;
}

void leaky_relu_backward(const Tensor4& activated, Tensor4& grad, double slope) {
  if (!(activated.shape() == grad.shape())) throw Error(ErrorCode::GradShapeMismatch, "leaky_relu_backward");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!(activated[i] > 0.0)) grad[i] *= slope;
  }
}

Tensor4 upsample2_forward(const Tensor4& in) {
  const Shape4 is = in.shape();
  Tensor4 out({is.c, is.d * 2, is.h * 2, is.w * 2});
  for (int c = 0; c < is.c; ++c)
    for (int z = 0; z < is.d * 2; ++z)
      for (int y = 0; y < is.h * 2; ++y)
        for (int x = 0; x < is.w * 2; ++x) out(c, z, y, x) = in(c, z / 2, y / 2, x / 2);
  return out;
}

void upsample2_backward(const Tensor4& grad_out, Tensor4& grad_in) {
  const Shape4 is = grad_in.shape();
  if (!(grad_out.shape() == Shape4{is.c, is.d * 2, is.h * 2, is.w * 2})) {
    throw Error(ErrorCode::GradShapeMismatch, "upsample2_backward");
  }
  for (int c = 0; c < is.c; ++c)
    for (int z = 0; z < is.d * 2; ++z)
      for (int y = 0; y < is.h * 2; ++y)
        for (int x = 0; x < is.w * 2; ++x) grad_in(c, z / 2, y / 2, x / 2) += grad_out(c, z, y, x);
}

Tensor4 concat_forward(const Tensor4& a, const Tensor4& b) {
  const Shape4 sa = a.shape();
  const Shape4 sb = b.shape();
  if (sa.dims() != sb.dims()) throw Error(ErrorCode::ShapeMismatch, "concat: spatial dims differ");
  Tensor4 out({sa.c + sb.c, sa.d, sa.h, sa.w});
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

void concat_backward(const Tensor4& grad_out, Tensor4& grad_a, Tensor4& grad_b) {
  if (grad_out.size() != grad_a.size() + grad_b.size()) throw Error(ErrorCode::GradShapeMismatch, "concat_backward");
  for (std::size_t i = 0; i < grad_a.size(); ++i) grad_a[i] += grad_out[i];
  for (std::size_t i = 0; i < grad_b.size(); ++i) grad_b[i] += grad_out[grad_a.size() + i];
}

std::vector<double> gap_forward(const Tensor4& in) {
  const Shape4 s = in.shape();
  std::vector<double> f(s.c, 0.0);
  for (int c = 0; c < s.c; ++c) {
    const double* p = in.channel(c);
    double sum = 0.0;
    for (std::size_t j = 0; j < s.spatial(); ++j) sum += p[j];
    f[c] = sum / static_cast<double>(s.spatial());
  }
  return f;
}

void gap_backward(const std::vector<double>& grad_f, Tensor4& grad_in) {
  const Shape4 s = grad_in.shape();
  if (grad_f.size() != static_cast<std::size_t>(s.c)) throw Error(ErrorCode::GradShapeMismatch, "gap_backward");
  const double inv = 1.0 / static_cast<double>(s.spatial());
  for (int c = 0; c < s.c; ++c) {
    double* p = grad_in.channel(c);
    const double g = grad_f[c] * inv;
    for (std::size_t j = 0; j < s.spatial(); ++j) p[j] += g;
  }
}

}  // namespace uniseg::nn
