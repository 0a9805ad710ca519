#include "uniseg/metrics.hpp"

#include <limits>

namespace uniseg {

double dice(const Mask& pred, const Mask& gt) {
  require_same_shape(pred, gt, "dice: mask shapes differ");
  std::size_t inter = 0, p = 0, g = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0;
    const bool b = gt[i] != 0;
    inter += a && b;
    p += a;
    g += b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

Mask boundary(const Mask& mask) {
  const Dims d = mask.dims();
  Mask out(d, mask.spacing(), 0);
  static constexpr int kOff[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  for (int z = 0; z < d.d; ++z)
    for (int y = 0; y < d.h; ++y)
      for (int x = 0; x < d.w; ++x) {
        if (!mask(z, y, x)) continue;
        for (const auto& o : kOff) {
          const int nz = z + o[0], ny = y + o[1], nx = x + o[2];
          if (!mask.contains(nz, ny, nx) || !mask(nz, ny, nx)) {
            out(z, y, x) = 1;
            break;
          }
        }
      }
  return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas (exact 1D squared distance) over f[0..n) with
// sample spacing s; +inf samples are not sites.
void edt_1d(const double* f, double* out, int n, double s, std::vector<int>& v, std::vector<double>& zb) {
  const double s2 = s * s;
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double fq = f[q] + s2 * q * q;
    while (k >= 0) {
      const int p = v[k];
      const double b = (fq - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p));
      if (b <= zb[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    zb[k] = k == 0 ? -kInf : (fq - (f[v[k - 1]] + s2 * v[k - 1] * static_cast<double>(v[k - 1]))) /
                                 (2.0 * s2 * (q - v[k - 1]));
  }
  if (k < 0) {
    for (int q = 0; q < n; ++q) out[q] = kInf;
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (j < k && zb[j + 1] < q) ++j;
    const double dq = (q - v[j]) * s;
    out[q] = dq * dq + f[v[j]];
  }
}

}  // namespace

Grid<double> squared_distance_transform(const Mask& mask) {
  const Dims d = mask.dims();
  const Spacing sp = mask.spacing();
  Grid<double> g(d, sp, kInf);
  for (std::size_t i = 0; i < g.size(); ++i)
    if (mask[i]) g[i] = 0.0;
  const int nmax = std::max(d.d, std::max(d.h, d.w));
  std::vector<double> f(nmax), o(nmax), zb(nmax + 1);
  std::vector<int> v(nmax);
  // x, then y, then z
  for (int z = 0; z < d.d; ++z)
    for (int y = 0; y < d.h; ++y) {
      for (int x = 0; x < d.w; ++x) f[x] = g(z, y, x);
      edt_1d(f.data(), o.data(), d.w, sp.x, v, zb);
      for (int x = 0; x < d.w; ++x) g(z, y, x) = o[x];
    }
  for (int z = 0; z < d.d; ++z)
    for (int x = 0; x < d.w; ++x) {
      for (int y = 0; y < d.h; ++y) f[y] = g(z, y, x);
      edt_1d(f.data(), o.data(), d.h, sp.y, v, zb);
      for (int y = 0; y < d.h; ++y) g(z, y, x) = o[y];
    }
  for (int y = 0; y < d.h; ++y)
    for (int x = 0; x < d.w; ++x) {
      for (int z = 0; z < d.d; ++z) f[z] = g(z, y, x);
      edt_1d(f.data(), o.data(), d.d, sp.z, v, zb);
      for (int z = 0; z < d.d; ++z) g(z, y, x) = o[z];
    }
  return g;
}

double nsd(const Mask& pred, const Mask& gt, double tau_mm) {
  require_same_shape(pred, gt, "nsd: mask shapes differ");
  if (!(tau_mm > 0.0)) throw Error(ErrorCode::InvalidArgument, "nsd tolerance must be > 0");
  const Mask bp = boundary(pred);
  const Mask bg = boundary(gt);
  const std::size_t np = count_nonzero(bp);
  const std::size_t ng = count_nonzero(bg);
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  const Grid<double> dp = squared_distance_transform(bp);
  const Grid<double> dg = squared_distance_transform(bg);
  // relative slack absorbs summation-order rounding at d == tau
  const double limit = tau_mm * tau_mm * (1.0 + 1e-12);
  std::size_t within = 0;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    if (bp[i] && dg[i] <= limit) ++within;
    if (bg[i] && dp[i] <= limit) ++within;
  }
  return static_cast<double>(within) / static_cast<double>(np + ng);
}

double harmonic_mean(double sensitivity, double specificity) {
  if (sensitivity <= 0.0 || specificity <= 0.0) return 0.0;
  return 2.0 * sensitivity * specificity / (sensitivity + specificity);
}

DetectionStats detection_stats(const std::vector<DetectionCase>& cases, const DetectionRule& rule) {
  if (rule.min_voxels < 1) throw Error(ErrorCode::InvalidArgument, "min_voxels must be >= 1");
  DetectionStats s;
  for (const auto& c : cases) {
    const bool called = c.predicted_voxels >= rule.min_voxels;
    if (c.has_tumor) {
      called ? ++s.tp : ++s.fn;
    } else {
      called ? ++s.fp : ++s.tn;
    }
  }
  if (s.tp + s.fn == 0 || s.tn + s.fp == 0) {
    throw Error(ErrorCode::InsufficientCases, "detection needs at least one positive and one negative case (got " +
                                                  std::to_string(s.tp + s.fn) + " positive, " +
                                                  std::to_string(s.tn + s.fp) + " negative)");
  }
  s.sensitivity = static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fn);
  s.specificity = static_cast<double>(s.tn) / static_cast<double>(s.tn + s.fp);
  s.harmonic = harmonic_mean(s.sensitivity, s.specificity);
  return s;
}

}  // namespace uniseg
