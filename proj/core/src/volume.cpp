#include "uniseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "binary_io.hpp"

namespace uniseg {

std::size_t count_nonzero(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.values().begin(), m.values().end(),
                                                [](std::uint8_t v) { return v != 0; }));
}

// ---- file formats -------------------------------------------------------

namespace {

constexpr char kVolumeMagic[5] = {'U', 'V', 'O', 'L', '1'};

void put_header(detail::ByteWriter& w, Dims d, Spacing s, VolumeDtype dtype) {
  w.put_bytes(kVolumeMagic, sizeof(kVolumeMagic));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.d));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.h));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.w));
  w.put<float>(static_cast<float>(s.z));
  w.put<float>(static_cast<float>(s.y));
  w.put<float>(static_cast<float>(s.x));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype));
}

struct Header {
  Dims dims;
  Spacing spacing;
  VolumeDtype dtype;
};

Header get_header(detail::ByteReader& r, const std::filesystem::path& path) {
  char magic[5];
  r.get_bytes(magic, sizeof(magic));
  if (!std::equal(magic, magic + 5, kVolumeMagic)) {
    throw Error(ErrorCode::Parse, path.string() + ": not a UVOL1 file");
  }
  Header h;
  h.dims.d = static_cast<int>(r.get<std::uint32_t>());
  h.dims.h = static_cast<int>(r.get<std::uint32_t>());
  h.dims.w = static_cast<int>(r.get<std::uint32_t>());
  h.spacing.z = r.get<float>();
  h.spacing.y = r.get<float>();
  h.spacing.x = r.get<float>();
  const auto tag = r.get<std::uint8_t>();
  if (tag > 1) throw Error(ErrorCode::Parse, path.string() + ": unknown dtype tag " + std::to_string(tag));
  h.dtype = static_cast<VolumeDtype>(tag);
  return h;
}

}  // namespace

void write_volume(const std::filesystem::path& path, const Image& image) {
  detail::ByteWriter w;
  put_header(w, image.dims(), image.spacing(), VolumeDtype::Float32Image);
  for (double v : image.values()) w.put<float>(static_cast<float>(v));
  detail::write_file_bytes(path, w.bytes());
}

void write_volume(const std::filesystem::path& path, const LabelMap& labels) {
  detail::ByteWriter w;
  put_header(w, labels.dims(), labels.spacing(), VolumeDtype::UInt16Labels);
  for (auto v : labels.values()) w.put<std::uint16_t>(v);
  detail::write_file_bytes(path, w.bytes());
}

void write_volume(const std::filesystem::path& path, const Mask& mask) {
  write_volume(path, convert<std::uint16_t>(mask));
}

Image read_image(const std::filesystem::path& path) {
  detail::ByteReader r(detail::read_file_bytes(path));
  const Header h = get_header(r, path);
  if (h.dtype != VolumeDtype::Float32Image) {
    throw Error(ErrorCode::Parse, path.string() + ": expected an f32 image volume");
  }
  Image out(h.dims, h.spacing);
  for (auto& v : out.values()) v = r.get<float>();
  if (!r.at_end()) throw Error(ErrorCode::Parse, path.string() + ": trailing bytes");
  return out;
}

LabelMap read_labels(const std::filesystem::path& path) {
  detail::ByteReader r(detail::read_file_bytes(path));
  const Header h = get_header(r, path);
  if (h.dtype != VolumeDtype::UInt16Labels) {
    throw Error(ErrorCode::Parse, path.string() + ": expected a u16 label volume");
  }
  LabelMap out(h.dims, h.spacing);
  for (auto& v : out.values()) v = r.get<std::uint16_t>();
  if (!r.at_end()) throw Error(ErrorCode::Parse, path.string() + ": trailing bytes");
  return out;
}

Image read_volume_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  struct Entry {
    int z, y, x;
    double v;
  };
  std::vector<Entry> entries;
  std::optional<Dims> dims;
  Spacing spacing;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) continue;
    auto fail = [&] { throw Error(ErrorCode::Parse, path.string() + ":" + std::to_string(lineno) + ": malformed line"); };
    if (first == "dims") {
      Dims d;
      if (!(ls >> d.d >> d.h >> d.w)) fail();
      dims = d;
    } else if (first == "spacing") {
      if (!(ls >> spacing.z >> spacing.y >> spacing.x)) fail();
    } else {
      Entry e{};
      try {
        e.z = std::stoi(first);
      } catch (const std::exception&) {
        fail();
      }
      if (!(ls >> e.y >> e.x >> e.v) || e.z < 0 || e.y < 0 || e.x < 0) fail();
      entries.push_back(e);
    }
  }
  if (!dims) {
    Dims d{1, 1, 1};
    for (const auto& e : entries) {
      d.d = std::max(d.d, e.z + 1);
      d.h = std::max(d.h, e.y + 1);
      d.w = std::max(d.w, e.x + 1);
    }
    dims = d;
  }
  Image out(*dims, spacing);
  for (const auto& e : entries) {
    if (!out.contains(e.z, e.y, e.x)) throw Error(ErrorCode::Parse, path.string() + ": coordinate outside dims");
    out(e.z, e.y, e.x) = e.v;
  }
  return out;
}

// ---- preprocessing -------------------------------------------------------

namespace {

Dims resampled_dims(Dims in, Spacing from, Spacing to) {
  if (!(to.z > 0 && to.y > 0 && to.x > 0)) {
    throw Error(ErrorCode::InvalidArgument, "target spacing must be > 0");
  }
  Dims out;
  for (int a = 0; a < 3; ++a) {
    out[a] = std::max(1, static_cast<int>(std::lround(in[a] * from[a] / to[a])));
  }
  return out;
}

double source_coord(int i, double from, double to, int n) {
  const double c = (i + 0.5) * (to / from) - 0.5;
  return std::clamp(c, 0.0, static_cast<double>(n - 1));
}

struct AxisSample {
  int i0, i1;
  double t;
};

std::vector<AxisSample> axis_samples(int out_n, int in_n, double from, double to) {
  std::vector<AxisSample> s(out_n);
  for (int i = 0; i < out_n; ++i) {
    const double c = source_coord(i, from, to, in_n);
    const int i0 = static_cast<int>(std::floor(c));
    s[i] = {i0, std::min(i0 + 1, in_n - 1), c - i0};
  }
  return s;
}

// Interpolating as a + t * (b - a) keeps constant signals exact.
double lerp(double a, double b, double t) { return a + t * (b - a); }

}  // namespace

Image resample(const Image& v, Spacing target, Interp mode) {
  const Dims od = resampled_dims(v.dims(), v.spacing(), target);
  if (od == v.dims() && target == v.spacing()) return v;
  Image out(od, target);
  const Spacing s = v.spacing();
  const auto zs = axis_samples(od.d, v.dims().d, s.z, target.z);
  const auto ys = axis_samples(od.h, v.dims().h, s.y, target.y);
  const auto xs = axis_samples(od.w, v.dims().w, s.x, target.x);
  for (int z = 0; z < od.d; ++z) {
    for (int y = 0; y < od.h; ++y) {
      for (int x = 0; x < od.w; ++x) {
        const auto& a = zs[z];
        const auto& b = ys[y];
        const auto& c = xs[x];
        if (mode == Interp::Nearest) {
          out(z, y, x) = v(a.t < 0.5 ? a.i0 : a.i1, b.t < 0.5 ? b.i0 : b.i1, c.t < 0.5 ? c.i0 : c.i1);
          continue;
        }
        auto row = [&](int zz, int yy) { return lerp(v(zz, yy, c.i0), v(zz, yy, c.i1), c.t); };
        const double p0 = lerp(row(a.i0, b.i0), row(a.i0, b.i1), b.t);
        const double p1 = lerp(row(a.i1, b.i0), row(a.i1, b.i1), b.t);
        out(z, y, x) = lerp(p0, p1, a.t);
      }
    }
  }
  return out;
}

LabelMap resample(const LabelMap& v, Spacing target) {
  const Dims od = resampled_dims(v.dims(), v.spacing(), target);
  if (od == v.dims() && target == v.spacing()) return v;
  LabelMap out(od, target);
  const auto zs = axis_samples(od.d, v.dims().d, v.spacing().z, target.z);
  const auto ys = axis_samples(od.h, v.dims().h, v.spacing().y, target.y);
  const auto xs = axis_samples(od.w, v.dims().w, v.spacing().x, target.x);
  auto pick = [](const AxisSample& s) { return s.t < 0.5 ? s.i0 : s.i1; };
  for (int z = 0; z < od.d; ++z)
    for (int y = 0; y < od.h; ++y)
      for (int x = 0; x < od.w; ++x) out(z, y, x) = v(pick(zs[z]), pick(ys[y]), pick(xs[x]));
  return out;
}

Image normalize_intensity(const Image& v) {
  Image out = v;
  for (auto& x : out.values()) x = (std::clamp(x, kHuLow, kHuHigh) - kHuLow) / (kHuHigh - kHuLow);
  return out;
}

template <class T>
Grid<T> reorient(const Grid<T>& v, std::array<int, 3> axis_order, std::array<bool, 3> flip) {
  std::array<int, 3> sorted = axis_order;
  std::sort(sorted.begin(), sorted.end());
  if (sorted != std::array<int, 3>{0, 1, 2}) {
    throw Error(ErrorCode::InvalidArgument, "axis_order must be a permutation of {0,1,2}");
  }
  Dims od;
  Spacing os;
  double sp[3];
  for (int i = 0; i < 3; ++i) {
    od[i] = v.dims()[axis_order[i]];
    sp[i] = v.spacing()[axis_order[i]];
  }
  os = {sp[0], sp[1], sp[2]};
  Grid<T> out(od, os);
  for (int z = 0; z < od.d; ++z)
    for (int y = 0; y < od.h; ++y)
      for (int x = 0; x < od.w; ++x) {
        const int q[3] = {z, y, x};
        int p[3];
        for (int i = 0; i < 3; ++i) p[axis_order[i]] = flip[i] ? od[i] - 1 - q[i] : q[i];
        out(z, y, x) = v(p[0], p[1], p[2]);
      }
  return out;
}

// ---- patches -------------------------------------------------------------

template <class T>
Patch<T> crop_patch(const Grid<T>& src, std::array<int, 3> center, Dims size, T fill) {
  Patch<T> p{Grid<T>(size, src.spacing(), fill),
             {center[0] - size.d / 2, center[1] - size.h / 2, center[2] - size.w / 2}};
  const Dims sd = src.dims();
  const int x_lo = std::max(0, -p.origin[2]);
  const int x_hi = std::min(size.w, sd.w - p.origin[2]);
  if (x_lo >= x_hi) return p;
  for (int z = 0; z < size.d; ++z) {
    const int sz = z + p.origin[0];
    if (sz < 0 || sz >= sd.d) continue;
    for (int y = 0; y < size.h; ++y) {
      const int sy = y + p.origin[1];
      if (sy < 0 || sy >= sd.h) continue;
      const T* in = &src(sz, sy, x_lo + p.origin[2]);
      std::copy(in, in + (x_hi - x_lo), &p.data(z, y, x_lo));
    }
  }
  return p;
}

PatchPair sample_patch(const Image& image, const LabelMap& label, Dims size, double fg_ratio, Rng& rng) {
  require_same_shape(image, label, "sample_patch: image and label shapes differ");
  if (!(fg_ratio >= 0.0 && fg_ratio <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "fg_ratio must lie in [0, 1]");
  }
  PatchPair out;
  const bool want_fg = uniform01(rng) < fg_ratio;
  std::size_t flat = 0;
  bool chosen = false;
  if (want_fg) {
    std::vector<std::size_t> fg;
    for (std::size_t i = 0; i < label.size(); ++i)
      if (label[i] != 0) fg.push_back(i);
    if (!fg.empty()) {
      flat = fg[uniform_index(rng, fg.size())];
      chosen = true;
      out.foreground_center = true;
    }
  }
  if (!chosen) flat = uniform_index(rng, label.size());
  out.center = label.coord(flat);
  out.image = crop_patch(image, out.center, size, 0.0);
  out.label = crop_patch<std::uint16_t>(label, out.center, size, 0);
  return out;
}

// ---- rotation / augmentation ---------------------------------------------

namespace {

void check_axes(const Rotation90& r) {
  if (r.axis_a == r.axis_b || r.axis_a < 0 || r.axis_a > 2 || r.axis_b < 0 || r.axis_b > 2) {
    throw Error(ErrorCode::InvalidArgument, "rotation axes must be two distinct axes in 0..2");
  }
}

int quarter_turns(int k) { return ((k % 4) + 4) % 4; }

}  // namespace

std::array<int, 3> rotate90_coord(std::array<int, 3> p, int n, Rotation90 r) {
  check_axes(r);
  for (int t = 0; t < quarter_turns(r.k); ++t) {
    const int pa = p[r.axis_a];
    const int pb = p[r.axis_b];
    p[r.axis_a] = n - 1 - pb;
    p[r.axis_b] = pa;
  }
  return p;
}

template <class T>
Grid<T> rotate90(const Grid<T>& v, Rotation90 r) {
  check_axes(r);
  Grid<T> cur = v;
  for (int t = 0; t < quarter_turns(r.k); ++t) {
    Dims od = cur.dims();
    std::swap(od[r.axis_a], od[r.axis_b]);
    Grid<T> next(od, cur.spacing());
    const int nb = cur.dims()[r.axis_b];
    for (int z = 0; z < cur.dims().d; ++z)
      for (int y = 0; y < cur.dims().h; ++y)
        for (int x = 0; x < cur.dims().w; ++x) {
          std::array<int, 3> q{z, y, x};
          const int pa = q[r.axis_a];
          const int pb = q[r.axis_b];
          q[r.axis_a] = nb - 1 - pb;
          q[r.axis_b] = pa;
          next(q[0], q[1], q[2]) = cur(z, y, x);
        }
    cur = std::move(next);
  }
  return cur;
}

AugmentPlan draw_augment(const AugmentConfig& cfg, Rng& rng) {
  static constexpr std::array<std::array<int, 2>, 3> kPairs{{{0, 1}, {0, 2}, {1, 2}}};
  AugmentPlan plan;
  if (uniform01(rng) < cfg.rotate_prob) {
    const auto& pair = kPairs[uniform_index(rng, kPairs.size())];
    plan.rotation = Rotation90{pair[0], pair[1], 1 + static_cast<int>(uniform_index(rng, 3))};
  }
  if (uniform01(rng) < cfg.shift_prob) plan.shift = uniform(rng, -cfg.shift, cfg.shift);
  return plan;
}

void apply_augment(Patch<double>& image, Patch<std::uint16_t>& label, const AugmentPlan& plan) {
  require_same_shape(image.data, label.data, "augment: image and label patch shapes differ");
  if (plan.rotation) {
    if (!image.data.dims().is_cube()) throw Error(ErrorCode::NonCubicPatch, "rotation needs a cubic patch");
    image.data = rotate90(image.data, *plan.rotation);
    label.data = rotate90(label.data, *plan.rotation);
  }
  if (plan.shift) {
    for (auto& v : image.data.values()) v += *plan.shift;
  }
}

AugmentPlan augment(Patch<double>& image, Patch<std::uint16_t>& label, const AugmentConfig& cfg, Rng& rng) {
  AugmentPlan plan = draw_augment(cfg, rng);
  apply_augment(image, label, plan);
  return plan;
}

template Grid<double> reorient(const Grid<double>&, std::array<int, 3>, std::array<bool, 3>);
template Grid<std::uint16_t> reorient(const Grid<std::uint16_t>&, std::array<int, 3>, std::array<bool, 3>);
template Grid<std::uint8_t> reorient(const Grid<std::uint8_t>&, std::array<int, 3>, std::array<bool, 3>);
template Patch<double> crop_patch(const Grid<double>&, std::array<int, 3>, Dims, double);
template Patch<std::uint16_t> crop_patch(const Grid<std::uint16_t>&, std::array<int, 3>, Dims, std::uint16_t);
template Patch<std::uint8_t> crop_patch(const Grid<std::uint8_t>&, std::array<int, 3>, Dims, std::uint8_t);
template Grid<double> rotate90(const Grid<double>&, Rotation90);
template Grid<std::uint16_t> rotate90(const Grid<std::uint16_t>&, Rotation90);
template Grid<std::uint8_t> rotate90(const Grid<std::uint8_t>&, Rotation90);

}  // namespace uniseg
