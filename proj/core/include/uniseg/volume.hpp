#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "uniseg/error.hpp"
#include "uniseg/rng.hpp"

namespace uniseg {

// Axis order is (D, H, W) = (z, y, x) everywhere. W is the sagittal
// (left/right) axis; x grows toward the patient's left.

struct Dims {
  int d = 1;
  int h = 1;
  int w = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  int operator[](int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }
  int& operator[](int axis) { return axis == 0 ? d : (axis == 1 ? h : w); }
  bool is_cube() const { return d == h && h == w; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

/// Voxel spacing in millimetres, (z, y, x).
struct Spacing {
  double z = 1.0;
  double y = 1.0;
  double x = 1.0;

  double operator[](int axis) const { return axis == 0 ? z : (axis == 1 ? y : x); }
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

/// Dense row-major 3D grid with spacing metadata.
template <class T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  explicit Grid(Dims dims, Spacing spacing = {}, T fill = T{})
      : dims_(dims), spacing_(spacing), data_(checked_size(dims), fill) {
    if (!(spacing.z > 0 && spacing.y > 0 && spacing.x > 0)) {
      throw Error(ErrorCode::InvalidArgument, "spacing components must be > 0");
    }
  }

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  void set_spacing(Spacing s) { spacing_ = s; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * dims_.h + y) * dims_.w + x;
  }
  std::array<int, 3> coord(std::size_t i) const {
    const int x = static_cast<int>(i % dims_.w);
    const std::size_t r = i / dims_.w;
    return {static_cast<int>(r / dims_.h), static_cast<int>(r % dims_.h), x};
  }
  bool contains(int z, int y, int x) const {
    return z >= 0 && y >= 0 && x >= 0 && z < dims_.d && y < dims_.h && x < dims_.w;
  }

  T& operator()(int z, int y, int x) { return data_[index(z, y, x)]; }
  const T& operator()(int z, int y, int x) const { return data_[index(z, y, x)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  template <class U>
  bool same_shape(const Grid<U>& other) const {
    return dims_ == other.dims();
  }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.dims_ == b.dims_ && a.spacing_ == b.spacing_ && a.data_ == b.data_;
  }

 private:
  static std::size_t checked_size(Dims d) {
    if (d.d < 1 || d.h < 1 || d.w < 1) {
      throw Error(ErrorCode::InvalidArgument, "volume dims must be >= 1");
    }
    return d.size();
  }

  Dims dims_{};
  Spacing spacing_{};
  std::vector<T> data_ = std::vector<T>(1);
};

using Image = Grid<double>;
using ProbMap = Grid<double>;
using LabelMap = Grid<std::uint16_t>;
using Mask = Grid<std::uint8_t>;

template <class U, class T>
Grid<U> convert(const Grid<T>& in) {
  Grid<U> out(in.dims(), in.spacing());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = static_cast<U>(in[i]);
  return out;
}

template <class A, class B>
void require_same_shape(const Grid<A>& a, const Grid<B>& b, const char* what) {
  if (!a.same_shape(b)) throw Error(ErrorCode::ShapeMismatch, what);
}

std::size_t count_nonzero(const Mask& m);

// ---- file formats -------------------------------------------------------

enum class VolumeDtype : std::uint8_t { Float32Image = 0, UInt16Labels = 1 };

void write_volume(const std::filesystem::path& path, const Image& image);
void write_volume(const std::filesystem::path& path, const LabelMap& labels);
void write_volume(const std::filesystem::path& path, const Mask& mask);
Image read_image(const std::filesystem::path& path);
LabelMap read_labels(const std::filesystem::path& path);

/// Text fixtures: optional `dims D H W` and `spacing sz sy sx` lines, then
/// `z y x value` lines; voxels not listed are zero. Without a dims line the
/// extent is the bounding box of the listed coordinates.
Image read_volume_text(const std::filesystem::path& path);

// ---- preprocessing -------------------------------------------------------

enum class Interp { Trilinear, Nearest };

/// Output dims are round(in_dims * in_spacing / target), at least 1. Voxel
/// centres are aligned (output voxel i samples source coordinate
/// (i + 0.5) * target / in_spacing - 0.5, clamped to the grid).
Image resample(const Image& v, Spacing target, Interp mode = Interp::Trilinear);
LabelMap resample(const LabelMap& v, Spacing target);

inline constexpr double kHuLow = -175.0;
inline constexpr double kHuHigh = 250.0;
inline constexpr Spacing kCanonicalSpacing{1.5, 1.5, 1.5};

/// clamp(v, -175, 250) mapped linearly onto [0, 1].
Image normalize_intensity(const Image& v);

/// Brings a volume into canonical axis order. `axis_order[i]` names the input
/// axis that becomes output axis i; `flip[i]` reverses output axis i.
template <class T>
Grid<T> reorient(const Grid<T>& v, std::array<int, 3> axis_order, std::array<bool, 3> flip);

// ---- patches and augmentation -------------------------------------------

template <class T>
struct Patch {
  Grid<T> data;
  std::array<int, 3> origin{};  // offset of data(0,0,0) in the source grid; may be negative
};

/// Crops `size` around `center`; outside the source the fill value is used.
template <class T>
Patch<T> crop_patch(const Grid<T>& src, std::array<int, 3> center, Dims size, T fill = T{});

struct PatchPair {
  Patch<double> image;
  Patch<std::uint16_t> label;
  std::array<int, 3> center{};
  bool foreground_center = false;
};

/// With probability fg_ratio the centre is a uniformly drawn foreground voxel
/// (any non-zero label), otherwise uniform over the grid. A foreground draw on
/// a label map with no foreground falls back to the uniform draw.
PatchPair sample_patch(const Image& image, const LabelMap& label, Dims size, double fg_ratio, Rng& rng);

struct Rotation90 {
  int axis_a = 1;
  int axis_b = 2;
  int k = 1;  // number of quarter turns, 1..3
};

/// k quarter turns in the (axis_a, axis_b) plane; a single turn maps a voxel
/// with coordinates (p_a, p_b) to (n - 1 - p_b, p_a).
template <class T>
Grid<T> rotate90(const Grid<T>& v, Rotation90 r);

std::array<int, 3> rotate90_coord(std::array<int, 3> p, int n, Rotation90 r);

struct AugmentConfig {
  double rotate_prob = 0.1;
  double shift_prob = 0.2;
  double shift = 0.1;
};

/// Random choices for one augmentation call. Drawing and applying are split
/// so tests can force a particular transform.
struct AugmentPlan {
  std::optional<Rotation90> rotation;
  std::optional<double> shift;
};

AugmentPlan draw_augment(const AugmentConfig& cfg, Rng& rng);
void apply_augment(Patch<double>& image, Patch<std::uint16_t>& label, const AugmentPlan& plan);
AugmentPlan augment(Patch<double>& image, Patch<std::uint16_t>& label, const AugmentConfig& cfg, Rng& rng);

}  // namespace uniseg
