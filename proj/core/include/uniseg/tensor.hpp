#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "uniseg/error.hpp"
#include "uniseg/volume.hpp"

namespace uniseg {

struct Shape4 {
  int c = 1;
  int d = 1;
  int h = 1;
  int w = 1;

  std::size_t spatial() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  std::size_t size() const { return static_cast<std::size_t>(c) * spatial(); }
  Dims dims() const { return {d, h, w}; }
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

/// Dense C x D x H x W feature map in f64.
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {}

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  double* channel(int c) { return data_.data() + static_cast<std::size_t>(c) * shape_.spatial(); }
  const double* channel(int c) const { return data_.data() + static_cast<std::size_t>(c) * shape_.spatial(); }

  double& operator()(int c, int z, int y, int x) {
    return data_[((static_cast<std::size_t>(c) * shape_.d + z) * shape_.h + y) * shape_.w + x];
  }
  double operator()(int c, int z, int y, int x) const {
    return data_[((static_cast<std::size_t>(c) * shape_.d + z) * shape_.h + y) * shape_.w + x];
  }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  static Tensor4 from_image(const Image& img) {
    Tensor4 t({1, img.dims().d, img.dims().h, img.dims().w});
    for (std::size_t i = 0; i < img.size(); ++i) t.data_[i] = img[i];
    return t;
  }

  friend bool operator==(const Tensor4&, const Tensor4&) = default;

 private:
  Shape4 shape_{};
  std::vector<double> data_;
};

}  // namespace uniseg
