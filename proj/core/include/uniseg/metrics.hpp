#pragma once

#include <cstddef>
#include <vector>

#include "uniseg/volume.hpp"

namespace uniseg {

/// 2|P & G| / (|P| + |G|); 1 when both masks are empty.
double dice(const Mask& pred, const Mask& gt);

/// Mask voxels with at least one face neighbour outside the mask (voxels on
/// the grid border count as boundary).
Mask boundary(const Mask& mask);

/// Squared Euclidean distance (mm^2, using the grid spacing) from every voxel
/// to the nearest nonzero voxel of `mask`; +inf everywhere when it is empty.
Grid<double> squared_distance_transform(const Mask& mask);

/// Normalised surface distance: the fraction of boundary voxels of either
/// mask lying within `tau_mm` of the other mask's boundary. Both empty -> 1,
/// exactly one empty -> 0. A distance equal to tau counts as within.
double nsd(const Mask& pred, const Mask& gt, double tau_mm);

struct DetectionRule {
  std::size_t min_voxels = 10;  // a case is called tumor-positive at this many predicted voxels
};

struct DetectionCase {
  std::size_t predicted_voxels = 0;
  bool has_tumor = false;

  static DetectionCase from_mask(const Mask& pred, bool has_tumor) { return {count_nonzero(pred), has_tumor}; }
};

struct DetectionStats {
  double sensitivity = 0.0;
  double specificity = 0.0;
  double harmonic = 0.0;
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
};

/// 2 s t / (s + t), and 0 when either rate is 0.
double harmonic_mean(double sensitivity, double specificity);

/// Patient-level rates. Needs at least one positive and one negative case
/// (InsufficientCases).
DetectionStats detection_stats(const std::vector<DetectionCase>& cases, const DetectionRule& rule = {});

}  // namespace uniseg
