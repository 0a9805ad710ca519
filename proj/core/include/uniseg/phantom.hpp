#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "uniseg/manifest.hpp"
#include "uniseg/taxonomy.hpp"
#include "uniseg/volume.hpp"

namespace uniseg {

/// Axis-aligned ellipsoid in voxel coordinates (z, y, x).
struct EllipsoidSpec {
  int cls = 0;
  double hu = 0.0;
  std::array<double, 3> center{};
  std::array<double, 3> radii{};

  bool inside(double z, double y, double x) const;
};

/// Tube of `radius` voxels around the segment a-b.
struct VesselSpec {
  int cls = 0;
  double hu = 0.0;
  double radius = 1.0;
  std::array<double, 3> a{};
  std::array<double, 3> b{};

  bool inside(double z, double y, double x) const;
};

/// Sphere placed at a random position fully inside its parent.
struct TumorSpec {
  int cls = 0;
  int parent = 0;
  double hu = 0.0;
  double radius = 2.0;
};

struct PhantomDatasetSpec {
  std::string id;
  std::set<int> classes;
  int volumes = 1;
  double tumor_rate = 1.0;  // probability that a case contains its tumors
};

/// Text form (`UPHAN1` header; `#` comments):
///   grid D H W | spacing z y x | noise sigma | background hu
///   body hu cz cy cx rz ry rx
///   organ cls hu cz cy cx rz ry rx
///   vessel cls hu radius z0 y0 x0 z1 y1 x1
///   tumor cls parent hu radius
///   jitter center_voxels scale_fraction
///   overlap_tolerance voxels
///   dataset id volumes n tumor_rate p classes c1 c2 ...
struct PhantomSpec {
  Dims dims{64, 64, 64};
  Spacing spacing{1.5, 1.5, 1.5};
  double noise = 5.0;
  double background = -175.0;
  std::optional<EllipsoidSpec> body;
  std::vector<EllipsoidSpec> organs;
  std::vector<VesselSpec> vessels;
  std::vector<TumorSpec> tumors;
  double jitter = 0.0;
  double scale_jitter = 0.0;
  std::size_t overlap_tolerance = 0;
  std::vector<PhantomDatasetSpec> datasets;

  /// Intensities in [-175, 250], tumors reference a listed organ, classes are
  /// unique; with a taxonomy, every class and dataset class must exist.
  void validate(const Taxonomy* taxonomy = nullptr) const;
  std::vector<int> classes() const;
};

PhantomSpec parse_phantom_spec(const std::string& text, const std::string& source = "<phantom>");
PhantomSpec load_phantom_spec(const std::filesystem::path& path);

struct PhantomCase {
  Image image;     // HU
  LabelMap labels;  // complete ground truth
  bool has_tumor = false;
};

/// One case. Organ and vessel geometry is jittered; tumors (when `tumors`)
/// are placed inside their parents; noise is i.i.d. Gaussian. Organs that
/// overlap by more than the tolerance raise SpecOverlap.
PhantomCase generate_case(const PhantomSpec& spec, Rng& rng, bool tumors = true);

/// Hides every class outside the label space (sets it to background).
LabelMap partial_view(const LabelMap& full, const LabelSpace& space);

struct PhantomDataset {
  LabelSpace space;
  std::vector<PhantomCase> cases;
};

/// Every dataset of `spec`; case v of dataset d is seeded from
/// derive_seed(derive_seed(seed, d), v), so suites are reproducible.
std::vector<PhantomDataset> generate_suite(const PhantomSpec& spec, std::uint64_t seed);

/// Writes image, partial-label and full-label volumes plus `manifest.txt`;
/// returns the manifest path.
std::filesystem::path write_suite(const std::filesystem::path& dir, const std::vector<PhantomDataset>& suite);

}  // namespace uniseg
