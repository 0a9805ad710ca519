#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "uniseg/model.hpp"
#include "uniseg/taxonomy.hpp"
#include "uniseg/volume.hpp"

namespace uniseg {

struct WindowSpec {
  int window = 96;
  double overlap = 0.5;
  double sigma_fraction = 0.125;  // Gaussian sigma relative to the window edge

  void validate() const;
  int stride() const;
};

/// Blend weight along one window axis, centred at (n-1)/2.
std::vector<double> gaussian_profile(int n, double sigma_fraction);

/// Window origins along an axis of `extent` voxels: multiples of the stride,
/// the last one clamped so the window ends at the border.
std::vector<int> window_starts(int extent, int window, int stride);

using PatchPredictor = std::function<std::map<int, ProbMap>(const Image&)>;

/// Gaussian-weighted mean of overlapping window predictions. Volumes smaller
/// than the window are reflect-padded (WindowTooLarge when the reflection
/// cannot reach). Windows are predicted in parallel and accumulated in a fixed
/// order, so the result does not depend on `threads`.
std::map<int, ProbMap> sliding_window(const Image& x, const PatchPredictor& predict, const WindowSpec& spec,
                                      int threads = 1);
std::map<int, ProbMap> sliding_window(const Image& x, const ModelState& model, const WindowSpec& spec,
                                      int threads = 1, const std::vector<int>& classes = {});

/// Keeps the largest 26-connected component; ties go to the component whose
/// first voxel in raster order comes first.
Mask largest_component(const Mask& mask);
/// Voxel-wise AND.
Mask restrict_region(const Mask& mask, const Mask& region);

/// Flattens per-class masks: ascending merge tier, later tiers overwrite,
/// within a tier the highest probability wins (ties to the lower index). The
/// input masks are not modified. Classes absent from the taxonomy are an
/// error.
LabelMap merge(const std::map<int, Mask>& masks, const std::map<int, ProbMap>& probs, const Taxonomy& taxonomy);

/// Half-open voxel box [lo, hi).
struct Box {
  std::array<int, 3> lo{};
  std::array<int, 3> hi{};

  Mask to_mask(Dims dims, Spacing spacing) const;
  friend bool operator==(const Box&, const Box&) = default;
};

struct ClassPostprocess {
  bool lateral = false;            // keep only the class's own body side
  bool largest_component = false;  // non-largest connected component suppression
  std::optional<Box> region;       // restrict to this box

  friend bool operator==(const ClassPostprocess&, const ClassPostprocess&) = default;
};

/// Text file `UPOST1`, then `threshold <t>` and per-class lines
/// `<class> [lcc] [lateral] [region z0 y0 x0 z1 y1 x1]`.
struct PostprocessConfig {
  double threshold = 0.5;
  std::map<int, ClassPostprocess> classes;

  const ClassPostprocess& get(int cls) const;
  friend bool operator==(const PostprocessConfig&, const PostprocessConfig&) = default;
};

PostprocessConfig parse_postprocess(const std::string& text, const std::string& source = "<postprocess>");
PostprocessConfig load_postprocess(const std::filesystem::path& path);
std::string serialize_postprocess(const PostprocessConfig& cfg);

struct PredictionSet {
  std::map<int, ProbMap> probs;
  std::map<int, Mask> masks;  // after threshold, inclusion and post-processing
  LabelMap merged;
};

/// Threshold every probability map, then apply inclusion, laterality,
/// largest-component and region steps per class, then merge.
PredictionSet postprocess(std::map<int, ProbMap> probs, const Taxonomy& taxonomy, const PostprocessConfig& cfg);

/// sliding_window followed by postprocess.
PredictionSet predict_volume(const Image& x, const ModelState& model, const WindowSpec& spec,
                             const PostprocessConfig& cfg, int threads = 1);

/// Writes `class_<k>.uvol` masks (plus `prob_<k>.uvol` when `with_probs`),
/// `merged.uvol` and `prediction.json`.
void write_prediction(const std::filesystem::path& dir, const PredictionSet& pred, const WindowSpec& spec,
                      const PostprocessConfig& cfg, const std::string& checkpoint_hash, bool with_probs);

}  // namespace uniseg
