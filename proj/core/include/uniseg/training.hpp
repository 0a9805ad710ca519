#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "uniseg/model.hpp"
#include "uniseg/volume.hpp"

namespace uniseg {

struct TrainConfig {
  double lr = 4e-4;
  double weight_decay = 1e-5;
  int warmup_epochs = 50;
  int epochs = 100;
  int steps_per_epoch = 1;  // one epoch is a fixed number of steps
  int batch_size = 2;
  int patch = 96;
  double fg_ratio = 2.0 / 3.0;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  int threads = 1;

  std::int64_t total_steps() const { return static_cast<std::int64_t>(epochs) * steps_per_epoch; }
  std::int64_t warmup_steps() const { return static_cast<std::int64_t>(warmup_epochs) * steps_per_epoch; }
  WarmupCosine schedule() const { return {lr, warmup_steps(), total_steps()}; }
  void validate() const;
};

/// A preprocessed volume (canonical spacing, normalised intensities) with its
/// partial annotation.
struct TrainingVolume {
  Image image;
  LabelVolume label;
};

/// One partially labelled dataset D_n with label space L_n.
struct Dataset {
  std::string id;
  LabelSpace space;
  std::vector<TrainingVolume> volumes;
};

struct Manifest;

/// Reads every manifest volume and preprocesses it; label spaces are checked
/// against the taxonomy.
std::vector<Dataset> load_datasets(const Manifest& manifest, const Taxonomy& taxonomy,
                                   Spacing spacing = kCanonicalSpacing);

/// Resample to `spacing` (trilinear image, nearest labels) and normalise.
TrainingVolume preprocess(const Image& raw_hu, const LabelMap& labels, const LabelSpace& space,
                          Spacing spacing = kCanonicalSpacing);

struct BatchItem {
  Patch<double> image;
  Patch<std::uint16_t> label;
  std::size_t dataset = 0;
  std::size_t volume = 0;
};

/// Dataset uniformly, then volume uniformly, then a fg/bg-balanced patch,
/// then augmentation.
std::vector<BatchItem> draw_batch(const std::vector<Dataset>& datasets, const TrainConfig& cfg, Rng& rng);

/// Hard targets for every class of the dataset's label space. With a taxonomy,
/// a class's target also covers voxels of its annotated descendants (a liver
/// target includes labelled liver-tumor voxels).
MaskTarget binary_targets(const Grid<std::uint16_t>& label, const LabelSpace& space,
                          const Taxonomy* taxonomy = nullptr);

using TargetBuilder = std::function<MaskTarget(const BatchItem&, const Dataset&)>;

struct BatchGradients {
  ModelGrads grads;
  std::vector<SampleLoss> losses;
  std::set<int> annotated;  // union of target classes over the batch
};

/// Mean over samples of the masked-loss gradient. Samples run in parallel;
/// the reduction is in sample order, so the result does not depend on
/// `threads`.
BatchGradients batch_gradients(const ModelState& model, const std::vector<Image>& patches,
                               const std::vector<MaskTarget>& targets, int threads);

struct StepMetrics {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;  // batch mean
  std::map<int, double> class_loss;
};

/// One AdamW step: the backbone and the LPG maps of classes annotated in the
/// batch are updated; other LPG maps (and `frozen` ones) keep their values and
/// moments. Throws DivergedLoss on a non-finite loss.
StepMetrics train_step(ModelState& model, const std::vector<Image>& patches, const std::vector<MaskTarget>& targets,
                       const TrainConfig& cfg, double lr, const std::set<int>& frozen = {});

struct TrainOptions {
  TargetBuilder targets;             // default: binary_targets
  std::set<int> frozen;              // LPG maps that never update
  std::optional<std::int64_t> stop_at;  // stop once global_step reaches this
  std::int64_t origin = 0;              // global_step at which this schedule starts
  std::function<void(const StepMetrics&)> on_step;
};

/// Runs from model.global_step to origin + cfg.total_steps() (or stop_at);
/// the learning rate at a step is schedule(global_step - origin).
std::vector<StepMetrics> train(ModelState& model, const std::vector<Dataset>& datasets, const TrainConfig& cfg,
                               const TrainOptions& options = {});

// ---- checkpoints ------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

/// Sectioned binary file `UCKPT1`: taxonomy (hash + text), config, embeddings,
/// backbone, LPG maps, AdamW moments, RNG state. Round trips are bit-exact.
void save_checkpoint(const ModelState& model, const std::filesystem::path& path);
std::vector<unsigned char> serialize_checkpoint(const ModelState& model);
/// With `expected` set, a taxonomy whose hash differs is rejected
/// (TaxonomyMismatch).
ModelState load_checkpoint(const std::filesystem::path& path, const Taxonomy* expected = nullptr);
ModelState deserialize_checkpoint(std::vector<unsigned char> bytes, const Taxonomy* expected = nullptr);

}  // namespace uniseg
