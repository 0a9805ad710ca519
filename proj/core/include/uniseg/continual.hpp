#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "uniseg/inference.hpp"
#include "uniseg/model.hpp"
#include "uniseg/training.hpp"

namespace uniseg {

/// New classes, their embeddings and the dataset that annotates them.
/// Text form:
///   UPLAN1
///   row <index>\t<name>\t<kind>\t<parent|->\t<laterality>\t<tier>
///   embeddings <path>
///   manifest <path>
struct ExtensionPlan {
  std::vector<ClassDef> new_classes;
  EmbeddingStore embeddings;  // must cover every new class
  std::filesystem::path manifest;

  /// ClassIndexCollision for indices already known, MissingEmbedding /
  /// EmbeddingDimMismatch for embedding problems.
  void validate(const ModelState& model) const;
};

ExtensionPlan parse_extension_plan(const std::string& text, const std::filesystem::path& base_dir,
                                   const std::string& source = "<plan>");
ExtensionPlan load_extension_plan(const std::filesystem::path& path);

/// Registers the new classes: extended taxonomy, their embeddings and fresh
/// LPG maps drawn from `rng`. Every pre-existing parameter, moment and
/// embedding is left untouched.
ModelState extend_model(const ModelState& model, const ExtensionPlan& plan, Rng& rng);

enum class PseudoMode { Hard, Soft };

/// Targets for a new-data patch: ground truth for `space` (the new classes)
/// and the snapshot's predictions for `old_classes`, thresholded at 0.5 in
/// hard mode or used as probabilities in soft mode. With `inclusion`, an old
/// class's target also covers labelled voxels of its new descendants.
MaskTarget build_pseudo_targets(const ModelState& snapshot, const Image& patch, const Grid<std::uint16_t>& label,
                                const LabelSpace& space, const std::vector<int>& old_classes,
                                PseudoMode mode = PseudoMode::Hard, const Taxonomy* inclusion = nullptr);

struct ExtensionConfig {
  TrainConfig train;
  bool pseudo_labels = true;
  PseudoMode mode = PseudoMode::Hard;
  /// Pseudo-labels from the evolving model instead of the frozen pre-extension
  /// snapshot.
  bool refresh_pseudo = false;
  bool freeze_old_heads = false;
  WindowSpec window;  // for the held-out evaluation
};

/// A held-out volume with complete ground truth.
struct EvalVolume {
  Image image;
  LabelMap labels;
};

/// Mean Dice per class of thresholded sliding-window predictions, against
/// ground truth with inclusion applied (a parent's mask covers its children).
std::map<int, double> evaluate_dice(const ModelState& model, const std::vector<EvalVolume>& volumes,
                                    const std::vector<int>& classes, const WindowSpec& window, int threads = 1);

struct ForgettingRow {
  int cls = 0;
  double dice_before = 0.0;
  double dice_after = 0.0;
  double delta() const { return dice_after - dice_before; }
};

struct ForgettingReport {
  std::vector<ForgettingRow> rows;  // old classes then new classes
  std::vector<int> old_classes;

  double old_mean_before() const;
  double old_mean_after() const;
  const ForgettingRow& row(int cls) const;
};

void write_forgetting_csv(const std::filesystem::path& path, const ForgettingReport& report);

struct ExtensionResult {
  ModelState model;
  ForgettingReport report;
  std::vector<StepMetrics> history;
};

/// Copy of `model` that knows only `classes`: taxonomy subset plus the matching
/// heads and optimizer state. Restricting an extended model to its old classes
/// reproduces the pre-extension model's predictions.
ModelState restrict_classes(const ModelState& model, const std::vector<int>& classes);

/// Trains an extended model on the new data: new classes against ground
/// truth, old classes against pseudo-labels (unless disabled). `old_classes`
/// are the classes of the pre-extension model.
///
/// Old classes are scored on `old_held_out` with the model restricted to
/// `old_classes`, before and after training, so new heads cannot leak into
/// their parents through inclusion and the delta isolates forgetting. New
/// classes are scored on `new_held_out` with the full model.
ExtensionResult extension_stage(ModelState model, const std::vector<int>& old_classes,
                                const std::vector<Dataset>& data, const ExtensionConfig& cfg,
                                const std::vector<EvalVolume>& old_held_out,
                                const std::vector<EvalVolume>& new_held_out);

}  // namespace uniseg
