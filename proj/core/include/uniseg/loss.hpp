#pragma once

#include <map>

#include "uniseg/volume.hpp"

namespace uniseg {

/// Per-class supervision for one sample. Values are in [0, 1]; hard targets
/// are {0, 1}, soft pseudo-labels carry probabilities. Only annotated classes
/// are present.
using MaskTarget = std::map<int, Grid<double>>;

inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kProbClamp = 1e-7;

struct ClassLoss {
  double dice = 0.0;  // 1 - (2 sum(pm) + eps) / (sum(p) + sum(m) + eps)
  double bce = 0.0;   // voxel mean, probabilities clamped to [1e-7, 1 - 1e-7]
  double total() const { return dice + bce; }
};

struct LossResult {
  double total = 0.0;
  std::map<int, ClassLoss> per_class;
  /// dL/dP for every class in the prediction set; all-zero for classes that
  /// are not in the target.
  std::map<int, ProbMap> grad;
};

/// Sum over annotated classes of Dice loss + BCE. Classes present in `probs`
/// but absent from `target` contribute nothing, and their gradient is exactly
/// zero. Gradients are scaled by `grad_scale`. The BCE derivative is taken at
/// the clamped probability, so it is exact inside the clamp range and never
/// vanishes outside it.
LossResult masked_loss(const std::map<int, ProbMap>& probs, const MaskTarget& target, bool want_grad = true,
                       double grad_scale = 1.0);

/// Same loss evaluated from pre-sigmoid outputs z: BCE is computed as
/// softplus(z) - m z without clamping, and `grad` holds dL/dz. Saturated
/// heads keep a gradient of (p - m) / N from the BCE term.
LossResult masked_loss_logits(const std::map<int, Grid<double>>& logits, const MaskTarget& target,
                              bool want_grad = true, double grad_scale = 1.0);

ClassLoss class_loss(const ProbMap& p, const Grid<double>& m);

}  // namespace uniseg
