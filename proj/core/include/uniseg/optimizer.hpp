#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

namespace uniseg {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

/// First/second moments and the bias-correction step count of one parameter
/// group. Groups that are skipped in a step keep their moments and counter.
struct MomentBuffer {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;

  friend bool operator==(const MomentBuffer&, const MomentBuffer&) = default;
};

struct OptimizerState {
  MomentBuffer backbone;
  std::map<int, MomentBuffer> lpg;

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// One decoupled-weight-decay Adam step over a group given as parallel lists
/// of parameter and gradient spans (flattened in list order):
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
void adamw_step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads,
                MomentBuffer& moments, double lr, const AdamWConfig& cfg);

/// Linear warm-up then cosine decay:
///   step < warmup: base * (step + 1) / warmup
///   otherwise:     base * 0.5 * (1 + cos(pi * (step - warmup) / (total - warmup)))
struct WarmupCosine {
  double base = 4e-4;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;

  double at(std::int64_t step) const;
};

}  // namespace uniseg
