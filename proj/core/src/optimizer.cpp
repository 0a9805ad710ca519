#include "uniseg/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "uniseg/error.hpp"

namespace uniseg {

void adamw_step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads,
                MomentBuffer& moments, double lr, const AdamWConfig& cfg) {
  if (params.size() != grads.size()) throw Error(ErrorCode::GradShapeMismatch, "adamw: group lists differ");
  std::size_t total = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size()) throw Error(ErrorCode::GradShapeMismatch, "adamw: span sizes differ");
    total += params[i].size();
  }
  if (moments.m.empty()) {
    moments.m.assign(total, 0.0);
    moments.v.assign(total, 0.0);
  }
  if (moments.m.size() != total) throw Error(ErrorCode::GradShapeMismatch, "adamw: moment buffer size");

  ++moments.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(moments.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(moments.step));
  std::size_t k = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    auto g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j, ++k) {
      double& m = moments.m[k];
      double& v = moments.v[k];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g[j];
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g[j] * g[j];
      const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * p[j];
      p[j] -= lr * update;
    }
  }
}

double WarmupCosine::at(std::int64_t step) const {
  if (step < warmup_steps) return base * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const std::int64_t span = std::max<std::int64_t>(1, total_steps - warmup_steps);
  const double t = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace uniseg
