#include "uniseg/loss.hpp"

#include <algorithm>
#include <cmath>

namespace uniseg {

namespace {

struct Sums {
  double pm = 0.0, p = 0.0, m = 0.0, bce = 0.0;
};

Sums reduce(const ProbMap& p, const Grid<double>& m) {
  Sums s;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p[i];
    const double mi = m[i];
    s.pm += pi * mi;
    s.p += pi;
    s.m += mi;
    const double pc = std::clamp(pi, kProbClamp, 1.0 - kProbClamp);
    s.bce -= mi * std::log(pc) + (1.0 - mi) * std::log(1.0 - pc);
  }
  return s;
}

ClassLoss from_sums(const Sums& s, std::size_t n) {
  ClassLoss l;
  l.dice = 1.0 - (2.0 * s.pm + kDiceSmooth) / (s.p + s.m + kDiceSmooth);
  l.bce = s.bce / static_cast<double>(n);
  return l;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// softplus(z) - m z = -[m log sigmoid(z) + (1 - m) log(1 - sigmoid(z))]
double bce_logit(double z, double m) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - m * z; }

void check_target(const std::map<int, Grid<double>>& outputs, const MaskTarget& target) {
  if (target.empty()) throw Error(ErrorCode::EmptyLabelSpace, "no annotated class in the target");
  for (const auto& [cls, m] : target) {
    auto it = outputs.find(cls);
    if (it == outputs.end()) {
      throw Error(ErrorCode::InvalidArgument, "no prediction for annotated class " + std::to_string(cls));
    }
    require_same_shape(it->second, m, "masked_loss: prediction and target shapes differ");
  }
}

}  // namespace

ClassLoss class_loss(const ProbMap& p, const Grid<double>& m) {
  require_same_shape(p, m, "class_loss: prediction and target shapes differ");
  return from_sums(reduce(p, m), p.size());
}

LossResult masked_loss(const std::map<int, ProbMap>& probs, const MaskTarget& target, bool want_grad,
                       double grad_scale) {
  check_target(probs, target);
  LossResult out;
  if (want_grad) {
    for (const auto& [cls, p] : probs) out.grad.emplace(cls, ProbMap(p.dims(), p.spacing(), 0.0));
  }
  for (const auto& [cls, m] : target) {
    const ProbMap& p = probs.at(cls);
    const Sums s = reduce(p, m);
    const ClassLoss l = from_sums(s, p.size());
    out.per_class[cls] = l;
    out.total += l.total();
    if (!want_grad) continue;

    ProbMap& g = out.grad.at(cls);
    const double denom = s.p + s.m + kDiceSmooth;
    const double numer = 2.0 * s.pm + kDiceSmooth;
    const double inv_n = 1.0 / static_cast<double>(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double pi = p[i];
      const double mi = m[i];
      // d/dp of -(2 pm + eps) / (sum p + sum m + eps)
      const double d_dice = -(2.0 * mi * denom - numer) / (denom * denom);
      // straight-through clamp: a saturated head still receives a gradient
      const double pc = std::clamp(pi, kProbClamp, 1.0 - kProbClamp);
      const double d_bce = (-mi / pc + (1.0 - mi) / (1.0 - pc)) * inv_n;
      g[i] = grad_scale * (d_dice + d_bce);
    }
  }
  return out;
}

LossResult masked_loss_logits(const std::map<int, Grid<double>>& logits, const MaskTarget& target, bool want_grad,
                              double grad_scale) {
  check_target(logits, target);
  LossResult out;
  if (want_grad) {
    for (const auto& [cls, z] : logits) out.grad.emplace(cls, Grid<double>(z.dims(), z.spacing(), 0.0));
  }
  for (const auto& [cls, m] : target) {
    const Grid<double>& z = logits.at(cls);
    const std::size_t n = z.size();
    std::vector<double> p(n);
    Sums s;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = sigmoid(z[i]);
      s.pm += p[i] * m[i];
      s.p += p[i];
      s.m += m[i];
      s.bce += bce_logit(z[i], m[i]);
    }
    const ClassLoss l = from_sums(s, n);
    out.per_class[cls] = l;
    out.total += l.total();
    if (!want_grad) continue;

    Grid<double>& g = out.grad.at(cls);
    const double denom = s.p + s.m + kDiceSmooth;
    const double numer = 2.0 * s.pm + kDiceSmooth;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d_dice = -(2.0 * m[i] * denom - numer) / (denom * denom);
      g[i] = grad_scale * (d_dice * p[i] * (1.0 - p[i]) + (p[i] - m[i]) * inv_n);
    }
  }
  return out;
}

}  // namespace uniseg
