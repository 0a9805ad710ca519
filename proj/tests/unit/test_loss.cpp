#include <cmath>

#include "doctest.h"
#include "fd.hpp"
#include "test_util.hpp"
#include "uniseg/loss.hpp"

using namespace uniseg;

namespace {

Grid<double> to_double(const Mask& m) {
  Grid<double> g(m.dims(), m.spacing());
  for (std::size_t i = 0; i < m.size(); ++i) g[i] = m[i];
  return g;
}

ProbMap random_probs(Dims d, Rng& rng) {
  ProbMap p(d);
  for (double& v : p.storage()) v = uniform(rng, 0.02, 0.98);
  return p;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

TEST_CASE("perfect prediction has near-zero loss") {
  Rng rng(1);
  const Grid<double> m = to_double(test::random_mask(Dims{4, 4, 4}, 0.3, rng));
  ProbMap p(m.dims());
  for (std::size_t i = 0; i < m.size(); ++i) p[i] = m[i] ? 1.0 : 0.0;
  const LossResult r = masked_loss({{6, p}}, {{6, m}});
  CHECK(r.total < 1e-5);
  CHECK(r.total >= 0.0);
}

TEST_CASE("uninformative prediction on an empty target") {
  const Dims d{4, 4, 4};
  const double n = static_cast<double>(d.size());
  const ClassLoss l = class_loss(ProbMap(d, {}, 0.5), Grid<double>(d));
  CHECK(std::abs(l.bce - std::log(2.0)) < 1e-12);
  CHECK(std::abs(l.dice - (1.0 - kDiceSmooth / (0.5 * n + kDiceSmooth))) < 1e-12);

  Grid<double> z(d);
  const LossResult r = masked_loss_logits({{1, z}}, {{1, Grid<double>(d)}});
  CHECK(std::abs(r.per_class.at(1).bce - std::log(2.0)) < 1e-12);
  CHECK(std::abs(r.per_class.at(1).dice - l.dice) < 1e-12);
}

TEST_CASE("masking: non-target classes get no loss and a zero gradient") {
  Rng rng(2);
  for (int seed = 0; seed < 100; ++seed) {
    const Dims d{3, 3, 3};
    std::map<int, ProbMap> probs;
    for (int c : {1, 6, 11, 27}) probs.emplace(c, random_probs(d, rng));
    MaskTarget target;
    target.emplace(6, to_double(test::random_mask(d, 0.4, rng)));
    target.emplace(27, to_double(test::random_mask(d, 0.1, rng)));
    const LossResult r = masked_loss(probs, target);
    CHECK(r.per_class.size() == 2);
    for (int c : {1, 11})
      for (double g : r.grad.at(c).storage()) CHECK(g == 0.0);

    // Decomposition: total equals the sum of single-class losses.
    double sum = 0.0;
    for (const auto& [c, m] : target) sum += class_loss(probs.at(c), m).total();
    CHECK(std::abs(r.total - sum) < 1e-12);

    // Changing a non-target prediction leaves the loss bit-identical.
    probs.at(11) = random_probs(d, rng);
    CHECK(masked_loss(probs, target).total == r.total);
  }
}

TEST_CASE("class order does not matter") {
  Rng rng(3);
  const Dims d{3, 4, 2};
  std::vector<int> classes = {3, 9, 14, 27};
  std::map<int, ProbMap> probs;
  MaskTarget target;
  for (int c : classes) {
    probs.emplace(c, random_probs(d, rng));
    target.emplace(c, to_double(test::random_mask(d, 0.5, rng)));
  }
  const double base = masked_loss(probs, target).total;
  // Relabel the classes by a permutation; the loss is a sum over classes.
  const std::vector<int> perm = {27, 3, 14, 9};
  std::map<int, ProbMap> p2;
  MaskTarget t2;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    p2.emplace(perm[k], probs.at(classes[k]));
    t2.emplace(perm[k], target.at(classes[k]));
  }
  CHECK(std::abs(masked_loss(p2, t2).total - base) < 1e-12);
}

TEST_CASE("loss errors") {
  const Dims d{2, 2, 2};
  try {
    masked_loss({{1, ProbMap(d)}}, {});
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyLabelSpace);
  }
  CHECK_THROWS_AS(masked_loss({{1, ProbMap(d)}}, {{2, Grid<double>(d)}}), Error);
  CHECK_THROWS_AS(masked_loss({{1, ProbMap(d)}}, {{1, Grid<double>(Dims{2, 2, 3})}}), Error);
}

TEST_CASE("probability-space gradient matches finite differences") {
  Rng rng(4);
  const Dims d{3, 3, 3};
  std::map<int, ProbMap> probs = {{1, random_probs(d, rng)}, {6, random_probs(d, rng)}};
  MaskTarget target = {{1, to_double(test::random_mask(d, 0.3, rng))}};
  // Soft target values too.
  Grid<double> soft(d);
  for (double& v : soft.storage()) v = uniform01(rng);
  target.emplace(6, soft);
  const LossResult r = masked_loss(probs, target, true, 1.0);
  for (int c : {1, 6}) {
    auto loss = [&] { return masked_loss(probs, target, false).total; };
    CHECK(test::max_rel_error(test::probe_gradient(probs.at(c).values(), r.grad.at(c).values(), loss, 15, rng)) < 1e-5);
  }
  const LossResult half = masked_loss(probs, target, true, 0.5);
  for (std::size_t i = 0; i < half.grad.at(1).size(); ++i) CHECK(half.grad.at(1)[i] == 0.5 * r.grad.at(1)[i]);
}

TEST_CASE("logit-space loss agrees with the probability form and has exact gradients") {
  Rng rng(5);
  const Dims d{3, 3, 3};
  std::map<int, Grid<double>> logits;
  std::map<int, ProbMap> probs;
  for (int c : {2, 7}) {
    Grid<double> z(d);
    for (double& v : z.storage()) v = 3.0 * normal01(rng);
    ProbMap p(d);
    for (std::size_t i = 0; i < z.size(); ++i) p[i] = sigmoid(z[i]);
    logits.emplace(c, z);
    probs.emplace(c, p);
  }
  const MaskTarget target = {{2, to_double(test::random_mask(d, 0.4, rng))}, {7, to_double(test::random_mask(d, 0.2, rng))}};
  const LossResult lz = masked_loss_logits(logits, target);
  CHECK(std::abs(lz.total - masked_loss(probs, target, false).total) < 1e-9);
  for (int c : {2, 7}) {
    auto loss = [&] { return masked_loss_logits(logits, target, false).total; };
    CHECK(test::max_rel_error(test::probe_gradient(logits.at(c).values(), lz.grad.at(c).values(), loss, 15, rng)) < 1e-5);
  }

  // A saturated wrong head keeps a BCE gradient of (p - m) / N.
  Grid<double> sat(d, {}, 40.0);
  const LossResult s = masked_loss_logits({{1, sat}}, {{1, Grid<double>(d)}});
  CHECK(std::isfinite(s.total));
  for (double g : s.grad.at(1).storage()) CHECK(g > 0.9 / static_cast<double>(d.size()));
}
