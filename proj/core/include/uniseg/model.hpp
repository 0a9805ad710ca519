#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "uniseg/backbone.hpp"
#include "uniseg/clipdriver.hpp"
#include "uniseg/loss.hpp"
#include "uniseg/optimizer.hpp"
#include "uniseg/rng.hpp"
#include "uniseg/taxonomy.hpp"

namespace uniseg {

struct ModelConfig {
  BackboneConfig backbone;
  /// Stop gradients flowing from the generated head parameters into the
  /// backbone through the global feature f.
  bool detach_global = false;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Everything a checkpoint holds: the vision branch, one LPG map per known
/// class, optimizer moments, the taxonomy snapshot and the RNG stream.
struct ModelState {
  ModelConfig config;
  Taxonomy taxonomy;
  EmbeddingStore embeddings;
  BackboneParams backbone;
  std::map<int, LpgMap> lpg;
  OptimizerState optimizer;
  Rng rng;
  std::int64_t global_step = 0;
  std::string config_echo;

  /// Fresh model: He-normal backbone and one LPG map per taxonomy class,
  /// seeded from `seed`. Every class needs an embedding.
  static ModelState create(const ModelConfig& config, const Taxonomy& taxonomy, const EmbeddingStore& embeddings,
                           std::uint64_t seed);

  HeadLayout head_layout() const { return HeadLayout{config.backbone.decoder_channels}; }
  std::vector<int> classes() const;
  std::size_t parameter_count() const;
  /// New LPG map for `cls`, drawn from the model's RNG.
  LpgMap new_lpg_map();

  friend bool operator==(const ModelState& a, const ModelState& b);
};

/// Per-class probabilities for one patch. `classes` empty means all classes.
std::map<int, ProbMap> predict_patch(const ModelState& model, const Image& patch,
                                     const std::vector<int>& classes = {});

/// Gradient buffers shaped like the trainable parameters.
struct ModelGrads {
  BackboneParams backbone;
  std::map<int, LpgMap> lpg;

  static ModelGrads zeros_like(const ModelState& model);
  void add(const ModelGrads& other);
  void scale(double s);
};

struct SampleLoss {
  double total = 0.0;
  std::map<int, ClassLoss> per_class;
};

/// Forward every head, evaluate the masked loss against `target`, and
/// accumulate the exact gradient (times `grad_scale`) into `grads`.
SampleLoss accumulate_sample_gradients(const ModelState& model, const Image& patch, const MaskTarget& target,
                                       ModelGrads& grads, double grad_scale = 1.0);

/// Hash of every parameter byte (backbone, LPG maps) and optimizer moments,
/// per section; used to prove extension leaves old parameters untouched.
struct ParameterDigest {
  std::uint64_t backbone = 0;
  std::map<int, std::uint64_t> lpg;
  std::uint64_t backbone_moments = 0;
  std::map<int, std::uint64_t> lpg_moments;

  friend bool operator==(const ParameterDigest&, const ParameterDigest&) = default;
};
ParameterDigest digest(const ModelState& model);

}  // namespace uniseg
