#include "uniseg/model.hpp"

#include "binary_io.hpp"

namespace uniseg {

ModelState ModelState::create(const ModelConfig& config, const Taxonomy& taxonomy, const EmbeddingStore& embeddings,
                              std::uint64_t seed) {
  ModelState m;
  m.config = config;
  m.taxonomy = taxonomy;
  m.embeddings = embeddings;
  m.rng.seed(seed);
  m.backbone = BackboneParams::init(config.backbone, m.rng);
  for (int cls : taxonomy.indices()) {
    embeddings.get(cls);  // MissingEmbedding early rather than at first use
    m.lpg.emplace(cls, m.new_lpg_map());
  }
  return m;
}

LpgMap ModelState::new_lpg_map() {
  LpgMap map(static_cast<int>(head_layout().size()), embeddings.dim(), config.backbone.bottleneck_channels());
  map.init_he(rng);
  return map;
}

std::vector<int> ModelState::classes() const {
  std::vector<int> out;
  for (const auto& [cls, map] : lpg) out.push_back(cls);
  return out;
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = backbone.parameter_count();
  for (const auto& [cls, map] : lpg) n += map.parameter_count();
  return n;
}

bool operator==(const ModelState& a, const ModelState& b) {
  return a.config == b.config && a.taxonomy == b.taxonomy && a.embeddings == b.embeddings &&
         a.backbone == b.backbone && a.lpg == b.lpg && a.optimizer == b.optimizer && a.rng == b.rng &&
         a.global_step == b.global_step && a.config_echo == b.config_echo;
}

std::map<int, ProbMap> predict_patch(const ModelState& model, const Image& patch, const std::vector<int>& classes) {
  const BackboneOutput bo = backbone_forward(Tensor4::from_image(patch), model.backbone);
  std::map<int, ProbMap> out;
  const auto run = [&](int cls) {
    auto it = model.lpg.find(cls);
    if (it == model.lpg.end()) throw Error(ErrorCode::InvalidArgument, "model has no head for class " + std::to_string(cls));
    const HeadParams head = generate_params(model.embeddings.get(cls), bo.global, it->second, model.head_layout());
    ProbMap p = head_forward(bo.features, head);
    p.set_spacing(patch.spacing());
    out.emplace(cls, std::move(p));
  };
  if (classes.empty()) {
    for (const auto& [cls, map] : model.lpg) run(cls);
  } else {
    for (int cls : classes) run(cls);
  }
  return out;
}

ModelGrads ModelGrads::zeros_like(const ModelState& model) {
  ModelGrads g;
  g.backbone = model.backbone.zeros_like();
  for (const auto& [cls, map] : model.lpg) g.lpg.emplace(cls, map.zeros_like());
  return g;
}

void ModelGrads::add(const ModelGrads& other) {
  for (std::size_t l = 0; l < backbone.convs.size(); ++l) {
    auto& a = backbone.convs[l];
    const auto& b = other.backbone.convs[l];
    for (std::size_t i = 0; i < a.weight.size(); ++i) a.weight[i] += b.weight[i];
    for (std::size_t i = 0; i < a.bias.size(); ++i) a.bias[i] += b.bias[i];
  }
  for (auto& [cls, map] : lpg) {
    const LpgMap& o = other.lpg.at(cls);
    for (std::size_t i = 0; i < map.weight.size(); ++i) map.weight[i] += o.weight[i];
    for (std::size_t i = 0; i < map.bias.size(); ++i) map.bias[i] += o.bias[i];
  }
}

void ModelGrads::scale(double s) {
  for (auto& conv : backbone.convs) {
    for (auto& w : conv.weight) w *= s;
    for (auto& b : conv.bias) b *= s;
  }
  for (auto& [cls, map] : lpg) {
    for (auto& w : map.weight) w *= s;
    for (auto& b : map.bias) b *= s;
  }
}

SampleLoss accumulate_sample_gradients(const ModelState& model, const Image& patch, const MaskTarget& target,
                                       ModelGrads& grads, double grad_scale) {
  const BackboneOutput bo = backbone_forward(Tensor4::from_image(patch), model.backbone);
  const HeadLayout layout = model.head_layout();

  std::map<int, HeadParams> heads;
  std::map<int, Grid<double>> logits;
  for (const auto& [cls, map] : model.lpg) {
    auto [it, ok] = heads.emplace(cls, generate_params(model.embeddings.get(cls), bo.global, map, layout));
    logits.emplace(cls, head_logits(bo.features, it->second));
  }
  const LossResult loss = masked_loss_logits(logits, target, true, grad_scale);

  Tensor4 g_features(bo.features.shape());
  std::vector<double> g_global(bo.global.size(), 0.0);
  for (const auto& [cls, map] : model.lpg) {
    const std::vector<double> g_theta = head_backward_logits(bo.features, heads.at(cls), loss.grad.at(cls), &g_features);
    const std::vector<double> gf =
        generate_params_backward(model.embeddings.get(cls), bo.global, map, g_theta, grads.lpg.at(cls));
    for (std::size_t k = 0; k < gf.size(); ++k) g_global[k] += gf[k];
  }
  backbone_backward(bo.tape, model.backbone, g_features,
                    model.config.detach_global ? std::vector<double>{} : g_global, grads.backbone);

  SampleLoss out;
  out.total = loss.total;
  out.per_class = loss.per_class;
  return out;
}

namespace {

std::uint64_t hash_doubles(const std::vector<double>& v, std::uint64_t h) {
  return detail::fnv1a(v.data(), v.size() * sizeof(double), h);
}

}  // namespace

ParameterDigest digest(const ModelState& model) {
  ParameterDigest d;
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& conv : model.backbone.convs) {
    h = hash_doubles(conv.weight, h);
    h = hash_doubles(conv.bias, h);
  }
  d.backbone = h;
  for (const auto& [cls, map] : model.lpg) {
    d.lpg[cls] = hash_doubles(map.bias, hash_doubles(map.weight, 0xcbf29ce484222325ULL));
  }
  const auto moments = [](const MomentBuffer& mb) {
    std::uint64_t x = hash_doubles(mb.v, hash_doubles(mb.m, 0xcbf29ce484222325ULL));
    return detail::fnv1a(&mb.step, sizeof(mb.step), x);
  };
  d.backbone_moments = moments(model.optimizer.backbone);
  for (const auto& [cls, mb] : model.optimizer.lpg) d.lpg_moments[cls] = moments(mb);
  return d;
}

}  // namespace uniseg
