#include "uniseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "uniseg/manifest.hpp"
#include "uniseg/parallel.hpp"

namespace uniseg {

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw Error(ErrorCode::InvalidArgument, "lr must be >= 0");
  if (batch_size < 1) throw Error(ErrorCode::InvalidArgument, "batch_size must be >= 1");
  if (epochs < 0 || steps_per_epoch < 1 || warmup_epochs < 0) {
    throw Error(ErrorCode::InvalidArgument, "epochs/steps_per_epoch/warmup_epochs out of range");
  }
  if (patch < 1) throw Error(ErrorCode::InvalidArgument, "patch must be >= 1");
  if (!(fg_ratio >= 0.0 && fg_ratio <= 1.0)) throw Error(ErrorCode::InvalidArgument, "fg_ratio must be in [0,1]");
}

TrainingVolume preprocess(const Image& raw_hu, const LabelMap& labels, const LabelSpace& space, Spacing spacing) {
  require_same_shape(raw_hu, labels, "preprocess: image and label shapes differ");
  TrainingVolume v;
  v.image = normalize_intensity(resample(raw_hu, spacing, Interp::Trilinear));
  v.label.grid = resample(labels, spacing);
  v.label.space = space;
  v.label.validate();
  return v;
}

std::vector<BatchItem> draw_batch(const std::vector<Dataset>& datasets, const TrainConfig& cfg, Rng& rng) {
  if (datasets.empty()) throw Error(ErrorCode::InvalidArgument, "no training datasets");
  std::vector<BatchItem> batch;
  batch.reserve(cfg.batch_size);
  const Dims size{cfg.patch, cfg.patch, cfg.patch};
  for (int b = 0; b < cfg.batch_size; ++b) {
    BatchItem item;
    item.dataset = uniform_index(rng, datasets.size());
    const Dataset& ds = datasets[item.dataset];
    if (ds.volumes.empty()) throw Error(ErrorCode::InvalidArgument, "dataset '" + ds.id + "' has no volumes");
    item.volume = uniform_index(rng, ds.volumes.size());
    const TrainingVolume& vol = ds.volumes[item.volume];
    PatchPair pp = sample_patch(vol.image, vol.label.grid, size, cfg.fg_ratio, rng);
    augment(pp.image, pp.label, cfg.augment, rng);
    item.image = std::move(pp.image);
    item.label = std::move(pp.label);
    batch.push_back(std::move(item));
  }
  return batch;
}

MaskTarget binary_targets(const Grid<std::uint16_t>& label, const LabelSpace& space, const Taxonomy* taxonomy) {
  MaskTarget t;
  for (int cls : space.classes) {
    // value -> 1 when the voxel label is cls or an annotated descendant of cls
    std::set<int> members{cls};
    if (taxonomy) {
      for (int other : space.classes) {
        if (!taxonomy->contains(other)) continue;
        const std::vector<int> anc = taxonomy->ancestors(other);
        if (std::find(anc.begin(), anc.end(), cls) != anc.end()) members.insert(other);
      }
    }
    Grid<double> m(label.dims(), label.spacing(), 0.0);
    for (std::size_t i = 0; i < label.size(); ++i) m[i] = members.count(label[i]) ? 1.0 : 0.0;
    t.emplace(cls, std::move(m));
  }
  return t;
}

std::vector<Dataset> load_datasets(const Manifest& manifest, const Taxonomy& taxonomy, Spacing spacing) {
  std::vector<Dataset> out;
  for (const ManifestDataset& md : manifest.datasets) {
    Dataset ds;
    ds.id = md.space.dataset_id;
    ds.space = md.space;
    ds.space.validate(taxonomy);
    for (const ManifestVolume& mv : md.volumes) {
      ds.volumes.push_back(preprocess(read_image(mv.image), read_labels(mv.label), ds.space, spacing));
    }
    out.push_back(std::move(ds));
  }
  return out;
}

BatchGradients batch_gradients(const ModelState& model, const std::vector<Image>& patches,
                               const std::vector<MaskTarget>& targets, int threads) {
  if (patches.size() != targets.size() || patches.empty()) {
    throw Error(ErrorCode::InvalidArgument, "batch needs one target per patch");
  }
  const std::size_t n = patches.size();
  std::vector<ModelGrads> per_sample(n);
  std::vector<SampleLoss> losses(n);
  parallel_for(n, threads, [&](std::size_t i) {
    per_sample[i] = ModelGrads::zeros_like(model);
    losses[i] = accumulate_sample_gradients(model, patches[i], targets[i], per_sample[i]);
  });
  BatchGradients out;
  out.grads = std::move(per_sample[0]);
  for (std::size_t i = 1; i < n; ++i) out.grads.add(per_sample[i]);
  out.grads.scale(1.0 / static_cast<double>(n));
  out.losses = std::move(losses);
  for (const auto& t : targets)
    for (const auto& [cls, m] : t) out.annotated.insert(cls);
  return out;
}

StepMetrics train_step(ModelState& model, const std::vector<Image>& patches, const std::vector<MaskTarget>& targets,
                       const TrainConfig& cfg, double lr, const std::set<int>& frozen) {
  BatchGradients bg = batch_gradients(model, patches, targets, cfg.threads);

  StepMetrics metrics;
  metrics.step = model.global_step;
  metrics.lr = lr;
  for (const auto& l : bg.losses) {
    metrics.loss += l.total;
    for (const auto& [cls, cl] : l.per_class) metrics.class_loss[cls] += cl.total();
  }
  metrics.loss /= static_cast<double>(bg.losses.size());
  if (!std::isfinite(metrics.loss)) {
    std::ostringstream os;
    os << "non-finite loss at step " << model.global_step << " (lr " << lr << "); per-class:";
    for (const auto& [cls, v] : metrics.class_loss) os << ' ' << cls << '=' << v;
    throw Error(ErrorCode::DivergedLoss, os.str());
  }

  const AdamWConfig adam{0.9, 0.999, 1e-8, cfg.weight_decay};
  {
    std::vector<std::span<double>> params;
    std::vector<std::span<const double>> grads;
    for (std::size_t l = 0; l < model.backbone.convs.size(); ++l) {
      params.emplace_back(model.backbone.convs[l].weight);
      params.emplace_back(model.backbone.convs[l].bias);
      grads.emplace_back(bg.grads.backbone.convs[l].weight);
      grads.emplace_back(bg.grads.backbone.convs[l].bias);
    }
    adamw_step(params, grads, model.optimizer.backbone, lr, adam);
  }
  for (int cls : bg.annotated) {
    if (frozen.count(cls)) continue;
    LpgMap& map = model.lpg.at(cls);
    const LpgMap& g = bg.grads.lpg.at(cls);
    adamw_step({map.weight, map.bias}, {g.weight, g.bias}, model.optimizer.lpg[cls], lr, adam);
  }
  ++model.global_step;
  return metrics;
}

std::vector<StepMetrics> train(ModelState& model, const std::vector<Dataset>& datasets, const TrainConfig& cfg,
                               const TrainOptions& options) {
  cfg.validate();
  const WarmupCosine schedule = cfg.schedule();
  std::int64_t end = options.origin + cfg.total_steps();
  if (options.stop_at) end = std::min(end, *options.stop_at);
  std::vector<StepMetrics> history;
  while (model.global_step < end) {
    std::vector<BatchItem> batch = draw_batch(datasets, cfg, model.rng);
    std::vector<Image> patches;
    std::vector<MaskTarget> targets;
    patches.reserve(batch.size());
    targets.reserve(batch.size());
    for (const auto& item : batch) {
      const Dataset& ds = datasets[item.dataset];
      targets.push_back(options.targets ? options.targets(item, ds)
                                        : binary_targets(item.label.data, ds.space, &model.taxonomy));
      patches.push_back(item.image.data);
    }
    StepMetrics m = train_step(model, patches, targets, cfg, schedule.at(model.global_step - options.origin), options.frozen);
    if (options.on_step) options.on_step(m);
    history.push_back(std::move(m));
  }
  return history;
}

}  // namespace uniseg
