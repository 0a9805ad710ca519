#include "uniseg/continual.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "uniseg/metrics.hpp"

namespace uniseg {

void ExtensionPlan::validate(const ModelState& model) const {
  for (const ClassDef& c : new_classes) {
    if (model.taxonomy.contains(c.index) || model.lpg.count(c.index)) {
      throw Error(ErrorCode::ClassIndexCollision,
                  "class index " + std::to_string(c.index) + " (" + c.name + ") already exists in the model");
    }
    if (embeddings.dim() != model.embeddings.dim()) {
      throw Error(ErrorCode::EmbeddingDimMismatch, "plan embeddings have dimension " + std::to_string(embeddings.dim()) +
                                                       ", model uses " + std::to_string(model.embeddings.dim()));
    }
    embeddings.get(c.index);
  }
}

ExtensionPlan parse_extension_plan(const std::string& text, const std::filesystem::path& base_dir,
                                   const std::string& source) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool header = false;
  ExtensionPlan plan;
  bool have_embeddings = false;
  const auto where = [&] { return source + ":" + std::to_string(lineno); };
  const auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos || line[start] == '#') continue;
    const std::size_t end = line.find_first_of(" \t", start);
    const std::string key = line.substr(start, end == std::string::npos ? std::string::npos : end - start);
    std::string rest;
    if (end != std::string::npos) {
      const std::size_t r = line.find_first_not_of(" \t", end);
      if (r != std::string::npos) rest = line.substr(r);
    }
    if (!header) {
      if (key != "UPLAN1") throw Error(ErrorCode::Parse, where() + ": expected header UPLAN1");
      header = true;
      continue;
    }
    if (key == "row") {
      plan.new_classes.push_back(parse_template_row(rest, where()));
    } else if (key == "embeddings") {
      if (rest.empty()) throw Error(ErrorCode::Parse, where() + ": embeddings needs a path");
      plan.embeddings = load_embeddings(resolve(rest));
      have_embeddings = true;
    } else if (key == "manifest") {
      if (rest.empty()) throw Error(ErrorCode::Parse, where() + ": manifest needs a path");
      plan.manifest = resolve(rest);
    } else {
      throw Error(ErrorCode::Parse, where() + ": unknown plan directive '" + key + "'");
    }
  }
  if (!header) throw Error(ErrorCode::Parse, source + ": empty extension plan");
  if (!plan.new_classes.empty() && !have_embeddings) {
    throw Error(ErrorCode::Parse, source + ": plan adds classes but names no embeddings file");
  }
  return plan;
}

ExtensionPlan load_extension_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_extension_plan(ss.str(), path.parent_path(), path.string());
}

ModelState extend_model(const ModelState& model, const ExtensionPlan& plan, Rng& rng) {
  plan.validate(model);
  ModelState out = model;
  out.taxonomy = model.taxonomy.extended(plan.new_classes);
  const auto out_dim = static_cast<int>(out.head_layout().size());
  for (const ClassDef& c : plan.new_classes) {
    out.embeddings.set(c.index, plan.embeddings.get(c.index));
    LpgMap map(out_dim, out.embeddings.dim(), out.config.backbone.bottleneck_channels());
    map.init_he(rng);
    out.lpg.emplace(c.index, std::move(map));
  }
  return out;
}

MaskTarget build_pseudo_targets(const ModelState& snapshot, const Image& patch, const Grid<std::uint16_t>& label,
                                const LabelSpace& space, const std::vector<int>& old_classes, PseudoMode mode,
                                const Taxonomy* inclusion) {
  MaskTarget t = binary_targets(label, space);
  if (old_classes.empty()) return t;
  std::map<int, ProbMap> probs = predict_patch(snapshot, patch, old_classes);
  for (int cls : old_classes) {
    if (space.contains(cls)) continue;  // ground truth wins
    ProbMap p = std::move(probs.at(cls));
    if (mode == PseudoMode::Hard) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] = p[i] > 0.5 ? 1.0 : 0.0;
    }
    if (inclusion && inclusion->contains(cls)) {
      for (int child : space.classes) {
        if (!inclusion->contains(child)) continue;
        const std::vector<int> anc = inclusion->ancestors(child);
        if (std::find(anc.begin(), anc.end(), cls) == anc.end()) continue;
        for (std::size_t i = 0; i < p.size(); ++i)
          if (label[i] == child) p[i] = 1.0;
      }
    }
    t.emplace(cls, std::move(p));
  }
  return t;
}

std::map<int, double> evaluate_dice(const ModelState& model, const std::vector<EvalVolume>& volumes,
                                    const std::vector<int>& classes, const WindowSpec& window, int threads) {
  std::map<int, double> sum;
  for (int cls : classes) sum[cls] = 0.0;
  if (volumes.empty()) return sum;
  for (const EvalVolume& v : volumes) {
    const PredictionSet pred = postprocess(sliding_window(v.image, model, window, threads), model.taxonomy, {});
    MaskSet gt;
    for (int cls : model.taxonomy.indices()) {
      Mask m(v.labels.dims(), v.labels.spacing(), 0);
      for (std::size_t i = 0; i < m.size(); ++i) m[i] = v.labels[i] == cls ? 1 : 0;
      gt.emplace(cls, std::move(m));
    }
    gt = apply_inclusion(std::move(gt), model.taxonomy);
    for (int cls : classes) sum[cls] += dice(pred.masks.at(cls), gt.at(cls));
  }
  for (auto& [cls, s] : sum) s /= static_cast<double>(volumes.size());
  return sum;
}

double ForgettingReport::old_mean_before() const {
  double s = 0.0;
  for (int cls : old_classes) s += row(cls).dice_before;
  return old_classes.empty() ? 0.0 : s / static_cast<double>(old_classes.size());
}

double ForgettingReport::old_mean_after() const {
  double s = 0.0;
  for (int cls : old_classes) s += row(cls).dice_after;
  return old_classes.empty() ? 0.0 : s / static_cast<double>(old_classes.size());
}

const ForgettingRow& ForgettingReport::row(int cls) const {
  for (const auto& r : rows)
    if (r.cls == cls) return r;
  throw Error(ErrorCode::InvalidArgument, "forgetting report has no row for class " + std::to_string(cls));
}

void write_forgetting_csv(const std::filesystem::path& path, const ForgettingReport& report) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out.precision(6);
  out << std::fixed << "class,dice_before,dice_after,delta\n";
  for (const auto& r : report.rows) out << r.cls << ',' << r.dice_before << ',' << r.dice_after << ',' << r.delta() << '\n';
}

ModelState restrict_classes(const ModelState& model, const std::vector<int>& classes) {
  ModelState out = model;
  out.taxonomy = model.taxonomy.subset(std::set<int>(classes.begin(), classes.end()));
  for (auto it = out.lpg.begin(); it != out.lpg.end();) {
    if (out.taxonomy.contains(it->first)) ++it;
    else it = out.lpg.erase(it);
  }
  for (auto it = out.optimizer.lpg.begin(); it != out.optimizer.lpg.end();) {
    if (out.taxonomy.contains(it->first)) ++it;
    else it = out.optimizer.lpg.erase(it);
  }
  return out;
}

ExtensionResult extension_stage(ModelState model, const std::vector<int>& old_classes,
                                const std::vector<Dataset>& data, const ExtensionConfig& cfg,
                                const std::vector<EvalVolume>& old_held_out,
                                const std::vector<EvalVolume>& new_held_out) {
  std::vector<int> fresh;
  for (int cls : model.classes())
    if (std::find(old_classes.begin(), old_classes.end(), cls) == old_classes.end()) fresh.push_back(cls);
  for (int cls : old_classes)
    if (!model.lpg.count(cls)) throw Error(ErrorCode::InvalidArgument, "old class " + std::to_string(cls) + " not in model");

  ExtensionResult result;
  result.report.old_classes = old_classes;
  const int threads = cfg.train.threads;
  const std::map<int, double> old_before =
      evaluate_dice(restrict_classes(model, old_classes), old_held_out, old_classes, cfg.window, threads);
  const std::map<int, double> new_before = evaluate_dice(model, new_held_out, fresh, cfg.window, threads);

  const ModelState snapshot = model;
  TrainOptions opt;
  opt.origin = model.global_step;
  if (cfg.freeze_old_heads) opt.frozen.insert(old_classes.begin(), old_classes.end());
  const std::vector<int> pseudo = cfg.pseudo_labels ? old_classes : std::vector<int>{};
  opt.targets = [&](const BatchItem& item, const Dataset& ds) {
    const ModelState& source = cfg.refresh_pseudo ? model : snapshot;
    return build_pseudo_targets(source, item.image.data, item.label.data, ds.space, pseudo, cfg.mode, &model.taxonomy);
  };
  result.history = train(model, data, cfg.train, opt);

  const std::map<int, double> old_after =
      evaluate_dice(restrict_classes(model, old_classes), old_held_out, old_classes, cfg.window, threads);
  const std::map<int, double> new_after = evaluate_dice(model, new_held_out, fresh, cfg.window, threads);
  for (int cls : old_classes) result.report.rows.push_back({cls, old_before.at(cls), old_after.at(cls)});
  for (int cls : fresh) result.report.rows.push_back({cls, new_before.at(cls), new_after.at(cls)});
  result.model = std::move(model);
  return result;
}

}  // namespace uniseg
