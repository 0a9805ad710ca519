// uniseg: phantom generation, training, class extension, inference,
// evaluation and one-hot embedding export.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error. Logs go to stderr,
// artifacts to --out.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "default_template.hpp"
#include "uniseg/continual.hpp"
#include "uniseg/inference.hpp"
#include "uniseg/manifest.hpp"
#include "uniseg/metrics.hpp"
#include "uniseg/phantom.hpp"
#include "uniseg/run_config.hpp"
#include "uniseg/training.hpp"

namespace fs = std::filesystem;
using namespace uniseg;

namespace {

/// Raised for bad flag combinations that CLI11 cannot express.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log(const std::string& msg) { std::cerr << "[uniseg] " << msg << '\n'; }

struct Common {
  int threads = 1;
  std::uint64_t seed = 0;
  std::string config;
  std::vector<std::string> sets;
  std::string out;
};

void add_config_flags(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "override one config key (key=value), repeatable");
  cmd->add_option("--threads", c.threads, "cap on worker threads")->check(CLI::PositiveNumber);
}

/// `base` (a checkpoint's echo) first, then the config file, then --set.
RunConfig build_config(const Common& c, const std::string& base = {}) {
  RunConfig cfg = base.empty() ? RunConfig{} : RunConfig::parse(base, "<checkpoint config>");
  if (!c.config.empty()) {
    const RunConfig file = RunConfig::load(c.config);
    for (const auto& [k, v] : file.values()) cfg.set(k, v);
  }
  for (const std::string& s : c.sets) cfg.set_assignment(s);
  return cfg;
}

Taxonomy template_or_default(const std::string& path) {
  return path.empty() ? parse_template(cli::kDefaultTemplate, "<built-in 32-class template>") : load_template(path);
}

fs::path make_out_dir(const std::string& out) {
  fs::create_directories(out);
  return fs::path(out);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::Io, "cannot write " + path.string());
  f << text;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// FNV-1a over the checkpoint file; recorded in prediction sidecars.
std::string file_hash(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::Io, "cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::istreambuf_iterator<char> it(f), end; it != end; ++it) {
    h ^= static_cast<unsigned char>(*it);
    h *= 0x100000001b3ULL;
  }
  return hex64(h);
}

std::string join(const std::vector<int>& v, const char* sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + std::to_string(v[i]);
  return s;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// Loss curve: one row per step, one column per class (blank when the class
/// was not annotated in that batch).
void write_loss_csv(const fs::path& path, const std::vector<StepMetrics>& history, const std::vector<int>& classes) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::Io, "cannot write " + path.string());
  f << "step,lr,loss";
  for (int c : classes) f << ",class_" << c;
  f << '\n';
  for (const StepMetrics& m : history) {
    f << m.step << ',' << fmt(m.lr) << ',' << fmt(m.loss);
    for (int c : classes) {
      f << ',';
      if (const auto it = m.class_loss.find(c); it != m.class_loss.end()) f << fmt(it->second);
    }
    f << '\n';
  }
}

std::function<void(const StepMetrics&)> progress(std::int64_t total) {
  const std::int64_t every = std::max<std::int64_t>(1, total / 20);
  return [every, total](const StepMetrics& m) {
    if ((m.step + 1) % every == 0 || m.step + 1 == total)
      log("step " + std::to_string(m.step + 1) + "/" + std::to_string(total) + " loss " + fmt(m.loss));
  };
}

/// Manifest volumes with complete ground truth, preprocessed for evaluation.
struct LabelledCase {
  std::string id;
  EvalVolume volume;
};

/// Label space covering every class present in a complete label map.
LabelSpace present_classes(const LabelMap& labels, const std::string& id) {
  LabelSpace space{id, {}};
  for (std::uint16_t v : labels.storage())
    if (v) space.classes.insert(v);
  return space;
}

std::vector<LabelledCase> labelled_cases(const Manifest& manifest) {
  std::vector<LabelledCase> out;
  for (const ManifestDataset& ds : manifest.datasets)
    for (const ManifestVolume& v : ds.volumes) {
      if (v.full_label.empty()) continue;
      const LabelMap full = read_labels(v.full_label);
      const TrainingVolume tv = preprocess(read_image(v.image), full, present_classes(full, "full"), kCanonicalSpacing);
      out.push_back({ds.space.dataset_id + "/" + v.image.stem().string(), EvalVolume{tv.image, tv.label.grid}});
    }
  return out;
}

// ---- phantom ----------------------------------------------------------------

struct PhantomArgs {
  Common common;
  std::string spec;
  std::string tmpl;
};

int run_phantom(const PhantomArgs& a) {
  const PhantomSpec spec = load_phantom_spec(a.spec);
  const Taxonomy tax = template_or_default(a.tmpl);
  spec.validate(&tax);
  const fs::path out = make_out_dir(a.common.out);
  const auto suite = generate_suite(spec, a.common.seed);
  const fs::path manifest = write_suite(out, suite);
  std::size_t volumes = 0;
  for (const auto& ds : suite) volumes += ds.cases.size();
  log("wrote " + std::to_string(volumes) + " volumes and " + manifest.string());
  return 0;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string manifest, embeddings, tmpl, resume;
  std::vector<std::string> datasets;
};

int run_train(const TrainArgs& a) {
  const RunConfig cfg = build_config(a.common);
  TrainConfig tc;
  ModelConfig mc;
  cfg.apply(tc);
  cfg.apply(mc);
  tc.seed = a.common.seed;
  tc.threads = a.common.threads;

  Manifest manifest = load_manifest(a.manifest);
  if (!a.datasets.empty()) {
    Manifest picked;
    for (const std::string& id : a.datasets) picked.datasets.push_back(manifest.dataset(id));
    manifest = std::move(picked);
  }
  std::set<int> classes;
  for (const auto& ds : manifest.datasets) classes.insert(ds.space.classes.begin(), ds.space.classes.end());
  const Taxonomy tax = template_or_default(a.tmpl).subset(classes);
  const auto data = load_datasets(manifest, tax);
  const std::string echo = cfg.echo() + "# seed " + std::to_string(a.common.seed) + "\n";

  ModelState model;
  if (a.resume.empty()) {
    model = ModelState::create(mc, tax, load_embeddings(a.embeddings), a.common.seed);
  } else {
    model = load_checkpoint(a.resume, &tax);
    log("resuming at step " + std::to_string(model.global_step));
  }
  model.config_echo = echo;

  const fs::path out = make_out_dir(a.common.out);
  write_text(out / "config.txt", echo);
  log("training " + std::to_string(model.parameter_count()) + " parameters on classes " + join(tax.indices(), ","));
  const auto t0 = std::chrono::steady_clock::now();
  TrainOptions opt;
  opt.on_step = progress(tc.total_steps());
  const auto history = train(model, data, tc, opt);
  log("trained in " + fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s");
  save_checkpoint(model, out / "final.uckpt");
  write_loss_csv(out / "loss.csv", history, tax.indices());
  return 0;
}

// ---- extend -----------------------------------------------------------------

struct ExtendArgs {
  Common common;
  std::string checkpoint, plan, manifest, eval_manifest;
};

int run_extend(const ExtendArgs& a) {
  const ModelState base = load_checkpoint(a.checkpoint);
  const RunConfig cfg = build_config(a.common, base.config_echo);
  ExtensionConfig ec;
  cfg.apply(ec);
  ec.train.seed = a.common.seed;
  ec.train.threads = a.common.threads;

  const ExtensionPlan plan = load_extension_plan(a.plan);
  Rng rng(a.common.seed);
  const ModelState extended = extend_model(base, plan, rng);
  const std::vector<int> old_classes = base.classes();
  std::set<int> fresh;
  for (const ClassDef& d : plan.new_classes) fresh.insert(d.index);

  // Only datasets that annotate nothing but new classes supervise the extension.
  const fs::path manifest_path = a.manifest.empty() ? plan.manifest : fs::path(a.manifest);
  if (manifest_path.empty()) throw UsageError("no manifest: give --manifest or a `manifest` line in the plan");
  const Manifest manifest = load_manifest(manifest_path);
  Manifest picked;
  for (const auto& ds : manifest.datasets)
    if (std::includes(fresh.begin(), fresh.end(), ds.space.classes.begin(), ds.space.classes.end()))
      picked.datasets.push_back(ds);
  if (picked.datasets.empty()) throw Error(ErrorCode::InvalidArgument, "no dataset in the manifest annotates only new classes");
  const auto data = load_datasets(picked, extended.taxonomy);

  const Manifest eval_manifest = a.eval_manifest.empty() ? manifest : load_manifest(a.eval_manifest);
  if (a.eval_manifest.empty()) log("no --eval-manifest: forgetting is scored on the extension manifest's full labels");
  std::vector<EvalVolume> held;
  for (auto& c : labelled_cases(eval_manifest)) held.push_back(std::move(c.volume));
  if (held.empty()) throw Error(ErrorCode::InvalidArgument, "forgetting report needs volumes with full labels");

  const fs::path out = make_out_dir(a.common.out);
  const std::string echo = cfg.echo() + "# seed " + std::to_string(a.common.seed) + "\n";
  write_text(out / "config.txt", echo);
  log("extending classes " + join(old_classes, ",") + " with " + join({fresh.begin(), fresh.end()}, ","));
  ExtensionResult r = extension_stage(extended, old_classes, data, ec, held, held);
  r.model.config_echo = echo;
  save_checkpoint(r.model, out / "final.uckpt");
  write_forgetting_csv(out / "forgetting.csv", r.report);
  write_loss_csv(out / "loss.csv", r.history, r.model.classes());
  log("old-class mean dice " + fmt(r.report.old_mean_before()) + " -> " + fmt(r.report.old_mean_after()));
  return 0;
}

// ---- infer ------------------------------------------------------------------

struct InferArgs {
  Common common;
  std::string checkpoint, image, postprocess;
  bool probs = false;
};

PostprocessConfig postprocess_or_default(const std::string& path) {
  return path.empty() ? PostprocessConfig{} : load_postprocess(path);
}

int run_infer(const InferArgs& a) {
  const ModelState model = load_checkpoint(a.checkpoint);
  const RunConfig cfg = build_config(a.common, model.config_echo);
  WindowSpec w;
  cfg.apply(w);
  const PostprocessConfig pp = postprocess_or_default(a.postprocess);
  const Image raw = read_image(a.image);
  const Image x = preprocess(raw, LabelMap(raw.dims(), raw.spacing()), LabelSpace{}, kCanonicalSpacing).image;
  const PredictionSet pred = predict_volume(x, model, w, pp, a.common.threads);
  const fs::path out = make_out_dir(a.common.out);
  write_prediction(out, pred, w, pp, file_hash(a.checkpoint), a.probs);
  log("wrote predictions for classes " + join(model.classes(), ",") + " to " + out.string());
  return 0;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string checkpoint, manifest, postprocess;
};

int run_eval(const EvalArgs& a) {
  const ModelState model = load_checkpoint(a.checkpoint);
  const RunConfig cfg = build_config(a.common, model.config_echo);
  WindowSpec w;
  DetectionRule rule;
  cfg.apply(w);
  cfg.apply(rule);
  const double tau = cfg.nsd_tolerance(1.0);
  const PostprocessConfig pp = postprocess_or_default(a.postprocess);
  const std::vector<int> classes = model.classes();
  const auto cases = labelled_cases(load_manifest(a.manifest));
  if (cases.empty()) throw Error(ErrorCode::InvalidArgument, "no manifest volume has full labels");

  const fs::path out = make_out_dir(a.common.out);
  std::ofstream metrics(out / "metrics.csv");
  metrics << "case,class,dice,nsd\n";
  std::map<int, double> dice_sum, nsd_sum;
  std::map<int, std::vector<DetectionCase>> detection;
  for (const LabelledCase& c : cases) {
    const PredictionSet pred = predict_volume(c.volume.image, model, w, pp, a.common.threads);
    // Absent classes join the space so their ground truth is an empty mask.
    LabelVolume full{c.volume.labels, present_classes(c.volume.labels, c.id)};
    full.space.classes.insert(classes.begin(), classes.end());
    MaskSet truth;
    for (int cls : classes) truth.emplace(cls, binarize(full, cls));
    truth = apply_inclusion(std::move(truth), model.taxonomy);
    for (int cls : classes) {
      const Mask& p = pred.masks.at(cls);
      const Mask& g = truth.at(cls);
      const double d = dice(p, g), s = nsd(p, g, tau);
      dice_sum[cls] += d;
      nsd_sum[cls] += s;
      metrics << c.id << ',' << cls << ',' << fmt(d) << ',' << fmt(s) << '\n';
      if (model.taxonomy.at(cls).kind == ClassKind::Tumor)
        detection[cls].push_back(DetectionCase::from_mask(p, count_nonzero(g) > 0));
    }
    log("evaluated " + c.id);
  }
  const double n = static_cast<double>(cases.size());
  for (int cls : classes) metrics << "mean," << cls << ',' << fmt(dice_sum[cls] / n) << ',' << fmt(nsd_sum[cls] / n) << '\n';

  std::ofstream det(out / "detection.csv");
  det << "class,tp,fn,tn,fp,sensitivity,specificity,harmonic\n";
  for (const auto& [cls, list] : detection) {
    try {
      const DetectionStats s = detection_stats(list, rule);
      det << cls << ',' << s.tp << ',' << s.fn << ',' << s.tn << ',' << s.fp << ',' << fmt(s.sensitivity) << ','
          << fmt(s.specificity) << ',' << fmt(s.harmonic) << '\n';
    } catch (const Error& e) {
      if (e.code() != ErrorCode::InsufficientCases) throw;
      log("class " + std::to_string(cls) + ": detection rates undefined (" + e.what() + ")");
    }
  }
  log("wrote " + (out / "metrics.csv").string() + " and " + (out / "detection.csv").string());
  return 0;
}

// ---- embed-onehot -----------------------------------------------------------

struct EmbedArgs {
  std::string out, classes, tmpl;
};

int run_embed_onehot(const EmbedArgs& a) {
  std::vector<int> classes;
  if (!a.classes.empty()) {
    std::stringstream ss(a.classes);
    for (std::string tok; std::getline(ss, tok, ',');) {
      try {
        classes.push_back(std::stoi(tok));
      } catch (const std::exception&) {
        throw UsageError("--classes expects comma-separated integers, got '" + tok + "'");
      }
    }
  } else {
    classes = template_or_default(a.tmpl).indices();
  }
  save_embeddings(a.out, EmbeddingStore::one_hot(classes));
  log("wrote " + std::to_string(classes.size()) + " one-hot embeddings to " + a.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Universal partial-label segmentation: phantoms, training, extension, inference, evaluation"};
  app.require_subcommand(1);

  PhantomArgs ph;
  auto* phantom = app.add_subcommand("phantom", "generate a phantom suite and its manifest");
  phantom->add_option("--spec", ph.spec, "phantom spec (UPHAN1)")->required()->check(CLI::ExistingFile);
  phantom->add_option("--out", ph.common.out, "output directory")->required();
  phantom->add_option("--seed", ph.common.seed, "suite seed")->required();
  phantom->add_option("--template", ph.tmpl, "class template (default: built-in 32 classes)")->check(CLI::ExistingFile);

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "train a model on a manifest");
  train_cmd->add_option("--manifest", tr.manifest, "dataset manifest (UMAN1)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--embeddings", tr.embeddings, "class embeddings (UEMB1)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", tr.common.out, "output directory")->required();
  train_cmd->add_option("--seed", tr.common.seed, "model and sampling seed")->required();
  train_cmd->add_option("--template", tr.tmpl, "class template (default: built-in 32 classes)")->check(CLI::ExistingFile);
  train_cmd->add_option("--dataset", tr.datasets, "train only on this manifest dataset, repeatable");
  train_cmd->add_option("--resume", tr.resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  add_config_flags(train_cmd, tr.common);

  ExtendArgs ex;
  auto* extend = app.add_subcommand("extend", "add classes to a trained model");
  extend->add_option("--checkpoint", ex.checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  extend->add_option("--plan", ex.plan, "extension plan (UPLAN1)")->required()->check(CLI::ExistingFile);
  extend->add_option("--out", ex.common.out, "output directory")->required();
  extend->add_option("--seed", ex.common.seed, "seed for new heads")->required();
  extend->add_option("--manifest", ex.manifest, "overrides the plan's manifest")->check(CLI::ExistingFile);
  extend->add_option("--eval-manifest", ex.eval_manifest, "held-out volumes with full labels")->check(CLI::ExistingFile);
  add_config_flags(extend, ex.common);

  InferArgs in;
  auto* infer = app.add_subcommand("infer", "segment one volume");
  infer->add_option("--checkpoint", in.checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--image", in.image, "input volume (UVOL1, HU)")->required()->check(CLI::ExistingFile);
  infer->add_option("--out", in.common.out, "output directory")->required();
  infer->add_option("--postprocess", in.postprocess, "post-processing config (UPOST1)")->check(CLI::ExistingFile);
  infer->add_flag("--probs", in.probs, "also write per-class probability volumes");
  add_config_flags(infer, in.common);

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "score a checkpoint on labelled volumes");
  eval->add_option("--checkpoint", ev.checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", ev.manifest, "manifest with full labels")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", ev.common.out, "output directory")->required();
  eval->add_option("--postprocess", ev.postprocess, "post-processing config (UPOST1)")->check(CLI::ExistingFile);
  add_config_flags(eval, ev.common);

  EmbedArgs em;
  auto* embed = app.add_subcommand("embed-onehot", "write identity embeddings");
  embed->add_option("--out", em.out, "output file (UEMB1)")->required();
  auto* cls_opt = embed->add_option("--classes", em.classes, "comma-separated class indices");
  embed->add_option("--template", em.tmpl, "take the classes from this template")
      ->check(CLI::ExistingFile)
      ->excludes(cls_opt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*phantom) return run_phantom(ph);
    if (*train_cmd) return run_train(tr);
    if (*extend) return run_extend(ex);
    if (*infer) return run_infer(in);
    if (*eval) return run_eval(ev);
    if (*embed) return run_embed_onehot(em);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == ErrorCode::UnknownConfigKey ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
