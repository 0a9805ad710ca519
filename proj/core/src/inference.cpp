#include "uniseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "uniseg/parallel.hpp"

namespace uniseg {

void WindowSpec::validate() const {
  if (window < 1) throw Error(ErrorCode::InvalidArgument, "window must be >= 1");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw Error(ErrorCode::InvalidArgument, "overlap must be in [0, 1)");
  if (!(sigma_fraction > 0.0)) throw Error(ErrorCode::InvalidArgument, "sigma_fraction must be > 0");
}

int WindowSpec::stride() const {
  return std::max(1, static_cast<int>(std::floor(window * (1.0 - overlap))));
}

std::vector<double> gaussian_profile(int n, double sigma_fraction) {
  std::vector<double> g(n);
  const double sigma = sigma_fraction * n;
  const double c = (n - 1) / 2.0;
  for (int i = 0; i < n; ++i) {
    const double t = (i - c) / sigma;
    g[i] = std::exp(-0.5 * t * t);
  }
  return g;
}

std::vector<int> window_starts(int extent, int window, int stride) {
  std::vector<int> starts;
  for (int s = 0;; s += stride) {
    if (s + window >= extent) {
      starts.push_back(std::max(0, extent - window));
      break;
    }
    starts.push_back(s);
  }
  return starts;
}

namespace {

int reflect(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

}  // namespace

std::map<int, ProbMap> sliding_window(const Image& x, const PatchPredictor& predict, const WindowSpec& spec,
                                      int threads) {
  spec.validate();
  const int w = spec.window;
  const Dims in = x.dims();
  std::array<int, 3> pad_before{}, padded{};
  for (int a = 0; a < 3; ++a) {
    const int n = in[a];
    if (n >= w) {
      padded[a] = n;
      continue;
    }
    const int before = (w - n) / 2;
    const int after = w - n - before;
    if (after > n - 1) {
      throw Error(ErrorCode::WindowTooLarge, "window " + std::to_string(w) + " exceeds the reflect-padded extent of axis " +
                                                 std::to_string(a) + " (" + std::to_string(n) + " voxels)");
    }
    pad_before[a] = before;
    padded[a] = w;
  }

  const int stride = spec.stride();
  const std::vector<int> sz = window_starts(padded[0], w, stride);
  const std::vector<int> sy = window_starts(padded[1], w, stride);
  const std::vector<int> sx = window_starts(padded[2], w, stride);
  std::vector<std::array<int, 3>> origins;
  for (int z : sz)
    for (int y : sy)
      for (int xx : sx) origins.push_back({z, y, xx});

  const std::vector<double> g = gaussian_profile(w, spec.sigma_fraction);
  const Dims pdims{padded[0], padded[1], padded[2]};
  Grid<double> acc(pdims, x.spacing(), 0.0);
  std::map<int, Grid<double>> mean;

  const auto crop = [&](const std::array<int, 3>& o) {
    Image patch(Dims{w, w, w}, x.spacing());
    for (int z = 0; z < w; ++z)
      for (int y = 0; y < w; ++y)
        for (int xx = 0; xx < w; ++xx) {
          patch(z, y, xx) = x(reflect(o[0] + z - pad_before[0], in.d), reflect(o[1] + y - pad_before[1], in.h),
                              reflect(o[2] + xx - pad_before[2], in.w));
        }
    return patch;
  };

  // Chunks bound memory; accumulation order is the window order regardless.
  const std::size_t chunk = static_cast<std::size_t>(std::max(1, threads)) * 2;
  for (std::size_t c0 = 0; c0 < origins.size(); c0 += chunk) {
    const std::size_t n = std::min(chunk, origins.size() - c0);
    std::vector<std::map<int, ProbMap>> preds(n);
    parallel_for(n, threads, [&](std::size_t k) { preds[k] = predict(crop(origins[c0 + k])); });

    for (std::size_t k = 0; k < n; ++k) {
      auto& pm = preds[k];
      if (pm.empty()) throw Error(ErrorCode::InvalidArgument, "predictor returned no classes");
      if (mean.empty()) {
        for (const auto& [cls, p] : pm) mean.emplace(cls, Grid<double>(pdims, x.spacing(), 0.0));
      }
      if (pm.size() != mean.size()) throw Error(ErrorCode::InvalidArgument, "predictor class set changed between windows");
      std::vector<const ProbMap*> ps;
      std::vector<Grid<double>*> ms;
      for (auto& [cls, m] : mean) {
        auto it = pm.find(cls);
        if (it == pm.end()) throw Error(ErrorCode::InvalidArgument, "predictor class set changed between windows");
        if (it->second.dims() != Dims{w, w, w}) throw Error(ErrorCode::ShapeMismatch, "predictor output is not window-sized");
        ps.push_back(&it->second);
        ms.push_back(&m);
      }
      const auto& o = origins[c0 + k];
      for (int z = 0; z < w; ++z)
        for (int y = 0; y < w; ++y)
          for (int xx = 0; xx < w; ++xx) {
            const double gw = g[z] * g[y] * g[xx];
            const std::size_t i = acc.index(o[0] + z, o[1] + y, o[2] + xx);
            const std::size_t j = ps[0]->index(z, y, xx);
            const double total = acc[i] + gw;
            const double r = gw / total;
            // running weighted mean: exact for constant inputs
            for (std::size_t c = 0; c < ps.size(); ++c) {
              double& mv = (*ms[c])[i];
              mv += r * ((*ps[c])[j] - mv);
            }
            acc[i] = total;
          }
    }
  }

  std::map<int, ProbMap> out;
  for (auto& [cls, m] : mean) {
    ProbMap p(in, x.spacing());
    for (int z = 0; z < in.d; ++z)
      for (int y = 0; y < in.h; ++y)
        for (int xx = 0; xx < in.w; ++xx) p(z, y, xx) = m(z + pad_before[0], y + pad_before[1], xx + pad_before[2]);
    out.emplace(cls, std::move(p));
  }
  return out;
}

std::map<int, ProbMap> sliding_window(const Image& x, const ModelState& model, const WindowSpec& spec, int threads,
                                      const std::vector<int>& classes) {
  return sliding_window(
      x, [&](const Image& patch) { return predict_patch(model, patch, classes); }, spec, threads);
}

Mask largest_component(const Mask& mask) {
  const Dims d = mask.dims();
  std::vector<std::int32_t> label(mask.size(), -1);
  std::vector<std::size_t> sizes;
  std::deque<std::size_t> queue;
  for (std::size_t seed = 0; seed < mask.size(); ++seed) {
    if (!mask[seed] || label[seed] >= 0) continue;
    const auto id = static_cast<std::int32_t>(sizes.size());
    std::size_t count = 0;
    label[seed] = id;
    queue.push_back(seed);
    while (!queue.empty()) {
      const std::size_t v = queue.front();
      queue.pop_front();
      ++count;
      const auto [z, y, x] = mask.coord(v);
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int nz = z + dz, ny = y + dy, nx = x + dx;
            if (nz < 0 || ny < 0 || nx < 0 || nz >= d.d || ny >= d.h || nx >= d.w) continue;
            const std::size_t u = mask.index(nz, ny, nx);
            if (mask[u] && label[u] < 0) {
              label[u] = id;
              queue.push_back(u);
            }
          }
    }
    sizes.push_back(count);
  }
  Mask out(d, mask.spacing(), 0);
  if (sizes.empty()) return out;
  std::int32_t best = 0;
  for (std::size_t k = 1; k < sizes.size(); ++k)
    if (sizes[k] > sizes[best]) best = static_cast<std::int32_t>(k);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = label[i] == best ? 1 : 0;
  return out;
}

Mask restrict_region(const Mask& mask, const Mask& region) {
  require_same_shape(mask, region, "restrict_region: mask and region shapes differ");
  Mask out(mask.dims(), mask.spacing(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (mask[i] && region[i]) ? 1 : 0;
  return out;
}

LabelMap merge(const std::map<int, Mask>& masks, const std::map<int, ProbMap>& probs, const Taxonomy& taxonomy) {
  if (masks.empty()) throw Error(ErrorCode::InvalidArgument, "merge: no masks");
  const Mask& first = masks.begin()->second;
  std::map<int, std::vector<int>> tiers;  // tier -> classes, ascending index
  for (const auto& [cls, m] : masks) {
    if (!taxonomy.contains(cls)) throw Error(ErrorCode::InvalidArgument, "merge: class " + std::to_string(cls) + " not in taxonomy");
    require_same_shape(m, first, "merge: mask shapes differ");
    auto it = probs.find(cls);
    if (it == probs.end()) throw Error(ErrorCode::InvalidArgument, "merge: no probability map for class " + std::to_string(cls));
    require_same_shape(it->second, first, "merge: probability shape differs");
    tiers[taxonomy.at(cls).merge_tier].push_back(cls);
  }
  LabelMap out(first.dims(), first.spacing(), 0);
  for (const auto& [tier, classes] : tiers) {
    std::vector<const Mask*> ms;
    std::vector<const ProbMap*> ps;
    for (int cls : classes) {
      ms.push_back(&masks.at(cls));
      ps.push_back(&probs.at(cls));
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      int winner = -1;
      double best = 0.0;
      for (std::size_t k = 0; k < classes.size(); ++k) {
        if (!(*ms[k])[i]) continue;
        const double p = (*ps[k])[i];
        if (winner < 0 || p > best) {
          winner = static_cast<int>(k);
          best = p;
        }
      }
      if (winner >= 0) out[i] = static_cast<std::uint16_t>(classes[winner]);
    }
  }
  return out;
}

Mask Box::to_mask(Dims dims, Spacing spacing) const {
  Mask m(dims, spacing, 0);
  for (int z = std::max(0, lo[0]); z < std::min(dims.d, hi[0]); ++z)
    for (int y = std::max(0, lo[1]); y < std::min(dims.h, hi[1]); ++y)
      for (int x = std::max(0, lo[2]); x < std::min(dims.w, hi[2]); ++x) m(z, y, x) = 1;
  return m;
}

const ClassPostprocess& PostprocessConfig::get(int cls) const {
  static const ClassPostprocess kNone{};
  auto it = classes.find(cls);
  return it == classes.end() ? kNone : it->second;
}

PostprocessConfig parse_postprocess(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool header = false;
  PostprocessConfig cfg;
  const auto fail = [&](const std::string& msg) {
    throw Error(ErrorCode::Parse, source + ":" + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    std::istringstream ls(line);
    std::string tok;
    if (!(ls >> tok)) continue;
    if (!header) {
      if (tok != "UPOST1") fail("expected header UPOST1");
      header = true;
      continue;
    }
    if (tok == "threshold") {
      if (!(ls >> cfg.threshold) || !(cfg.threshold > 0.0 && cfg.threshold < 1.0)) fail("threshold must be in (0,1)");
      continue;
    }
    int cls = 0;
    try {
      std::size_t used = 0;
      cls = std::stoi(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      fail("expected a class index or 'threshold', got '" + tok + "'");
    }
    if (cls < 1) fail("class index must be >= 1");
    ClassPostprocess cp;
    while (ls >> tok) {
      if (tok == "lcc") {
        cp.largest_component = true;
      } else if (tok == "lateral") {
        cp.lateral = true;
      } else if (tok == "region") {
        Box b;
        if (!(ls >> b.lo[0] >> b.lo[1] >> b.lo[2] >> b.hi[0] >> b.hi[1] >> b.hi[2])) fail("region needs 6 integers");
        for (int a = 0; a < 3; ++a)
          if (b.hi[a] <= b.lo[a]) fail("region box is empty");
        cp.region = b;
      } else {
        fail("unknown flag '" + tok + "'");
      }
    }
    if (!cfg.classes.emplace(cls, cp).second) fail("class " + std::to_string(cls) + " listed twice");
  }
  if (!header) throw Error(ErrorCode::Parse, source + ": empty post-processing config");
  return cfg;
}

PostprocessConfig load_postprocess(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_postprocess(ss.str(), path.string());
}

std::string serialize_postprocess(const PostprocessConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "UPOST1\nthreshold " << cfg.threshold << '\n';
  for (const auto& [cls, cp] : cfg.classes) {
    os << cls;
    if (cp.largest_component) os << " lcc";
    if (cp.lateral) os << " lateral";
    if (cp.region) {
      const Box& b = *cp.region;
      os << " region " << b.lo[0] << ' ' << b.lo[1] << ' ' << b.lo[2] << ' ' << b.hi[0] << ' ' << b.hi[1] << ' '
         << b.hi[2];
    }
    os << '\n';
  }
  return os.str();
}

PredictionSet postprocess(std::map<int, ProbMap> probs, const Taxonomy& taxonomy, const PostprocessConfig& cfg) {
  PredictionSet out;
  MaskSet masks;
  for (const auto& [cls, p] : probs) {
    Mask m(p.dims(), p.spacing(), 0);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = p[i] > cfg.threshold ? 1 : 0;
    masks.emplace(cls, std::move(m));
  }
  masks = apply_inclusion(std::move(masks), taxonomy);
  for (auto& [cls, m] : masks) {
    const ClassPostprocess& cp = cfg.get(cls);
    if (cp.lateral && taxonomy.contains(cls)) {
      const Laterality side = taxonomy.at(cls).laterality;
      if (side != Laterality::None) {
        SideMasks sm = split_laterality(m, SagittalPlane::mid_sagittal(m.dims()));
        m = side == Laterality::Left ? std::move(sm.left) : std::move(sm.right);
      }
    }
    if (cp.largest_component) m = largest_component(m);
    if (cp.region) m = restrict_region(m, cp.region->to_mask(m.dims(), m.spacing()));
  }
  for (const auto& [cls, m] : masks) {
    if (!probs.count(cls)) probs.emplace(cls, ProbMap(m.dims(), m.spacing(), 0.0));
  }
  out.merged = merge(masks, probs, taxonomy);
  out.masks = std::move(masks);
  out.probs = std::move(probs);
  return out;
}

PredictionSet predict_volume(const Image& x, const ModelState& model, const WindowSpec& spec,
                             const PostprocessConfig& cfg, int threads) {
  return postprocess(sliding_window(x, model, spec, threads), model.taxonomy, cfg);
}

void write_prediction(const std::filesystem::path& dir, const PredictionSet& pred, const WindowSpec& spec,
                      const PostprocessConfig& cfg, const std::string& checkpoint_hash, bool with_probs) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["window"] = {{"size", spec.window}, {"overlap", spec.overlap}, {"sigma_fraction", spec.sigma_fraction}};
  j["threshold"] = cfg.threshold;
  j["checkpoint_hash"] = checkpoint_hash;
  nlohmann::ordered_json classes = nlohmann::ordered_json::array();
  for (const auto& [cls, m] : pred.masks) {
    const std::string mask_name = "class_" + std::to_string(cls) + ".uvol";
    write_volume(dir / mask_name, m);
    const ClassPostprocess& cp = cfg.get(cls);
    nlohmann::ordered_json c;
    c["class"] = cls;
    c["mask"] = mask_name;
    c["voxels"] = count_nonzero(m);
    if (with_probs && pred.probs.count(cls)) {
      const std::string prob_name = "prob_" + std::to_string(cls) + ".uvol";
      write_volume(dir / prob_name, pred.probs.at(cls));
      c["probability"] = prob_name;
    }
    c["postprocess"] = {{"lateral", cp.lateral}, {"largest_component", cp.largest_component}};
    if (cp.region) {
      const Box& b = *cp.region;
      c["postprocess"]["region"] = {b.lo[0], b.lo[1], b.lo[2], b.hi[0], b.hi[1], b.hi[2]};
    }
    classes.push_back(std::move(c));
  }
  j["classes"] = std::move(classes);
  j["merged"] = "merged.uvol";
  write_volume(dir / "merged.uvol", pred.merged);
  std::ofstream out(dir / "prediction.json");
  if (!out) throw Error(ErrorCode::Io, "cannot write " + (dir / "prediction.json").string());
  out << j.dump(2) << '\n';
}

}  // namespace uniseg
