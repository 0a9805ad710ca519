#include "uniseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace uniseg {

bool EllipsoidSpec::inside(double z, double y, double x) const {
  const double a = (z - center[0]) / radii[0];
  const double b = (y - center[1]) / radii[1];
  const double c = (x - center[2]) / radii[2];
  return a * a + b * b + c * c <= 1.0;
}

bool VesselSpec::inside(double z, double y, double x) const {
  const double d[3] = {b[0] - a[0], b[1] - a[1], b[2] - a[2]};
  const double p[3] = {z - a[0], y - a[1], x - a[2]};
  const double len2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
  double t = len2 > 0.0 ? (p[0] * d[0] + p[1] * d[1] + p[2] * d[2]) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double q[3] = {p[0] - t * d[0], p[1] - t * d[1], p[2] - t * d[2]};
  return q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= radius * radius;
}

namespace {

void check_hu(double hu, const std::string& what) {
  if (!(hu >= kHuLow && hu <= kHuHigh)) {
    throw Error(ErrorCode::InvalidArgument, what + " intensity " + std::to_string(hu) + " outside [-175, 250]");
  }
}

}  // namespace

void PhantomSpec::validate(const Taxonomy* taxonomy) const {
  if (dims.d < 1 || dims.h < 1 || dims.w < 1) throw Error(ErrorCode::InvalidArgument, "phantom grid must be >= 1");
  if (!(spacing.z > 0 && spacing.y > 0 && spacing.x > 0)) throw Error(ErrorCode::InvalidArgument, "spacing must be > 0");
  if (!(noise >= 0.0)) throw Error(ErrorCode::InvalidArgument, "noise must be >= 0");
  if (!(jitter >= 0.0) || !(scale_jitter >= 0.0 && scale_jitter < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "jitter must be >= 0 and scale jitter in [0, 1)");
  }
  check_hu(background, "background");
  if (body) check_hu(body->hu, "body");
  std::set<int> seen;
  const auto add = [&](int cls) {
    if (cls < 1) throw Error(ErrorCode::InvalidArgument, "phantom class index must be >= 1");
    if (!seen.insert(cls).second) throw Error(ErrorCode::DuplicateIndex, "phantom class " + std::to_string(cls) + " listed twice");
    if (taxonomy && !taxonomy->contains(cls)) {
      throw Error(ErrorCode::InvalidArgument, "phantom class " + std::to_string(cls) + " not in taxonomy");
    }
  };
  std::set<int> organ_ids;
  for (const auto& o : organs) {
    add(o.cls);
    check_hu(o.hu, "organ");
    for (double r : o.radii)
      if (!(r > 0)) throw Error(ErrorCode::InvalidArgument, "organ radii must be > 0");
    organ_ids.insert(o.cls);
  }
  for (const auto& v : vessels) {
    add(v.cls);
    check_hu(v.hu, "vessel");
    if (!(v.radius > 0)) throw Error(ErrorCode::InvalidArgument, "vessel radius must be > 0");
  }
  for (const auto& t : tumors) {
    add(t.cls);
    check_hu(t.hu, "tumor");
    if (!(t.radius > 0)) throw Error(ErrorCode::InvalidArgument, "tumor radius must be > 0");
    if (!organ_ids.count(t.parent)) {
      throw Error(ErrorCode::InvalidArgument, "tumor " + std::to_string(t.cls) + " parent " + std::to_string(t.parent) +
                                                  " is not a phantom organ");
    }
  }
  std::set<std::string> ids;
  for (const auto& ds : datasets) {
    if (!ids.insert(ds.id).second) throw Error(ErrorCode::InvalidArgument, "dataset '" + ds.id + "' listed twice");
    if (ds.volumes < 1) throw Error(ErrorCode::InvalidArgument, "dataset '" + ds.id + "' needs >= 1 volume");
    if (!(ds.tumor_rate >= 0.0 && ds.tumor_rate <= 1.0)) throw Error(ErrorCode::InvalidArgument, "tumor_rate must be in [0,1]");
    if (ds.classes.empty()) throw Error(ErrorCode::EmptyLabelSpace, "dataset '" + ds.id + "' annotates no class");
    for (int c : ds.classes)
      if (!seen.count(c)) {
        throw Error(ErrorCode::InvalidArgument, "dataset '" + ds.id + "' class " + std::to_string(c) + " is not generated");
      }
  }
}

std::vector<int> PhantomSpec::classes() const {
  std::vector<int> out;
  for (const auto& o : organs) out.push_back(o.cls);
  for (const auto& v : vessels) out.push_back(v.cls);
  for (const auto& t : tumors) out.push_back(t.cls);
  std::sort(out.begin(), out.end());
  return out;
}

PhantomSpec parse_phantom_spec(const std::string& text, const std::string& source) {
  PhantomSpec spec;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool header = false;
  const auto fail = [&](const std::string& msg) {
    throw Error(ErrorCode::Parse, source + ":" + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (!header) {
      if (key != "UPHAN1") fail("expected header UPHAN1");
      header = true;
      continue;
    }
    bool ok = true;
    if (key == "grid") {
      ok = static_cast<bool>(ls >> spec.dims.d >> spec.dims.h >> spec.dims.w);
    } else if (key == "spacing") {
      ok = static_cast<bool>(ls >> spec.spacing.z >> spec.spacing.y >> spec.spacing.x);
    } else if (key == "noise") {
      ok = static_cast<bool>(ls >> spec.noise);
    } else if (key == "background") {
      ok = static_cast<bool>(ls >> spec.background);
    } else if (key == "body") {
      EllipsoidSpec e;
      ok = static_cast<bool>(ls >> e.hu >> e.center[0] >> e.center[1] >> e.center[2] >> e.radii[0] >> e.radii[1] >>
                             e.radii[2]);
      spec.body = e;
    } else if (key == "organ") {
      EllipsoidSpec e;
      ok = static_cast<bool>(ls >> e.cls >> e.hu >> e.center[0] >> e.center[1] >> e.center[2] >> e.radii[0] >>
                             e.radii[1] >> e.radii[2]);
      spec.organs.push_back(e);
    } else if (key == "vessel") {
      VesselSpec v;
      ok = static_cast<bool>(ls >> v.cls >> v.hu >> v.radius >> v.a[0] >> v.a[1] >> v.a[2] >> v.b[0] >> v.b[1] >> v.b[2]);
      spec.vessels.push_back(v);
    } else if (key == "tumor") {
      TumorSpec t;
      ok = static_cast<bool>(ls >> t.cls >> t.parent >> t.hu >> t.radius);
      spec.tumors.push_back(t);
    } else if (key == "jitter") {
      ok = static_cast<bool>(ls >> spec.jitter >> spec.scale_jitter);
    } else if (key == "overlap_tolerance") {
      ok = static_cast<bool>(ls >> spec.overlap_tolerance);
    } else if (key == "dataset") {
      PhantomDatasetSpec ds;
      if (!(ls >> ds.id)) fail("dataset needs an id");
      std::string word;
      bool classes = false;
      while (ls >> word) {
        if (word == "volumes") {
          if (!(ls >> ds.volumes)) fail("volumes needs a count");
        } else if (word == "tumor_rate") {
          if (!(ls >> ds.tumor_rate)) fail("tumor_rate needs a value");
        } else if (word == "classes") {
          classes = true;
          int c = 0;
          while (ls >> c) ds.classes.insert(c);
          if (!ls.eof()) fail("bad class list");
        } else {
          fail("unknown dataset field '" + word + "'");
        }
      }
      if (!classes) fail("dataset needs a class list");
      spec.datasets.push_back(ds);
      continue;
    } else {
      fail("unknown directive '" + key + "'");
    }
    std::string extra;
    if (!ok) fail("malformed '" + key + "' line");
    if (ls >> extra) fail("trailing token '" + extra + "'");
  }
  if (!header) throw Error(ErrorCode::Parse, source + ": empty phantom spec");
  spec.validate();
  return spec;
}

PhantomSpec load_phantom_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_phantom_spec(ss.str(), path.string());
}

PhantomCase generate_case(const PhantomSpec& spec, Rng& rng, bool tumors) {
  const Dims d = spec.dims;
  PhantomCase out;
  out.image = Image(d, spec.spacing, spec.background);
  out.labels = LabelMap(d, spec.spacing, 0);
  out.has_tumor = tumors && !spec.tumors.empty();

  // geometry draws come first, in spec order
  std::vector<EllipsoidSpec> organs = spec.organs;
  for (auto& o : organs) {
    for (auto& c : o.center) c += uniform(rng, -spec.jitter, spec.jitter);
    for (auto& r : o.radii) r *= 1.0 + uniform(rng, -spec.scale_jitter, spec.scale_jitter);
  }
  std::vector<VesselSpec> vessels = spec.vessels;
  for (auto& v : vessels) {
    for (int a = 0; a < 3; ++a) {
      const double s = uniform(rng, -spec.jitter, spec.jitter);
      v.a[a] += s;
      v.b[a] += s;
    }
  }

  if (spec.body) {
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x)
          if (spec.body->inside(z, y, x)) out.image(z, y, x) = spec.body->hu;
  }

  std::vector<std::uint32_t> owners(out.labels.size(), 0);
  for (const auto& o : organs) {
    std::size_t clash = 0;
    int clash_with = 0;
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) {
          if (!o.inside(z, y, x)) continue;
          const std::size_t i = out.labels.index(z, y, x);
          if (out.labels[i] != 0) {
            ++clash;
            clash_with = out.labels[i];
          }
          out.labels[i] = static_cast<std::uint16_t>(o.cls);
          out.image[i] = o.hu;
        }
    if (clash > spec.overlap_tolerance) {
      throw Error(ErrorCode::SpecOverlap, "organs " + std::to_string(clash_with) + " and " + std::to_string(o.cls) +
                                              " overlap in " + std::to_string(clash) + " voxels");
    }
  }
  const LabelMap organ_labels = out.labels;
  for (const auto& v : vessels) {
    std::size_t clash = 0;
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) {
          if (!v.inside(z, y, x)) continue;
          const std::size_t i = out.labels.index(z, y, x);
          if (out.labels[i] != organ_labels[i]) ++clash;  // another vessel got here first
          out.labels[i] = static_cast<std::uint16_t>(v.cls);
          out.image[i] = v.hu;
        }
    if (clash > spec.overlap_tolerance) {
      throw Error(ErrorCode::SpecOverlap, "vessel " + std::to_string(v.cls) + " overlaps another vessel in " +
                                              std::to_string(clash) + " voxels");
    }
  }

  if (out.has_tumor) {
    for (const auto& t : spec.tumors) {
      const auto parent = std::find_if(organs.begin(), organs.end(), [&](const auto& o) { return o.cls == t.parent; });
      const EllipsoidSpec& p = *parent;
      const double r = t.radius * (1.0 + uniform(rng, -spec.scale_jitter, spec.scale_jitter));
      const int reach = static_cast<int>(std::ceil(r));
      bool placed = false;
      for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
        std::array<double, 3> c{};
        for (int a = 0; a < 3; ++a) c[a] = p.center[a] + uniform(rng, -p.radii[a], p.radii[a]);
        // every sphere voxel must currently belong to the parent
        bool fits = true;
        std::vector<std::size_t> voxels;
        for (int z = static_cast<int>(std::floor(c[0])) - reach; z <= static_cast<int>(std::ceil(c[0])) + reach && fits; ++z)
          for (int y = static_cast<int>(std::floor(c[1])) - reach; y <= static_cast<int>(std::ceil(c[1])) + reach && fits; ++y)
            for (int x = static_cast<int>(std::floor(c[2])) - reach; x <= static_cast<int>(std::ceil(c[2])) + reach; ++x) {
              const double dz = z - c[0], dy = y - c[1], dx = x - c[2];
              if (dz * dz + dy * dy + dx * dx > r * r) continue;
              if (!out.labels.contains(z, y, x) || out.labels(z, y, x) != t.parent) {
                fits = false;
                break;
              }
              voxels.push_back(out.labels.index(z, y, x));
            }
        if (!fits || voxels.empty()) continue;
        for (std::size_t i : voxels) {
          out.labels[i] = static_cast<std::uint16_t>(t.cls);
          out.image[i] = t.hu;
        }
        placed = true;
      }
      if (!placed) {
        throw Error(ErrorCode::InvalidArgument, "cannot place tumor " + std::to_string(t.cls) + " inside organ " +
                                                    std::to_string(t.parent));
      }
    }
  }

  if (spec.noise > 0.0) {
    for (std::size_t i = 0; i < out.image.size(); ++i) out.image[i] += spec.noise * normal01(rng);
  }
  return out;
}

LabelMap partial_view(const LabelMap& full, const LabelSpace& space) {
  LabelMap out = full;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i] != 0 && !space.contains(out[i])) out[i] = 0;
  return out;
}

std::vector<PhantomDataset> generate_suite(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<PhantomDataset> suite;
  for (std::size_t d = 0; d < spec.datasets.size(); ++d) {
    const PhantomDatasetSpec& ds = spec.datasets[d];
    PhantomDataset out;
    out.space = LabelSpace{ds.id, ds.classes};
    const std::uint64_t ds_seed = derive_seed(seed, d);
    for (int v = 0; v < ds.volumes; ++v) {
      Rng rng(derive_seed(ds_seed, static_cast<std::uint64_t>(v)));
      const bool tumors = uniform01(rng) < ds.tumor_rate;
      out.cases.push_back(generate_case(spec, rng, tumors));
    }
    suite.push_back(std::move(out));
  }
  return suite;
}

std::filesystem::path write_suite(const std::filesystem::path& dir, const std::vector<PhantomDataset>& suite) {
  std::filesystem::create_directories(dir);
  Manifest manifest;
  for (const PhantomDataset& ds : suite) {
    ManifestDataset md;
    md.space = ds.space;
    for (std::size_t v = 0; v < ds.cases.size(); ++v) {
      char stem[128];
      std::snprintf(stem, sizeof stem, "%s_%03zu", ds.space.dataset_id.c_str(), v);
      ManifestVolume mv{dir / (std::string(stem) + "_img.uvol"), dir / (std::string(stem) + "_lbl.uvol"),
                        dir / (std::string(stem) + "_full.uvol")};
      const PhantomCase& c = ds.cases[v];
      write_volume(mv.image, c.image);
      write_volume(mv.label, partial_view(c.labels, ds.space));
      write_volume(mv.full_label, c.labels);
      md.volumes.push_back(std::move(mv));
    }
    manifest.datasets.push_back(std::move(md));
  }
  const std::filesystem::path path = dir / "manifest.txt";
  write_manifest(path, manifest);
  return path;
}

// ---- manifest ---------------------------------------------------------------

const ManifestDataset& Manifest::dataset(const std::string& id) const {
  for (const auto& d : datasets)
    if (d.space.dataset_id == id) return d;
  throw Error(ErrorCode::InvalidArgument, "manifest has no dataset '" + id + "'");
}

Manifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir, const std::string& source) {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool header = false;
  const auto fail = [&](const std::string& msg) {
    throw Error(ErrorCode::Parse, source + ":" + std::to_string(lineno) + ": " + msg);
  };
  const auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (!header) {
      if (key != "UMAN1") fail("expected header UMAN1");
      header = true;
      continue;
    }
    if (key == "dataset") {
      ManifestDataset d;
      if (!(ls >> d.space.dataset_id)) fail("dataset needs an id");
      for (const auto& other : m.datasets)
        if (other.space.dataset_id == d.space.dataset_id) fail("dataset '" + d.space.dataset_id + "' listed twice");
      int c = 0;
      while (ls >> c) d.space.classes.insert(c);
      if (!ls.eof()) fail("bad class list");
      if (d.space.classes.empty()) fail("dataset '" + d.space.dataset_id + "' annotates no class");
      m.datasets.push_back(std::move(d));
    } else if (key == "volume") {
      std::string id, image, label, full;
      if (!(ls >> id >> image >> label)) fail("volume needs <dataset> <image> <label>");
      ls >> full;
      auto it = std::find_if(m.datasets.begin(), m.datasets.end(), [&](const auto& d) { return d.space.dataset_id == id; });
      if (it == m.datasets.end()) fail("volume for undeclared dataset '" + id + "'");
      it->volumes.push_back({resolve(image), resolve(label), full.empty() ? std::filesystem::path{} : resolve(full)});
    } else {
      fail("unknown directive '" + key + "'");
    }
  }
  if (!header) throw Error(ErrorCode::Parse, source + ": empty manifest");
  return m;
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str(), path.parent_path(), path.string());
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  const std::filesystem::path base = path.parent_path();
  const auto rel = [&](const std::filesystem::path& p) {
    if (p.empty()) return std::string{};
    const std::filesystem::path r = p.lexically_relative(base.empty() ? "." : base);
    return (r.empty() || *r.begin() == "..") ? p.string() : r.string();
  };
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "UMAN1\n";
  for (const auto& d : manifest.datasets) {
    out << "dataset " << d.space.dataset_id;
    for (int c : d.space.classes) out << ' ' << c;
    out << '\n';
  }
  for (const auto& d : manifest.datasets)
    for (const auto& v : d.volumes) {
      out << "volume " << d.space.dataset_id << ' ' << rel(v.image) << ' ' << rel(v.label);
      if (!v.full_label.empty()) out << ' ' << rel(v.full_label);
      out << '\n';
    }
  if (!out) throw Error(ErrorCode::Io, "write failed: " + path.string());
}

}  // namespace uniseg
