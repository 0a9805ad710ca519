#include "uniseg/taxonomy.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"

namespace uniseg {

std::string_view to_string(ClassKind k) {
  switch (k) {
    case ClassKind::Organ: return "organ";
    case ClassKind::Vessel: return "vessel";
    case ClassKind::Tumor: return "tumor";
  }
  return "organ";
}

std::string_view to_string(Laterality l) {
  switch (l) {
    case Laterality::None: return "none";
    case Laterality::Left: return "left";
    case Laterality::Right: return "right";
  }
  return "none";
}

namespace {

// "R kidney" / "L kidney" -> "kidney"
std::string side_stripped(const std::string& name) {
  for (std::string_view p : {"R ", "L ", "right ", "left ", "Right ", "Left "}) {
    if (name.rfind(p, 0) == 0) return name.substr(p.size());
  }
  return name;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

int parse_int(const std::string& s, const std::string& where) {
  int v = 0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || ptr != end) throw Error(ErrorCode::Parse, where + ": expected integer, got '" + s + "'");
  return v;
}

}  // namespace

Taxonomy::Taxonomy(std::vector<ClassDef> classes, int version)
    : classes_(std::move(classes)), version_(version) {
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    const auto& c = classes_[i];
    if (c.index < 1) throw Error(ErrorCode::InvalidArgument, "class index must be >= 1 (0 is background)");
    if (i > 0 && c.index == classes_[i - 1].index) {
      throw Error(ErrorCode::DuplicateIndex, "class index " + std::to_string(c.index) + " appears twice");
    }
    if (i > 0 && c.index < classes_[i - 1].index) {
      // Duplicates may hide behind unsorted input; report them as such.
      for (std::size_t j = 0; j < i; ++j)
        if (classes_[j].index == c.index)
          throw Error(ErrorCode::DuplicateIndex, "class index " + std::to_string(c.index) + " appears twice");
      throw Error(ErrorCode::InvalidArgument, "class indices must be listed in ascending order");
    }
  }
  for (const auto& c : classes_) {
    if (c.parent) {
      if (!contains(*c.parent)) {
        throw Error(ErrorCode::DanglingParent, "class " + std::to_string(c.index) + " names missing parent " +
                                                   std::to_string(*c.parent));
      }
      if (at(*c.parent).merge_tier >= c.merge_tier) {
        throw Error(ErrorCode::ParentTierOrder,
                    "class " + std::to_string(c.index) + " must have a higher merge tier than its parent");
      }
    }
    if (c.laterality != Laterality::None && !lateral_partner(c.index)) {
      throw Error(ErrorCode::UnpairedLaterality, "class '" + c.name + "' has no opposite-side partner");
    }
  }
}

bool Taxonomy::contains(int index) const {
  auto it = std::lower_bound(classes_.begin(), classes_.end(), index,
                             [](const ClassDef& c, int i) { return c.index < i; });
  return it != classes_.end() && it->index == index;
}

const ClassDef& Taxonomy::at(int index) const {
  auto it = std::lower_bound(classes_.begin(), classes_.end(), index,
                             [](const ClassDef& c, int i) { return c.index < i; });
  if (it == classes_.end() || it->index != index) {
    throw Error(ErrorCode::InvalidArgument, "unknown class index " + std::to_string(index));
  }
  return *it;
}

const ClassDef* Taxonomy::find(std::string_view name) const {
  for (const auto& c : classes_)
    if (c.name == name) return &c;
  return nullptr;
}

std::vector<int> Taxonomy::indices() const {
  std::vector<int> out;
  out.reserve(classes_.size());
  for (const auto& c : classes_) out.push_back(c.index);
  return out;
}

std::vector<int> Taxonomy::ancestors(int index) const {
  std::vector<int> out;
  std::optional<int> p = at(index).parent;
  while (p) {
    // Tier ordering makes cycles impossible; the size guard is belt and braces.
    if (out.size() > classes_.size()) break;
    out.push_back(*p);
    p = at(*p).parent;
  }
  return out;
}

std::optional<int> Taxonomy::lateral_partner(int index) const {
  const auto& c = at(index);
  if (c.laterality == Laterality::None) return std::nullopt;
  const Laterality want = c.laterality == Laterality::Left ? Laterality::Right : Laterality::Left;
  const std::string base = side_stripped(c.name);
  for (const auto& o : classes_) {
    if (o.laterality == want && side_stripped(o.name) == base) return o.index;
  }
  return std::nullopt;
}

Taxonomy Taxonomy::subset(const std::set<int>& keep) const {
  std::vector<ClassDef> out;
  for (const auto& c : classes_) {
    if (!keep.count(c.index)) continue;
    ClassDef d = c;
    if (d.parent && !keep.count(*d.parent)) {
      // Re-attach to the nearest kept ancestor, if any.
      d.parent.reset();
      for (int a : ancestors(c.index)) {
        if (keep.count(a)) {
          d.parent = a;
          break;
        }
      }
    }
    if (d.laterality != Laterality::None) {
      const auto partner = lateral_partner(c.index);
      if (!partner || !keep.count(*partner)) d.laterality = Laterality::None;
    }
    out.push_back(std::move(d));
  }
  return Taxonomy(std::move(out), version_);
}

Taxonomy Taxonomy::extended(const std::vector<ClassDef>& extra) const {
  std::vector<ClassDef> all = classes_;
  for (const auto& e : extra) {
    if (contains(e.index)) {
      throw Error(ErrorCode::ClassIndexCollision, "class index " + std::to_string(e.index) + " already exists");
    }
    all.push_back(e);
  }
  std::stable_sort(all.begin(), all.end(), [](const ClassDef& a, const ClassDef& b) { return a.index < b.index; });
  return Taxonomy(std::move(all), version_ + 1);
}

std::string Taxonomy::serialize() const {
  std::ostringstream os;
  os << "UTPL1\nversion " << version_ << "\n";
  for (const auto& c : classes_) {
    os << c.index << '\t' << c.name << '\t' << to_string(c.kind) << '\t';
    if (c.parent)
      os << *c.parent;
    else
      os << '-';
    os << '\t' << to_string(c.laterality) << '\t' << c.merge_tier << '\n';
  }
  return os.str();
}

std::uint64_t Taxonomy::hash() const {
  std::string rows = serialize();
  rows.erase(0, rows.find('\n', rows.find('\n') + 1) + 1);  // drop header and version
  return detail::fnv1a(rows.data(), rows.size());
}

ClassDef parse_template_row(std::string_view row, const std::string& where) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto tab = row.find('\t', start);
    fields.push_back(trim(row.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start)));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  if (fields.size() != 6) {
    throw Error(ErrorCode::Parse, where + ": expected 6 tab-separated fields, found " + std::to_string(fields.size()));
  }
  ClassDef c;
  c.index = parse_int(fields[0], where);
  c.name = fields[1];
  if (c.name.empty()) throw Error(ErrorCode::Parse, where + ": empty class name");
  if (fields[2] == "organ")
    c.kind = ClassKind::Organ;
  else if (fields[2] == "vessel")
    c.kind = ClassKind::Vessel;
  else if (fields[2] == "tumor")
    c.kind = ClassKind::Tumor;
  else
    throw Error(ErrorCode::Parse, where + ": unknown kind '" + fields[2] + "'");
  if (fields[3] != "-") c.parent = parse_int(fields[3], where);
  if (fields[4] == "none")
    c.laterality = Laterality::None;
  else if (fields[4] == "left")
    c.laterality = Laterality::Left;
  else if (fields[4] == "right")
    c.laterality = Laterality::Right;
  else
    throw Error(ErrorCode::Parse, where + ": unknown laterality '" + fields[4] + "'");
  c.merge_tier = parse_int(fields[5], where);
  if (c.merge_tier < 1) throw Error(ErrorCode::Parse, where + ": merge tier must be >= 1");
  return c;
}

Taxonomy parse_template(std::string_view text, const std::string& source) {
  std::vector<ClassDef> classes;
  int version = 1;
  bool header = false;
  std::size_t pos = 0;
  int lineno = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    if (!header) {
      if (t != "UTPL1") throw Error(ErrorCode::Parse, where + ": missing UTPL1 header");
      header = true;
      continue;
    }
    if (t.rfind("version", 0) == 0 && t.find('\t') == std::string::npos) {
      version = parse_int(trim(std::string_view(t).substr(7)), where);
      continue;
    }
    ClassDef c = parse_template_row(line, where);
    for (const auto& prev : classes) {
      if (prev.index == c.index) {
        throw Error(ErrorCode::DuplicateIndex, where + ": duplicate class index " + std::to_string(c.index));
      }
    }
    classes.push_back(std::move(c));
  }
  if (!header) throw Error(ErrorCode::Parse, source + ": empty template");
  return Taxonomy(std::move(classes), version);
}

Taxonomy load_template(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_template(ss.str(), path.string());
}

void write_template(const std::filesystem::path& path, const Taxonomy& taxonomy) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << taxonomy.serialize();
}

void LabelSpace::validate(const Taxonomy& taxonomy) const {
  if (classes.empty()) throw Error(ErrorCode::EmptyLabelSpace, "dataset '" + dataset_id + "' annotates no class");
  for (int c : classes) {
    if (!taxonomy.contains(c)) {
      throw Error(ErrorCode::InvalidArgument,
                  "dataset '" + dataset_id + "' references unknown class " + std::to_string(c));
    }
  }
}

void LabelVolume::validate() const {
  for (auto v : grid.values()) {
    if (v != 0 && !space.contains(v)) {
      throw Error(ErrorCode::ClassNotAnnotated, "label value " + std::to_string(v) +
                                                     " is outside the label space of '" + space.dataset_id + "'");
    }
  }
}

Mask binarize(const LabelVolume& label, int cls) {
  if (!label.space.contains(cls)) {
    throw Error(ErrorCode::ClassNotAnnotated,
                "class " + std::to_string(cls) + " is not annotated in '" + label.space.dataset_id + "'");
  }
  Mask out(label.grid.dims(), label.grid.spacing());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = label.grid[i] == cls ? 1 : 0;
  return out;
}

MaskSet apply_inclusion(MaskSet masks, const Taxonomy& taxonomy) {
  std::vector<int> present;
  for (const auto& [cls, m] : masks) {
    if (taxonomy.contains(cls)) present.push_back(cls);
  }
  // Ancestors only ever gain voxels from descendants' original masks, so one
  // pass over the input classes realises the transitive closure.
  std::map<int, Mask> original;
  for (int cls : present) original.emplace(cls, masks.at(cls));
  for (int cls : present) {
    const Mask& child = original.at(cls);
    for (int a : taxonomy.ancestors(cls)) {
      auto it = masks.find(a);
      if (it == masks.end()) it = masks.emplace(a, Mask(child.dims(), child.spacing(), 0)).first;
      require_same_shape(it->second, child, "apply_inclusion: mask shapes differ");
      for (std::size_t i = 0; i < child.size(); ++i) it->second[i] |= child[i];
    }
  }
  return masks;
}

SagittalPlane SagittalPlane::mid_sagittal(Dims dims) {
  return {{(dims.d - 1) / 2.0, (dims.h - 1) / 2.0, (dims.w - 1) / 2.0}, {0.0, 0.0, 1.0}};
}

SideMasks split_laterality(const Mask& mask, const SagittalPlane& plane) {
  const auto& n = plane.normal;
  if (n[0] == 0.0 && n[1] == 0.0 && n[2] == 0.0) throw Error(ErrorCode::DegeneratePlane, "plane normal is zero");
  SideMasks out{Mask(mask.dims(), mask.spacing(), 0), Mask(mask.dims(), mask.spacing(), 0)};
  for (int z = 0; z < mask.dims().d; ++z)
    for (int y = 0; y < mask.dims().h; ++y)
      for (int x = 0; x < mask.dims().w; ++x) {
        if (!mask(z, y, x)) continue;
        const double s = n[0] * (z - plane.point[0]) + n[1] * (y - plane.point[1]) + n[2] * (x - plane.point[2]);
        (s > 0.0 ? out.left : out.right)(z, y, x) = 1;
      }
  return out;
}

}  // namespace uniseg
