#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "uniseg/volume.hpp"

namespace uniseg {

enum class ClassKind { Organ, Vessel, Tumor };
enum class Laterality { None, Left, Right };

std::string_view to_string(ClassKind k);
std::string_view to_string(Laterality l);

/// One row of the global label template. Index 0 is background and is never
/// a ClassDef.
struct ClassDef {
  int index = 0;
  std::string name;
  ClassKind kind = ClassKind::Organ;
  std::optional<int> parent;  // inclusion: this class lies inside `parent`
  Laterality laterality = Laterality::None;
  int merge_tier = 1;  // 1 organ, 2 vessel, 3 tumor

  friend bool operator==(const ClassDef&, const ClassDef&) = default;
};

/// Immutable, validated class template. Safe to share across threads.
class Taxonomy {
 public:
  Taxonomy() = default;
  /// Validates: unique ascending indices >= 1, parents exist with a strictly
  /// lower merge tier, left/right classes come in name-matched pairs.
  explicit Taxonomy(std::vector<ClassDef> classes, int version = 1);

  const std::vector<ClassDef>& classes() const { return classes_; }
  std::size_t size() const { return classes_.size(); }
  bool empty() const { return classes_.empty(); }
  int version() const { return version_; }

  bool contains(int index) const;
  const ClassDef& at(int index) const;
  const ClassDef* find(std::string_view name) const;
  std::vector<int> indices() const;

  /// Transitive parent chain, nearest first.
  std::vector<int> ancestors(int index) const;
  std::optional<int> lateral_partner(int index) const;

  /// Restriction to `keep`. Parent links leaving the subset are dropped, and
  /// so is laterality when the partner is not kept.
  Taxonomy subset(const std::set<int>& keep) const;
  /// Appends classes and bumps the version. Existing indices are an error
  /// (ClassIndexCollision).
  Taxonomy extended(const std::vector<ClassDef>& extra) const;

  /// Canonical template text (round-trips through parse_template).
  std::string serialize() const;
  /// Fingerprint of the class rows; independent of the version counter.
  std::uint64_t hash() const;

  friend bool operator==(const Taxonomy& a, const Taxonomy& b) {
    return a.classes_ == b.classes_ && a.version_ == b.version_;
  }

 private:
  std::vector<ClassDef> classes_;
  int version_ = 1;
};

/// Template text: header `UTPL1`, optional `version N`, then rows
/// `index<TAB>name<TAB>kind<TAB>parent|-<TAB>laterality<TAB>merge_tier`.
/// `#` starts a comment.
Taxonomy parse_template(std::string_view text, const std::string& source = "<template>");
Taxonomy load_template(const std::filesystem::path& path);
void write_template(const std::filesystem::path& path, const Taxonomy& taxonomy);

/// Parses a single template row (no header); used by extension plans.
ClassDef parse_template_row(std::string_view row, const std::string& where);

/// The classes annotated by one dataset.
struct LabelSpace {
  std::string dataset_id;
  std::set<int> classes;

  void validate(const Taxonomy& taxonomy) const;

  friend bool operator==(const LabelSpace&, const LabelSpace&) = default;
  bool contains(int cls) const { return classes.count(cls) != 0; }
};

/// An integer label map together with the label space it was annotated in.
struct LabelVolume {
  LabelMap grid;
  LabelSpace space;

  /// Every non-zero voxel must be a member of the label space.
  void validate() const;
};

/// 1 exactly where the label equals `cls`.
Mask binarize(const LabelVolume& label, int cls);

using MaskSet = std::map<int, Mask>;

/// ORs every class mask into the masks of all its ancestors (transitive).
/// Missing ancestor masks are created. Idempotent and monotone.
MaskSet apply_inclusion(MaskSet masks, const Taxonomy& taxonomy);

/// A plane in voxel coordinates (z, y, x). Voxels with positive signed
/// distance n . (p - point) are on the patient's left.
struct SagittalPlane {
  std::array<double, 3> point{};
  std::array<double, 3> normal{0.0, 0.0, 1.0};

  static SagittalPlane mid_sagittal(Dims dims);
};

struct SideMasks {
  Mask left;
  Mask right;
};

SideMasks split_laterality(const Mask& mask, const SagittalPlane& plane);

}  // namespace uniseg
