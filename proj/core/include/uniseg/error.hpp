#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace uniseg {

enum class ErrorCode {
  Parse,
  Io,
  InvalidArgument,
  // taxonomy
  DuplicateIndex,
  DanglingParent,
  ParentTierOrder,
  UnpairedLaterality,
  ClassNotAnnotated,
  DegeneratePlane,
  // volume
  NonCubicPatch,
  ShapeMismatch,
  // backbone / heads
  BadPatchShape,
  GradShapeMismatch,
  EmbeddingDimMismatch,
  MissingEmbedding,
  LpgDimMismatch,
  // training
  EmptyLabelSpace,
  DivergedLoss,
  CheckpointVersion,
  TaxonomyMismatch,
  // continual
  ClassIndexCollision,
  // inference
  WindowTooLarge,
  // metrics
  InsufficientCases,
  // phantom
  SpecOverlap,
  // config
  UnknownConfigKey,
};

std::string_view to_string(ErrorCode code);

/// Every failure surfaced by the library carries one of the codes above so
/// callers (and tests) can dispatch on the kind of error without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace uniseg
