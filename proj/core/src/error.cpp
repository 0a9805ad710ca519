#include "uniseg/error.hpp"

namespace uniseg {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::Parse: return "ParseError";
    case ErrorCode::Io: return "IoError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DuplicateIndex: return "DuplicateIndex";
    case ErrorCode::DanglingParent: return "DanglingParent";
    case ErrorCode::ParentTierOrder: return "ParentTierOrder";
    case ErrorCode::UnpairedLaterality: return "UnpairedLaterality";
    case ErrorCode::ClassNotAnnotated: return "ClassNotAnnotated";
    case ErrorCode::DegeneratePlane: return "DegeneratePlane";
    case ErrorCode::NonCubicPatch: return "NonCubicPatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::BadPatchShape: return "BadPatchShape";
    case ErrorCode::GradShapeMismatch: return "GradShapeMismatch";
    case ErrorCode::EmbeddingDimMismatch: return "EmbeddingDimMismatch";
    case ErrorCode::MissingEmbedding: return "MissingEmbedding";
    case ErrorCode::LpgDimMismatch: return "LpgDimMismatch";
    case ErrorCode::EmptyLabelSpace: return "EmptyLabelSpace";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::CheckpointVersion: return "CheckpointVersion";
    case ErrorCode::TaxonomyMismatch: return "TaxonomyMismatch";
    case ErrorCode::ClassIndexCollision: return "ClassIndexCollision";
    case ErrorCode::WindowTooLarge: return "WindowTooLarge";
    case ErrorCode::InsufficientCases: return "InsufficientCases";
    case ErrorCode::SpecOverlap: return "SpecOverlap";
    case ErrorCode::UnknownConfigKey: return "UnknownConfigKey";
  }
  return "Unknown";
}

}  // namespace uniseg
