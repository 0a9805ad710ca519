#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "uniseg/taxonomy.hpp"

namespace uniseg {

struct ManifestVolume {
  std::filesystem::path image;
  std::filesystem::path label;       // partial view in the dataset's label space
  std::filesystem::path full_label;  // optional complete ground truth
};

struct ManifestDataset {
  LabelSpace space;
  std::vector<ManifestVolume> volumes;
};

/// Text file:
///   UMAN1
///   dataset <id> <class> <class> ...
///   volume <id> <image> <label> [full_label]
/// Relative paths resolve against the manifest's directory.
struct Manifest {
  std::vector<ManifestDataset> datasets;

  const ManifestDataset& dataset(const std::string& id) const;
};

Manifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir,
                        const std::string& source = "<manifest>");
Manifest load_manifest(const std::filesystem::path& path);
/// Paths are written relative to the manifest's directory when possible.
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

}  // namespace uniseg
