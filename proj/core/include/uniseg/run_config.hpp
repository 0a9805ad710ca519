#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "uniseg/continual.hpp"
#include "uniseg/inference.hpp"
#include "uniseg/metrics.hpp"
#include "uniseg/model.hpp"
#include "uniseg/training.hpp"

namespace uniseg {

/// `key = value` settings with `#` comments. Only known keys are accepted
/// (UnknownConfigKey); later assignments override earlier ones.
class RunConfig {
 public:
  static const std::set<std::string>& known_keys();

  static RunConfig parse(const std::string& text, const std::string& source = "<config>");
  static RunConfig load(const std::filesystem::path& path);

  /// Accepts `key=value` as well (command-line overrides).
  void set(const std::string& key, const std::string& value);
  void set_assignment(const std::string& assignment);
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  /// Canonical `key = value` lines in key order.
  std::string echo() const;

  void apply(TrainConfig& cfg) const;
  void apply(ModelConfig& cfg) const;
  void apply(WindowSpec& cfg) const;
  void apply(ExtensionConfig& cfg) const;  // includes its TrainConfig and WindowSpec
  void apply(DetectionRule& rule) const;
  double nsd_tolerance(double fallback) const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace uniseg
