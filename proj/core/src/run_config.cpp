#include "uniseg/run_config.hpp"

#include <fstream>
#include <sstream>

namespace uniseg {

namespace {

std::string trim(const std::string& s) {
  const std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::Parse, "config key '" + key + "': expected a number, got '" + v + "'");
}

int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int x = std::stoi(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::Parse, "config key '" + key + "': expected an integer, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw Error(ErrorCode::Parse, "config key '" + key + "': expected a boolean, got '" + v + "'");
}

}  // namespace

const std::set<std::string>& RunConfig::known_keys() {
  static const std::set<std::string> keys = {
      // training
      "lr", "weight_decay", "warmup_epochs", "epochs", "steps_per_epoch", "batch_size", "patch", "fg_ratio",
      "rotate_prob", "shift_prob", "shift",
      // model
      "channels", "decoder_channels", "detach_global",
      // inference
      "window", "overlap", "sigma_fraction",
      // extension
      "pseudo_labels", "pseudo_mode", "refresh_pseudo", "freeze_old_heads",
      // evaluation
      "nsd_tolerance", "min_voxels"};
  return keys;
}

RunConfig RunConfig::parse(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    if (trim(line).empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::Parse, source + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      throw Error(e.code(), source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!known_keys().count(key)) throw Error(ErrorCode::UnknownConfigKey, "unknown config key '" + key + "'");
  if (value.empty()) throw Error(ErrorCode::Parse, "config key '" + key + "' has no value");
  values_[key] = value;
}

void RunConfig::set_assignment(const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos) throw Error(ErrorCode::Parse, "expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string RunConfig::echo() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

void RunConfig::apply(TrainConfig& c) const {
  for (const auto& [k, v] : values_) {
    if (k == "lr") c.lr = to_double(k, v);
    else if (k == "weight_decay") c.weight_decay = to_double(k, v);
    else if (k == "warmup_epochs") c.warmup_epochs = to_int(k, v);
    else if (k == "epochs") c.epochs = to_int(k, v);
    else if (k == "steps_per_epoch") c.steps_per_epoch = to_int(k, v);
    else if (k == "batch_size") c.batch_size = to_int(k, v);
    else if (k == "patch") c.patch = to_int(k, v);
    else if (k == "fg_ratio") c.fg_ratio = to_double(k, v);
    else if (k == "rotate_prob") c.augment.rotate_prob = to_double(k, v);
    else if (k == "shift_prob") c.augment.shift_prob = to_double(k, v);
    else if (k == "shift") c.augment.shift = to_double(k, v);
  }
  c.validate();
}

void RunConfig::apply(ModelConfig& c) const {
  for (const auto& [k, v] : values_) {
    if (k == "channels") {
      c.backbone.channels.clear();
      std::istringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) c.backbone.channels.push_back(to_int(k, trim(item)));
    } else if (k == "decoder_channels") {
      c.backbone.decoder_channels = to_int(k, v);
    } else if (k == "detach_global") {
      c.detach_global = to_bool(k, v);
    }
  }
  c.backbone.validate();
}

void RunConfig::apply(WindowSpec& c) const {
  for (const auto& [k, v] : values_) {
    if (k == "window") c.window = to_int(k, v);
    else if (k == "overlap") c.overlap = to_double(k, v);
    else if (k == "sigma_fraction") c.sigma_fraction = to_double(k, v);
  }
  c.validate();
}

void RunConfig::apply(ExtensionConfig& c) const {
  apply(c.train);
  apply(c.window);
  for (const auto& [k, v] : values_) {
    if (k == "pseudo_labels") {
      c.pseudo_labels = to_bool(k, v);
    } else if (k == "pseudo_mode") {
      if (v == "hard") c.mode = PseudoMode::Hard;
      else if (v == "soft") c.mode = PseudoMode::Soft;
      else throw Error(ErrorCode::Parse, "pseudo_mode must be 'hard' or 'soft'");
    } else if (k == "refresh_pseudo") {
      c.refresh_pseudo = to_bool(k, v);
    } else if (k == "freeze_old_heads") {
      c.freeze_old_heads = to_bool(k, v);
    }
  }
}

void RunConfig::apply(DetectionRule& rule) const {
  if (auto it = values_.find("min_voxels"); it != values_.end()) {
    const int n = to_int(it->first, it->second);
    if (n < 1) throw Error(ErrorCode::InvalidArgument, "min_voxels must be >= 1");
    rule.min_voxels = static_cast<std::size_t>(n);
  }
}

double RunConfig::nsd_tolerance(double fallback) const {
  auto it = values_.find("nsd_tolerance");
  return it == values_.end() ? fallback : to_double(it->first, it->second);
}

}  // namespace uniseg
