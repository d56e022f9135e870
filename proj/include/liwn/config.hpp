#pragma once

// Run configuration: a key=value text file (# comments) plus --set overrides.
// Unknown keys and malformed values are rejected before any compute.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "liwn/data.hpp"
#include "liwn/error.hpp"
#include "liwn/nn.hpp"

namespace liwn {

struct RunConfig {
  std::string model = "ref";  // ref, ref+B,D, scatnet_a..d, scatter_linear
  std::string model_file;     // optional text spec, overrides `model`
  std::string dataset = "cifar10";  // cifar10, cifar100, textures
  std::string data_dir;
  std::size_t train_subset = 0;  // 0 = all
  std::size_t test_subset = 0;
  std::size_t texture_train = 500;
  std::size_t texture_test = 500;
  std::size_t width = 64;
  std::string filters = "near_sym_a";
  std::uint64_t seed = 0;
  TrainConfig train;
  AugmentPolicy augment = AugmentPolicy::standard;
  std::string output_dir = "runs/default";
  std::string precision = "f32";
  std::string resume;      // checkpoint to continue from
  std::string checkpoint;  // checkpoint for eval/extract
  std::size_t extract_layers = 0;  // truncate the graph for extract (0 = scattering front end)
  std::size_t gradcheck_side = 8;
  double gradcheck_fault = 1.0;  // scales one backward per layer-kind case; 1 = healthy

  void set(const std::string& key, const std::string& value);
  void validate() const;
  std::string to_text() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long n = 0;
  try {
    if (v.empty() || v[0] == '-') throw std::invalid_argument(v);
    n = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
  return std::size_t(n);
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double d = 0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return d;
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  const std::string v = detail::trim(value);
  using detail::parse_count;
  using detail::parse_real;
  if (key == "model") model = v;
  else if (key == "model_file") model_file = v;
  else if (key == "dataset") dataset = v;
  else if (key == "data_dir") data_dir = v;
  else if (key == "train_subset") train_subset = parse_count(key, v);
  else if (key == "test_subset") test_subset = parse_count(key, v);
  else if (key == "texture_train") texture_train = parse_count(key, v);
  else if (key == "texture_test") texture_test = parse_count(key, v);
  else if (key == "width") width = parse_count(key, v);
  else if (key == "filters") filters = v;
  else if (key == "seed") seed = parse_count(key, v);
  else if (key == "epochs") train.epochs = parse_count(key, v);
  else if (key == "lr0") train.lr0 = parse_real(key, v);
  else if (key == "momentum") train.momentum = parse_real(key, v);
  else if (key == "batch") train.batch = parse_count(key, v);
  else if (key == "weight_decay") train.weight_decay = parse_real(key, v);
  else if (key == "gamma") train.gamma = parse_real(key, v);
  else if (key == "milestones") {
    train.milestones.clear();
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!detail::trim(tok).empty()) train.milestones.push_back(parse_count(key, detail::trim(tok)));
  } else if (key == "augment") augment = parse_augment_policy(v);
  else if (key == "output_dir") output_dir = v;
  else if (key == "precision") precision = v;
  else if (key == "resume") resume = v;
  else if (key == "checkpoint") checkpoint = v;
  else if (key == "extract_layers") extract_layers = parse_count(key, v);
  else if (key == "gradcheck_side") gradcheck_side = parse_count(key, v);
  else if (key == "gradcheck_fault") gradcheck_fault = parse_real(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

inline void RunConfig::validate() const {
  train.validate();
  if (dataset != "cifar10" && dataset != "cifar100" && dataset != "textures")
    throw ConfigError("dataset must be cifar10, cifar100 or textures");
  if (dataset == "textures" && (texture_train < 2 || texture_test < 2))
    throw ConfigError("texture_train and texture_test must be at least 2");
  if (precision != "f32" && precision != "f64") throw ConfigError("precision must be f32 or f64");
  if (width == 0) throw ConfigError("width must be positive");
  if (model.empty() && model_file.empty()) throw ConfigError("model is empty");
  if (output_dir.empty()) throw ConfigError("output_dir is empty");
  if (gradcheck_side < 4 || gradcheck_side % 4) throw ConfigError("gradcheck_side must be a positive multiple of 4");
}

inline std::string RunConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "model = " << model << "\n"
     << "model_file = " << model_file << "\n"
     << "dataset = " << dataset << "\n"
     << "data_dir = " << data_dir << "\n"
     << "train_subset = " << train_subset << "\n"
     << "test_subset = " << test_subset << "\n"
     << "texture_train = " << texture_train << "\n"
     << "texture_test = " << texture_test << "\n"
     << "width = " << width << "\n"
     << "filters = " << filters << "\n"
     << "seed = " << seed << "\n"
     << "epochs = " << train.epochs << "\n"
     << "lr0 = " << train.lr0 << "\n"
     << "momentum = " << train.momentum << "\n"
     << "batch = " << train.batch << "\n"
     << "weight_decay = " << train.weight_decay << "\n"
     << "milestones = ";
  for (std::size_t i = 0; i < train.milestones.size(); ++i) os << (i ? "," : "") << train.milestones[i];
  os << "\n"
     << "gamma = " << train.gamma << "\n"
     << "augment = " << (augment == AugmentPolicy::none ? "none" : "standard") << "\n"
     << "output_dir = " << output_dir << "\n"
     << "precision = " << precision << "\n"
     << "resume = " << resume << "\n"
     << "checkpoint = " << checkpoint << "\n"
     << "extract_layers = " << extract_layers << "\n"
     << "gradcheck_side = " << gradcheck_side << "\n"
     << "gradcheck_fault = " << gradcheck_fault << "\n";
  return os.str();
}

/// Applies "key = value" lines; blank lines and '#' comments are skipped.
inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    try {
      c.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void apply_override(RunConfig& c, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
  c.set(detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
}

inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig c;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(c, ss.str(), path);
  }
  for (const auto& kv : overrides) apply_override(c, kv);
  c.validate();
  return c;
}

}  // namespace liwn
