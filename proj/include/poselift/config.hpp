#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "poselift/diffusion.hpp"
#include "poselift/dualstream.hpp"
#include "poselift/errors.hpp"
#include "poselift/skeleton.hpp"

namespace poselift::harness {

enum class Precision { f32, f64 };

inline std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision precision_from_string(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("unknown train.precision '" + s + "'");
}

// Desk scale: the full-size defaults of BackboneConfig are too slow to train
// on one CPU core. The desk model underfits in 30 epochs, so no dropout.
inline dualstream::BackboneConfig desk_backbone() {
  dualstream::BackboneConfig b;
  b.d = 64;
  b.d_prime = 256;
  b.depth = 4;
  b.mlp_ratio = 2;
  b.dropout = 0.0;
  return b;
}

struct RunConfig {
  dualstream::BackboneConfig backbone = desk_backbone();
  std::size_t diffusion_t = 1000;
  diffusion::ScheduleKind schedule = diffusion::ScheduleKind::cosine;
  std::size_t sampling_steps = 1;
  diffusion::CoeffMode coeff_mode = diffusion::CoeffMode::standard;

  double lr = 2e-3;
  double lr_decay = 0.9;  // per epoch
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double hflip_prob = 0.5;
  std::size_t epochs = 30;
  std::size_t batch_size = 2;
  Precision precision = Precision::f32;

  std::uint64_t seed = 0;
  std::string skeleton = "human";
  std::size_t train_sequences = 500;
  std::size_t test_sequences = 100;
  skeleton::SynthConfig synth;

  std::string output_dir = "run";

  skeleton::SkeletonTopology topology() const {
    if (skeleton == "human") return skeleton::human_topology();
    if (skeleton == "micro") return skeleton::micro_topology();
    throw ConfigError("unknown data.skeleton '" + skeleton + "'");
  }

  // Keeps derived fields (frames, joints) in step with the data settings.
  void sync() {
    backbone.frames = synth.frames;
    backbone.joints = topology().joint_count;
  }

  void validate() const {
    backbone.validate();
    synth.validate();
    if (diffusion_t < 1) throw ConfigError("diffusion.T must be >= 1");
    if (sampling_steps < 1 || sampling_steps > diffusion_t)
      throw ConfigError("diffusion.steps must lie in [1, diffusion.T]");
    if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (!(lr_decay > 0.0)) throw ConfigError("train.lr_decay must be positive");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("train.beta1/beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
    if (hflip_prob < 0.0 || hflip_prob > 1.0) throw ConfigError("train.hflip_prob must lie in [0, 1]");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (train_sequences < 1 || test_sequences < 1)
      throw ConfigError("data.train and data.test must be >= 1");
    if (topology().joint_count != backbone.joints)
      throw ConfigError("backbone joints do not match data.skeleton");
  }
};

namespace detail {

template <class N>
N parse_number(const std::string& key, const std::string& text) {
  N value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end)
    throw ConfigError("bad value '" + text + "' for " + key);
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("bad value '" + text + "' for " + key + " (expected true/false)");
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class N>
Field number(std::string key, N RunConfig::*member) {
  return {key,
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<N>) return format_double(c.*member);
            else return std::to_string(c.*member);
          },
          [member, key](RunConfig& c, const std::string& v) { c.*member = parse_number<N>(key, v); }};
}

template <class N, class Get>
Field nested(std::string key, Get access) {
  return {key,
          [access](const RunConfig& c) {
            const N& v = access(const_cast<RunConfig&>(c));
            if constexpr (std::is_same_v<N, bool>) return std::string(v ? "true" : "false");
            else if constexpr (std::is_floating_point_v<N>) return format_double(v);
            else return std::to_string(v);
          },
          [access, key](RunConfig& c, const std::string& v) {
            if constexpr (std::is_same_v<N, bool>) access(c) = parse_bool(key, v);
            else access(c) = parse_number<N>(key, v);
          }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(nested<std::size_t>("backbone.d", [](RunConfig& c) -> auto& { return c.backbone.d; }));
    f.push_back(nested<std::size_t>("backbone.d_prime", [](RunConfig& c) -> auto& { return c.backbone.d_prime; }));
    f.push_back(nested<std::size_t>("backbone.depth", [](RunConfig& c) -> auto& { return c.backbone.depth; }));
    f.push_back(nested<std::size_t>("backbone.heads", [](RunConfig& c) -> auto& { return c.backbone.heads; }));
    f.push_back(nested<std::size_t>("backbone.k", [](RunConfig& c) -> auto& { return c.backbone.k; }));
    f.push_back(nested<double>("backbone.dropout", [](RunConfig& c) -> auto& { return c.backbone.dropout; }));
    f.push_back(nested<std::size_t>("backbone.mlp_ratio", [](RunConfig& c) -> auto& { return c.backbone.mlp_ratio; }));
    f.push_back({"backbone.mode", [](const RunConfig& c) { return dualstream::to_string(c.backbone.mode); },
                 [](RunConfig& c, const std::string& v) { c.backbone.mode = dualstream::stream_mode_from_string(v); }});
    f.push_back(nested<bool>("pde.enabled", [](RunConfig& c) -> auto& { return c.backbone.pde.enabled; }));
    f.push_back(nested<double>("pde.h", [](RunConfig& c) -> auto& { return c.backbone.pde.h; }));
    f.push_back(nested<std::size_t>("pde.steps", [](RunConfig& c) -> auto& { return c.backbone.pde.steps; }));
    f.push_back(number("diffusion.T", &RunConfig::diffusion_t));
    f.push_back({"diffusion.schedule", [](const RunConfig& c) { return diffusion::to_string(c.schedule); },
                 [](RunConfig& c, const std::string& v) { c.schedule = diffusion::schedule_kind_from_string(v); }});
    f.push_back(number("diffusion.steps", &RunConfig::sampling_steps));
    f.push_back({"diffusion.coeff_mode", [](const RunConfig& c) { return diffusion::to_string(c.coeff_mode); },
                 [](RunConfig& c, const std::string& v) { c.coeff_mode = diffusion::coeff_mode_from_string(v); }});
    f.push_back(number("train.lr", &RunConfig::lr));
    f.push_back(number("train.lr_decay", &RunConfig::lr_decay));
    f.push_back(number("train.weight_decay", &RunConfig::weight_decay));
    f.push_back(number("train.beta1", &RunConfig::beta1));
    f.push_back(number("train.beta2", &RunConfig::beta2));
    f.push_back(number("train.adam_eps", &RunConfig::adam_eps));
    f.push_back(number("train.hflip_prob", &RunConfig::hflip_prob));
    f.push_back(number("train.epochs", &RunConfig::epochs));
    f.push_back(number("train.batch_size", &RunConfig::batch_size));
    f.push_back({"train.precision", [](const RunConfig& c) { return to_string(c.precision); },
                 [](RunConfig& c, const std::string& v) { c.precision = precision_from_string(v); }});
    f.push_back(number("seed", &RunConfig::seed));
    f.push_back({"data.skeleton", [](const RunConfig& c) { return c.skeleton; },
                 [](RunConfig& c, const std::string& v) { c.skeleton = v; }});
    f.push_back(nested<std::size_t>("data.frames", [](RunConfig& c) -> auto& { return c.synth.frames; }));
    f.push_back(number("data.train", &RunConfig::train_sequences));
    f.push_back(number("data.test", &RunConfig::test_sequences));
    f.push_back(nested<double>("data.amplitude", [](RunConfig& c) -> auto& { return c.synth.amplitude; }));
    f.push_back(nested<double>("data.period", [](RunConfig& c) -> auto& { return c.synth.period; }));
    f.push_back(nested<double>("data.yaw_range", [](RunConfig& c) -> auto& { return c.synth.yaw_range; }));
    f.push_back({"output_dir", [](const RunConfig& c) { return c.output_dir; },
                 [](RunConfig& c, const std::string& v) { c.output_dir = v; }});
    return f;
  }();
  return table;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : detail::fields()) keys.push_back(f.key);
  return keys;
}

inline void set_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : detail::fields()) {
    if (f.key == key) {
      f.set(cfg, value);
      cfg.sync();
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_value(const RunConfig& cfg, const std::string& key) {
  for (const auto& f : detail::fields())
    if (f.key == key) return f.get(cfg);
  throw ConfigError("unknown config key '" + key + "'");
}

// "key=value" per line; blank lines and '#' comments are ignored.
inline void apply_text(RunConfig& cfg, const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key=value");
    set_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg;
  cfg.sync();
  apply_text(cfg, ss.str(), path);
  return cfg;
}

inline std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : detail::fields()) out += f.key + "=" + f.get(cfg) + "\n";
  return out;
}

inline std::map<std::string, std::string> to_map(const RunConfig& cfg) {
  std::map<std::string, std::string> m;
  for (const auto& f : detail::fields()) m[f.key] = f.get(cfg);
  return m;
}

inline RunConfig default_config() {
  RunConfig cfg;
  cfg.sync();
  return cfg;
}

}  // namespace poselift::harness
