// SPDX-License-Identifier: Apache-2.0
#pragma once

// Flat key=value run configuration. Lines are `key = value`; `#` starts a
// comment. Unknown keys are rejected.

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dpp/errors.hpp"
#include "dpp/synthbench.hpp"

namespace dpp {

struct RunConfig {
  BenchConfig bench;
  std::string out_dir = "out";

  void validate() const { bench.validate(); }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  std::uint64_t out = 0;
  try {
    if (!v.empty() && v[0] != '-') out = std::stoull(v, &pos, 0);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size())
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<int>(parse_u64(key, item)));
  }
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline Field dbl(std::string key, std::function<double&(RunConfig&)> ref) {
  return {key, [ref](const RunConfig& c) { return fmt_double(ref(const_cast<RunConfig&>(c))); },
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_double(key, v); }};
}

template <class T>
Field uint(std::string key, std::function<T&(RunConfig&)> ref) {
  return {key, [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = static_cast<T>(parse_u64(key, v)); }};
}

inline Field boolean(std::string key, std::function<bool&(RunConfig&)> ref) {
  return {key, [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_bool(key, v); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back(uint<std::uint64_t>("seed", [](RunConfig& c) -> std::uint64_t& { return c.bench.seed; }));
    v.push_back({"out_dir", [](const RunConfig& c) { return c.out_dir; },
                 [](RunConfig& c, const std::string& s) {
                   if (s.empty()) throw ConfigError("config key 'out_dir': must not be empty");
                   c.out_dir = s;
                 }});
    // model
    v.push_back(uint<std::size_t>("model.d", [](RunConfig& c) -> std::size_t& { return c.bench.head.dims.d; }));
    v.push_back(uint<std::size_t>("model.d_h", [](RunConfig& c) -> std::size_t& { return c.bench.head.dims.d_h; }));
    v.push_back(uint<std::size_t>("model.d_ff", [](RunConfig& c) -> std::size_t& { return c.bench.head.dims.d_ff; }));
    v.push_back(uint<std::size_t>("model.d_s", [](RunConfig& c) -> std::size_t& { return c.bench.head.dims.d_s; }));
    v.push_back({"model.num_classes", [](const RunConfig& c) { return std::to_string(c.bench.scene.num_classes); },
                 [](RunConfig& c, const std::string& s) {
                   const auto n = parse_u64("model.num_classes", s);
                   c.bench.head.dims.num_classes = n;
                   c.bench.scene.num_classes = n;
                 }});
    // head
    v.push_back(uint<int>("head.num_stages", [](RunConfig& c) -> int& { return c.bench.head.num_stages; }));
    v.push_back({"head.selector_stages",
                 [](const RunConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.bench.head.selector_stages.size(); ++i)
                     s += (i ? "," : "") + std::to_string(c.bench.head.selector_stages[i]);
                   return s;
                 },
                 [](RunConfig& c, const std::string& s) {
                   c.bench.head.selector_stages = parse_int_list("head.selector_stages", s);
                 }});
    v.push_back({"head.num_proposals", [](const RunConfig& c) { return std::to_string(c.bench.encoder.num_proposals); },
                 [](RunConfig& c, const std::string& s) {
                   const auto n = parse_u64("head.num_proposals", s);
                   c.bench.head.num_proposals = static_cast<int>(n);
                   c.bench.encoder.num_proposals = n;
                 }});
    v.push_back(dbl("head.lambda", [](RunConfig& c) -> double& { return c.bench.head.lambda; }));
    v.push_back(dbl("head.alpha", [](RunConfig& c) -> double& { return c.bench.head.alpha; }));
    v.push_back(dbl("head.tmin_last", [](RunConfig& c) -> double& { return c.bench.head.tmin_last; }));
    v.push_back(dbl("head.tau", [](RunConfig& c) -> double& { return c.bench.head.tau; }));
    v.push_back(boolean("head.use_iou_loss", [](RunConfig& c) -> bool& { return c.bench.head.use_iou_loss; }));
    v.push_back(
        boolean("head.use_complexity_loss", [](RunConfig& c) -> bool& { return c.bench.head.use_complexity_loss; }));
    v.push_back({"head.iou_target",
                 [](const RunConfig& c) {
                   return std::string(c.bench.head.iou_target == IouTarget::Matched ? "matched" : "max");
                 },
                 [](RunConfig& c, const std::string& s) {
                   if (s == "matched") c.bench.head.iou_target = IouTarget::Matched;
                   else if (s == "max") c.bench.head.iou_target = IouTarget::MaxOverTruths;
                   else throw ConfigError("config key 'head.iou_target': expected max or matched, got '" + s + "'");
                 }});
    // scenes
    v.push_back(
        uint<std::size_t>("scene.max_instances", [](RunConfig& c) -> std::size_t& { return c.bench.scene.max_instances; }));
    v.push_back(dbl("scene.min_size", [](RunConfig& c) -> double& { return c.bench.scene.min_size; }));
    v.push_back(dbl("scene.max_size", [](RunConfig& c) -> double& { return c.bench.scene.max_size; }));
    v.push_back(dbl("scene.max_pair_iou", [](RunConfig& c) -> double& { return c.bench.scene.max_pair_iou; }));
    // encoder
    v.push_back(dbl("encoder.jitter", [](RunConfig& c) -> double& { return c.bench.encoder.jitter; }));
    v.push_back(dbl("encoder.fraction_random", [](RunConfig& c) -> double& { return c.bench.encoder.fraction_random; }));
    v.push_back(uint<std::size_t>("encoder.max_jittered_per_truth",
                                  [](RunConfig& c) -> std::size_t& { return c.bench.encoder.max_jittered_per_truth; }));
    v.push_back(dbl("encoder.feature_noise", [](RunConfig& c) -> double& { return c.bench.encoder.feature_noise; }));
    v.push_back(dbl("encoder.min_size", [](RunConfig& c) -> double& { return c.bench.encoder.min_size; }));
    v.push_back(dbl("encoder.max_size", [](RunConfig& c) -> double& { return c.bench.encoder.max_size; }));
    v.push_back(
        uint<std::uint64_t>("encoder.seed", [](RunConfig& c) -> std::uint64_t& { return c.bench.encoder.encoder_seed; }));
    // training
    v.push_back(
        uint<std::size_t>("train.phase1_steps", [](RunConfig& c) -> std::size_t& { return c.bench.train.phase1_steps; }));
    v.push_back(
        uint<std::size_t>("train.phase2_steps", [](RunConfig& c) -> std::size_t& { return c.bench.train.phase2_steps; }));
    v.push_back(uint<std::size_t>("train.batch", [](RunConfig& c) -> std::size_t& { return c.bench.train.batch; }));
    v.push_back(dbl("train.lr_phase1", [](RunConfig& c) -> double& { return c.bench.train.lr_phase1; }));
    v.push_back(dbl("train.lr_selector", [](RunConfig& c) -> double& { return c.bench.train.lr_selector; }));
    v.push_back(dbl("train.lr_body", [](RunConfig& c) -> double& { return c.bench.train.lr_body; }));
    v.push_back(dbl("train.weight_decay", [](RunConfig& c) -> double& { return c.bench.train.weight_decay; }));
    v.push_back(dbl("train.grad_clip", [](RunConfig& c) -> double& { return c.bench.train.grad_clip; }));
    v.push_back(dbl("train.milestone1", [](RunConfig& c) -> double& { return c.bench.train.milestone1; }));
    v.push_back(dbl("train.milestone2", [](RunConfig& c) -> double& { return c.bench.train.milestone2; }));
    v.push_back({"train.select_mode", [](const RunConfig& c) { return std::string(to_string(c.bench.train.select_mode)); },
                 [](RunConfig& c, const std::string& s) {
                   if (s == "hard") c.bench.train.select_mode = SelectMode::TrainHard;
                   else if (s == "soft") c.bench.train.select_mode = SelectMode::TrainSoft;
                   else throw ConfigError("config key 'train.select_mode': expected hard or soft, got '" + s + "'");
                 }});
    v.push_back(dbl("train.gumbel_anneal", [](RunConfig& c) -> double& { return c.bench.train.gumbel_anneal; }));
    v.push_back(uint<std::size_t>("train.log_every", [](RunConfig& c) -> std::size_t& { return c.bench.train.log_every; }));
    // data
    v.push_back(uint<std::size_t>("data.train_scenes", [](RunConfig& c) -> std::size_t& { return c.bench.train_scenes; }));
    v.push_back(uint<std::size_t>("data.val_scenes", [](RunConfig& c) -> std::size_t& { return c.bench.val_scenes; }));
    return v;
  }();
  return f;
}

}  // namespace config_detail

/// Every accepted key, in serialization order.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : config_detail::fields()) out.push_back(f.key);
  return out;
}

/// Sets one key; throws ConfigError for unknown keys or bad values.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& f : config_detail::fields())
    if (f.key == key) return f.set(c, value);
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& c, const std::string& key) {
  for (const auto& f : config_detail::fields())
    if (f.key == key) return f.get(c);
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string to_text(const RunConfig& c) {
  std::string out;
  for (const auto& f : config_detail::fields()) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

/// Applies the key=value lines in `text` on top of `base`.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = config_detail::trim(line.substr(0, eq));
    const std::string value = config_detail::trim(line.substr(eq + 1));
    try {
      set_config_value(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace dpp
