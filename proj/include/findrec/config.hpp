#pragma once

// Resolved run configuration: documented defaults, then a JSON file, then
// dotted `key=value` overrides.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "findrec/errors.hpp"
#include "findrec/fusion.hpp"
#include "findrec/iicm.hpp"
#include "findrec/model.hpp"

namespace findrec {

struct TrainConfig {
  double lr_peak = 1e-3;
  double weight_decay = 0.01;
  std::size_t batch_size = 128;
  std::size_t epochs = 100;
  std::size_t warmup_steps = 2000;
  double clip_norm = 1.0;
  LossKind loss = LossKind::CrossEntropy;
  std::size_t n_neg = 1;  // BPR negatives per row
  bool exclude_seen = true;
  std::size_t eval_batch_size = 256;

  void validate() const {
    if (!(lr_peak > 0.0)) throw ConfigError("train.lr_peak must be > 0");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
    if (batch_size == 0 || eval_batch_size == 0) throw ConfigError("batch sizes must be >= 1");
    if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
    if (!(clip_norm > 0.0)) throw ConfigError("train.clip_norm must be > 0");
    if (n_neg == 0) throw ConfigError("train.n_neg must be >= 1");
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SteinConfig stein;
  std::string data_dir;
  std::uint64_t seed = 0;

  void validate() const {
    model.validate();
    train.validate();
    stein.validate();
  }
};

namespace config_detail {

enum class Kind { Uint, Double, Bool, String };

struct Key {
  Kind kind;
  std::function<void(RunConfig&, const nlohmann::json&)> set;
  std::function<nlohmann::json(const RunConfig&)> get;
};

template <class T>
Key uint_key(T RunConfig::*section, std::size_t T::*field) {
  return {Kind::Uint, [=](RunConfig& c, const nlohmann::json& v) { (c.*section).*field = v.get<std::size_t>(); },
          [=](const RunConfig& c) { return nlohmann::json((c.*section).*field); }};
}

template <class T>
Key double_key(T RunConfig::*section, double T::*field) {
  return {Kind::Double, [=](RunConfig& c, const nlohmann::json& v) { (c.*section).*field = v.get<double>(); },
          [=](const RunConfig& c) { return nlohmann::json((c.*section).*field); }};
}

inline const std::map<std::string, Key>& keys() {
  static const std::map<std::string, Key> table = [] {
    std::map<std::string, Key> k;
    using M = ModelConfig;
    using T = TrainConfig;
    using S = SteinConfig;
    k["model.d_id"] = uint_key(&RunConfig::model, &M::d_id);
    k["model.d_hidden"] = uint_key(&RunConfig::model, &M::d_hidden);
    k["model.d_align"] = uint_key(&RunConfig::model, &M::d_align);
    k["model.heads"] = uint_key(&RunConfig::model, &M::heads);
    k["model.experts"] = uint_key(&RunConfig::model, &M::experts);
    k["model.n_layers"] = uint_key(&RunConfig::model, &M::n_layers);
    k["model.d_state"] = uint_key(&RunConfig::model, &M::d_state);
    k["model.expand"] = uint_key(&RunConfig::model, &M::expand);
    k["model.conv_kernel"] = uint_key(&RunConfig::model, &M::conv_kernel);
    k["model.max_len"] = uint_key(&RunConfig::model, &M::max_len);
    k["model.dropout"] = double_key(&RunConfig::model, &M::dropout);
    k["model.variant"] = {Kind::String,
                          [](RunConfig& c, const nlohmann::json& v) {
                            c.model.variant = parse_variant(v.get<std::string>());
                          },
                          [](const RunConfig& c) { return nlohmann::json(variant_name(c.model.variant)); }};
    k["train.lr_peak"] = double_key(&RunConfig::train, &T::lr_peak);
    k["train.weight_decay"] = double_key(&RunConfig::train, &T::weight_decay);
    k["train.batch_size"] = uint_key(&RunConfig::train, &T::batch_size);
    k["train.epochs"] = uint_key(&RunConfig::train, &T::epochs);
    k["train.warmup_steps"] = uint_key(&RunConfig::train, &T::warmup_steps);
    k["train.clip_norm"] = double_key(&RunConfig::train, &T::clip_norm);
    k["train.loss"] = {Kind::String,
                       [](RunConfig& c, const nlohmann::json& v) { c.train.loss = parse_loss_kind(v.get<std::string>()); },
                       [](const RunConfig& c) { return nlohmann::json(loss_kind_name(c.train.loss)); }};
    k["train.n_neg"] = uint_key(&RunConfig::train, &T::n_neg);
    k["train.exclude_seen"] = {Kind::Bool,
                               [](RunConfig& c, const nlohmann::json& v) { c.train.exclude_seen = v.get<bool>(); },
                               [](const RunConfig& c) { return nlohmann::json(c.train.exclude_seen); }};
    k["train.eval_batch_size"] = uint_key(&RunConfig::train, &T::eval_batch_size);
    k["stein.lambda"] = double_key(&RunConfig::stein, &S::lambda);
    k["stein.gamma"] = double_key(&RunConfig::stein, &S::gamma);
    k["stein.eta"] = double_key(&RunConfig::stein, &S::eta);
    k["data.dir"] = {Kind::String, [](RunConfig& c, const nlohmann::json& v) { c.data_dir = v.get<std::string>(); },
                     [](const RunConfig& c) { return nlohmann::json(c.data_dir); }};
    k["seed"] = {Kind::Uint, [](RunConfig& c, const nlohmann::json& v) { c.seed = v.get<std::uint64_t>(); },
                 [](const RunConfig& c) { return nlohmann::json(c.seed); }};
    return k;
  }();
  return table;
}

inline bool kind_matches(Kind kind, const nlohmann::json& v) {
  switch (kind) {
    case Kind::Uint:
      return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    case Kind::Double:
      return v.is_number();
    case Kind::Bool:
      return v.is_boolean();
    case Kind::String:
      return v.is_string();
  }
  return false;
}

inline const char* kind_name(Kind kind) {
  switch (kind) {
    case Kind::Uint:
      return "non-negative integer";
    case Kind::Double:
      return "number";
    case Kind::Bool:
      return "boolean";
    case Kind::String:
      return "string";
  }
  return "?";
}

inline void flatten(const nlohmann::json& j, const std::string& prefix, std::vector<std::pair<std::string, nlohmann::json>>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      flatten(*it, key, out);
    } else {
      out.emplace_back(key, *it);
    }
  }
}

}  // namespace config_detail

// Sets one dotted key. Throws UnknownKey or TypeError.
inline void set_config_value(RunConfig& cfg, const std::string& key, const nlohmann::json& value) {
  const auto& table = config_detail::keys();
  auto it = table.find(key);
  if (it == table.end()) throw UnknownKey(key);
  if (!config_detail::kind_matches(it->second.kind, value)) {
    throw TypeError(key + ": expected " + config_detail::kind_name(it->second.kind) + ", got " + value.dump());
  }
  try {
    it->second.set(cfg, value);
  } catch (const ConfigError& e) {
    throw TypeError(key + ": " + e.what());
  }
}

// Accepts nested objects ({"model": {"d_id": 64}}) and flat dotted keys.
inline void apply_config_json(RunConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw TypeError("config root must be a JSON object");
  std::vector<std::pair<std::string, nlohmann::json>> flat;
  config_detail::flatten(j, "", flat);
  for (const auto& [k, v] : flat) set_config_value(cfg, k, v);
}

// `key=value`; the value is read as JSON when it parses, otherwise as a string.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json v = nlohmann::json::parse(raw, nullptr, false);
  if (v.is_discarded()) v = raw;
  set_config_value(cfg, key, v);
}

inline RunConfig parse_config(const nlohmann::json& file, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  apply_config_json(cfg, file);
  for (const auto& o : overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

inline RunConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  nlohmann::json file = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    file = nlohmann::json::parse(ss.str(), nullptr, false);
    if (file.is_discarded()) throw ParseError("config " + path.string() + " is not valid JSON");
  }
  return parse_config(file, overrides);
}

// Every key, nested by section; feeding this back reproduces the config.
inline nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [key, k] : config_detail::keys()) {
    const auto dot = key.find('.');
    if (dot == std::string::npos) {
      j[key] = k.get(cfg);
    } else {
      j[key.substr(0, dot)][key.substr(dot + 1)] = k.get(cfg);
    }
  }
  return j;
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [key, k] : config_detail::keys()) out.push_back(key);
  return out;
}

}  // namespace findrec
