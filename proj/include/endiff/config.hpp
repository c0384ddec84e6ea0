#pragma once

// Flat `key = value` configuration.
//
// Grammar, one entry per line:
//   line    := blank | comment | key ws? '=' ws? value
//   comment := '#' anything
//   key     := [a-z_][a-z0-9_]*
//   value   := everything after '=' up to an unquoted '#', trimmed; a value
//              in double quotes keeps its inner text verbatim
// Booleans are true/false, lists are comma separated.

#include <cctype>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "endiff/diffusion.hpp"
#include "endiff/equinet.hpp"
#include "endiff/errors.hpp"
#include "endiff/molecule.hpp"
#include "endiff/train.hpp"

namespace endiff {

class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text) {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    int no = 0;
    while (std::getline(in, line)) {
      ++no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const std::string_view body = detail::trim(line);
      if (body.empty() || body.front() == '#') continue;
      const auto eq = body.find('=');
      if (eq == std::string_view::npos) throw ParseError("config: expected 'key = value'", static_cast<std::size_t>(no));
      const std::string key(detail::trim(body.substr(0, eq)));
      if (!valid_key(key)) throw ParseError("config: invalid key '" + key + "'", static_cast<std::size_t>(no));
      std::string value(detail::trim(body.substr(eq + 1)));
      if (!value.empty() && value.front() == '"') {
        const auto close = value.find('"', 1);
        if (close == std::string::npos) throw ParseError("config: unterminated quote", static_cast<std::size_t>(no));
        const std::string rest(detail::trim(std::string_view(value).substr(close + 1)));
        if (!rest.empty() && rest.front() != '#')
          throw ParseError("config: text after closing quote", static_cast<std::size_t>(no));
        value = value.substr(1, close - 1);
      } else {
        const auto hash = value.find('#');
        if (hash != std::string::npos) value = std::string(detail::trim(std::string_view(value).substr(0, hash)));
      }
      cfg.entries_[key] = value;
    }
    return cfg;
  }

  static bool valid_key(const std::string& k) {
    if (k.empty() || !(std::islower(static_cast<unsigned char>(k[0])) || k[0] == '_')) return false;
    for (char c : k)
      if (!(std::islower(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c)) || c == '_'))
        return false;
    return true;
  }

  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  void erase(const std::string& key) { entries_.erase(key); }
  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return entries_; }

  /// Entries of `other` replace ours.
  void merge(const KeyValueConfig& other) {
    for (const auto& [k, v] : other.entries_) entries_[k] = v;
  }

  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : entries_) {
      const bool quote = v.find('#') != std::string::npos || v != std::string(detail::trim(v));
      out += k + " = " + (quote ? "\"" + v + "\"" : v) + "\n";
    }
    return out;
  }

  std::string str(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
  }

  double number(const std::string& key) const {
    double v = 0.0;
    if (!detail::parse_double(str(key), v)) throw ConfigError("config key '" + key + "' is not a number");
    return v;
  }

  long integer(const std::string& key) const {
    const std::string s = str(key);
    std::size_t pos = 0;
    long v = 0;
    try {
      v = std::stol(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != s.size() || s.empty()) throw ConfigError("config key '" + key + "' is not an integer");
    return v;
  }

  std::uint64_t unsigned_integer(const std::string& key) const {
    const std::string s = str(key);
    std::size_t pos = 0;
    std::uint64_t v = 0;
    try {
      if (!s.empty() && s[0] != '-') v = std::stoull(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != s.size() || s.empty()) throw ConfigError("config key '" + key + "' is not a non-negative integer");
    return v;
  }

  bool boolean(const std::string& key) const {
    const std::string s = str(key);
    if (s == "true") return true;
    if (s == "false") return false;
    throw ConfigError("config key '" + key + "' must be true or false");
  }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const std::string t(detail::trim(item));
      if (!t.empty()) out.push_back(t);
    }
    return out;
  }

 private:
  std::map<std::string, std::string> entries_;
};

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace detail

/// Every setting a command can use. Defaults live here.
struct RunConfig {
  DiffusionConfig diffusion;
  EquiNetConfig net;
  TrainConfig train;
  std::vector<std::string> vocabulary = {"H", "C", "N", "O", "F"};
  bool conditional = false;
  std::uint64_t seed = 0;
  std::string output_dir = ".";

  AtomVocabulary vocab() const { return AtomVocabulary(vocabulary); }

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k = {
        "forward",        "delta",          "g_schedule",  "g0",          "beta_min",
        "beta_max",       "sample_steps",   "t_min",       "feature_scale", "layers",
        "scalar_width",   "vector_width",   "rbf_count",   "rbf_max",     "time_dim",
        "condition_embed", "condition_hidden", "sigma_floor", "train_steps", "batch_size", "lr",
        "clip_norm",      "vocabulary",     "condition",   "seed",        "output_dir"};
    return k;
  }

  KeyValueConfig to_kv() const {
    KeyValueConfig kv;
    kv.set("forward", to_string(diffusion.forward));
    kv.set("delta", detail::fmt_double(diffusion.delta));
    kv.set("g_schedule", to_string(diffusion.g_schedule));
    kv.set("g0", detail::fmt_double(diffusion.g0));
    kv.set("beta_min", detail::fmt_double(diffusion.beta_min));
    kv.set("beta_max", detail::fmt_double(diffusion.beta_max));
    kv.set("sample_steps", std::to_string(diffusion.steps));
    kv.set("t_min", detail::fmt_double(diffusion.t_min));
    kv.set("feature_scale", detail::fmt_double(diffusion.feature_scale));
    kv.set("layers", std::to_string(net.layers));
    kv.set("scalar_width", std::to_string(net.scalar_width));
    kv.set("vector_width", std::to_string(net.vector_width));
    kv.set("rbf_count", std::to_string(net.rbf_count));
    kv.set("rbf_max", detail::fmt_double(net.rbf_max));
    kv.set("time_dim", std::to_string(net.time_dim));
    kv.set("condition_embed", std::to_string(net.condition_embed));
    kv.set("condition_hidden", std::to_string(net.condition_hidden));
    kv.set("sigma_floor", detail::fmt_double(net.sigma_floor));
    kv.set("train_steps", std::to_string(train.steps));
    kv.set("batch_size", std::to_string(train.batch_size));
    kv.set("lr", detail::fmt_double(train.lr));
    kv.set("clip_norm", detail::fmt_double(train.clip_norm));
    std::string v;
    for (std::size_t i = 0; i < vocabulary.size(); ++i) v += (i ? "," : "") + vocabulary[i];
    kv.set("vocabulary", v);
    kv.set("condition", conditional ? "composition" : "none");
    kv.set("seed", std::to_string(seed));
    kv.set("output_dir", output_dir);
    return kv;
  }

  /// Applies every entry of `kv`; unknown keys are rejected.
  void apply(const KeyValueConfig& kv) {
    for (const auto& [k, _] : kv.entries()) {
      bool known = false;
      for (const auto& key : keys()) known = known || key == k;
      if (!known) throw ConfigError("unknown config key '" + k + "'");
    }
    if (kv.has("forward")) diffusion.forward = forward_kind_from_string(kv.str("forward"));
    if (kv.has("delta")) diffusion.delta = kv.number("delta");
    if (kv.has("g_schedule")) diffusion.g_schedule = g_schedule_from_string(kv.str("g_schedule"));
    if (kv.has("g0")) diffusion.g0 = kv.number("g0");
    if (kv.has("beta_min")) diffusion.beta_min = kv.number("beta_min");
    if (kv.has("beta_max")) diffusion.beta_max = kv.number("beta_max");
    if (kv.has("sample_steps")) diffusion.steps = static_cast<int>(kv.integer("sample_steps"));
    if (kv.has("t_min")) diffusion.t_min = kv.number("t_min");
    if (kv.has("feature_scale")) diffusion.feature_scale = kv.number("feature_scale");
    if (kv.has("layers")) net.layers = static_cast<int>(kv.integer("layers"));
    if (kv.has("scalar_width")) net.scalar_width = static_cast<int>(kv.integer("scalar_width"));
    if (kv.has("vector_width")) net.vector_width = static_cast<int>(kv.integer("vector_width"));
    if (kv.has("rbf_count")) net.rbf_count = static_cast<int>(kv.integer("rbf_count"));
    if (kv.has("rbf_max")) net.rbf_max = kv.number("rbf_max");
    if (kv.has("time_dim")) net.time_dim = static_cast<int>(kv.integer("time_dim"));
    if (kv.has("condition_embed")) net.condition_embed = static_cast<int>(kv.integer("condition_embed"));
    if (kv.has("condition_hidden")) net.condition_hidden = static_cast<int>(kv.integer("condition_hidden"));
    if (kv.has("sigma_floor")) net.sigma_floor = kv.number("sigma_floor");
    if (kv.has("train_steps")) train.steps = static_cast<int>(kv.integer("train_steps"));
    if (kv.has("batch_size")) train.batch_size = static_cast<int>(kv.integer("batch_size"));
    if (kv.has("lr")) train.lr = kv.number("lr");
    if (kv.has("clip_norm")) train.clip_norm = kv.number("clip_norm");
    if (kv.has("vocabulary")) vocabulary = kv.list("vocabulary");
    if (kv.has("condition")) {
      const std::string c = kv.str("condition");
      if (c != "none" && c != "composition") throw ConfigError("condition must be none or composition");
      conditional = c == "composition";
    }
    if (kv.has("seed")) seed = kv.unsigned_integer("seed");
    if (kv.has("output_dir")) output_dir = kv.str("output_dir");
  }

  void validate() const {
    diffusion.validate();
    train.validate();
    EquiNetConfig n = net;
    n.feature_dim = static_cast<int>(vocabulary.size());
    n.validate();
    (void)vocab();
  }
};

}  // namespace endiff
