#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "chsnet/data.hpp"
#include "chsnet/network.hpp"

namespace chs {

/// Flat `key = value` text; '#' starts a comment. Keys keep file order only
/// for error messages, lookups are by name.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "config") {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    for (int lineno = 1; std::getline(in, line); ++lineno) {
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      const std::string key = trim(line.substr(0, eq));
      if (eq == std::string::npos) {
        if (!key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
        continue;
      }
      if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      if (kv.values_.count(key)) throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key " + key);
      kv.values_[key] = trim(line.substr(eq + 1));
    }
    return kv;
  }

  static KeyValues load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  /// Sorted `key = value` lines.
  std::string str() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  /// Rejects keys nobody consumed, so typos do not pass silently.
  void check_all_used() const {
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }

  template <typename V>
  void read(const std::string& key, V& out) const {
    auto it = values_.find(key);
    if (it == values_.end()) return;
    used_[key] = true;
    out = convert<V>(key, it->second);
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  template <typename V>
  static V convert(const std::string& key, const std::string& v) {
    auto bad = [&](const char* what) { return ConfigError("config key '" + key + "': expected " + what + ", got '" + v + "'"); };
    if constexpr (std::is_same_v<V, bool>) {
      if (v == "true" || v == "1") return true;
      if (v == "false" || v == "0") return false;
      throw bad("true|false");
    } else if constexpr (std::is_same_v<V, std::string>) {
      return v;
    } else if constexpr (std::is_integral_v<V>) {
      V out{};
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
      if (ec != std::errc() || p != v.data() + v.size()) throw bad("an integer");
      return out;
    } else {
      try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw bad("a number");
        return static_cast<V>(d);
      } catch (const std::logic_error&) {
        throw bad("a number");
      }
    }
  }

  std::map<std::string, std::string> values_;
  mutable std::map<std::string, bool> used_;
};

inline std::string fmt_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline const char* coupling_name(Coupling c) {
  switch (c) {
    case Coupling::masked_slice: return "masked_slice";
    case Coupling::lung_map: return "lung_map";
    case Coupling::stacked: return "stacked";
  }
  return "?";
}

inline void read_network(const KeyValues& kv, NetworkConfig& cfg, ModelKind& kind) {
  std::string s;
  if (kv.has("net.model")) {
    kv.read("net.model", s);
    if (s == "chs") kind = ModelKind::chs;
    else if (s == "raiu") kind = ModelKind::raiu;
    else throw ConfigError("net.model must be chs|raiu, got '" + s + "'");
  }
  kv.read("net.stages", cfg.stages);
  kv.read("net.base_filters", cfg.base_filters);
  kv.read("net.depth_growth", cfg.depth_growth);
  kv.read("net.input_w", cfg.input_w);
  kv.read("net.input_h", cfg.input_h);
  kv.read("net.input_channels", cfg.input_channels);
  kv.read("net.use_rib", cfg.use_rib);
  kv.read("net.use_hybrid_pool", cfg.use_hybrid_pool);
  kv.read("net.use_ssd", cfg.use_ssd);
  kv.read("net.use_residual", cfg.use_residual);
  kv.read("net.dropout_rate", cfg.dropout_rate);
  kv.read("net.seed", cfg.seed);
  if (kv.has("net.gate_activation")) {
    kv.read("net.gate_activation", s);
    if (s == "sigmoid") cfg.gate_activation = ops::Activation::sigmoid;
    else if (s == "relu") cfg.gate_activation = ops::Activation::relu;
    else throw ConfigError("net.gate_activation must be sigmoid|relu, got '" + s + "'");
  }
  if (kv.has("net.coupling")) {
    kv.read("net.coupling", s);
    if (s == "masked_slice") cfg.coupling = Coupling::masked_slice;
    else if (s == "lung_map") cfg.coupling = Coupling::lung_map;
    else if (s == "stacked") cfg.coupling = Coupling::stacked;
    else throw ConfigError("net.coupling must be masked_slice|lung_map|stacked, got '" + s + "'");
  }
  cfg.validate();
}

inline void write_network(KeyValues& kv, const NetworkConfig& cfg, ModelKind kind) {
  kv.set("net.model", kind == ModelKind::chs ? "chs" : "raiu");
  kv.set("net.stages", std::to_string(cfg.stages));
  kv.set("net.base_filters", std::to_string(cfg.base_filters));
  kv.set("net.depth_growth", fmt_real(cfg.depth_growth));
  kv.set("net.input_w", std::to_string(cfg.input_w));
  kv.set("net.input_h", std::to_string(cfg.input_h));
  kv.set("net.input_channels", std::to_string(cfg.input_channels));
  kv.set("net.use_rib", cfg.use_rib ? "true" : "false");
  kv.set("net.use_hybrid_pool", cfg.use_hybrid_pool ? "true" : "false");
  kv.set("net.use_ssd", cfg.use_ssd ? "true" : "false");
  kv.set("net.use_residual", cfg.use_residual ? "true" : "false");
  kv.set("net.dropout_rate", fmt_real(cfg.dropout_rate));
  kv.set("net.seed", std::to_string(cfg.seed));
  kv.set("net.gate_activation", cfg.gate_activation == ops::Activation::sigmoid ? "sigmoid" : "relu");
  kv.set("net.coupling", coupling_name(cfg.coupling));
}

inline void read_split(const KeyValues& kv, SplitOptions& opt) {
  kv.read("data.test_fraction", opt.test_fraction);
  kv.read("data.val_fraction", opt.val_fraction);
  kv.read("data.split_seed", opt.seed);
  kv.read("data.balance", opt.balance);
}

inline void write_split(KeyValues& kv, const SplitOptions& opt) {
  kv.set("data.test_fraction", fmt_real(opt.test_fraction));
  kv.set("data.val_fraction", fmt_real(opt.val_fraction));
  kv.set("data.split_seed", std::to_string(opt.seed));
  kv.set("data.balance", opt.balance ? "true" : "false");
}

}  // namespace chs
