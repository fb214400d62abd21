#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "tdlm/error.hpp"

namespace tdlm {

struct RunConfig {
  std::string corpus;
  std::string tree;  // optional prebuilt tree file
  std::string out = "run";
  std::string tokenizer = "bytes";
  int vocab = 0;  // word tokenizer size
  double split = 0.05;
  int S = 256;
  int B = 32;
  long long steps = 5000;
  double lr = 3e-4;
  long long warmup = 250;
  double final_lr_fraction = 0.1;
  double weight_decay = 0.02;
  double clip_norm = 1.0;
  int d = 128;
  int layers = 4;
  int heads = 4;
  int joint_L = 0;
  int K = 16;
  double ratio_min = 0.8;
  double ratio_max = 1.2;
  int emb_dim = 16;
  int window = 2;
  std::string level_weights = "none";
  double clip_cap = 10.0;
  double denom_floor = 1e-4;
  long long eval_interval = 250;
  int eval_samples = 1;
  long long checkpoint_interval = 250;
  long long stop_at = 0;  // halt after this step; 0 runs to the end
  std::string precision = "float";
  std::uint64_t seed = 0;

  void set(const std::string& key, const std::string& value);
  void validate() const;
  void write(std::ostream& out) const;
};

namespace detail {

template <class T>
T parse_value(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out{};
  if (!(in >> out) || !(in >> std::ws).eof()) throw InvalidConfig("config: bad value '" + v + "' for " + key);
  return out;
}

struct ConfigField {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
ConfigField field(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& v) {
            if constexpr (std::is_same_v<T, std::string>) {
              c.*member = v;
            } else {
              c.*member = parse_value<T>("", v);
            }
          },
          [member](const RunConfig& c) {
            std::ostringstream s;
            s << c.*member;
            return s.str();
          }};
}

inline const std::map<std::string, ConfigField>& config_fields() {
  static const std::map<std::string, ConfigField> f{
      {"corpus", field(&RunConfig::corpus)},
      {"tree", field(&RunConfig::tree)},
      {"out", field(&RunConfig::out)},
      {"tokenizer", field(&RunConfig::tokenizer)},
      {"vocab", field(&RunConfig::vocab)},
      {"split", field(&RunConfig::split)},
      {"S", field(&RunConfig::S)},
      {"B", field(&RunConfig::B)},
      {"steps", field(&RunConfig::steps)},
      {"lr", field(&RunConfig::lr)},
      {"warmup", field(&RunConfig::warmup)},
      {"final_lr_fraction", field(&RunConfig::final_lr_fraction)},
      {"weight_decay", field(&RunConfig::weight_decay)},
      {"clip_norm", field(&RunConfig::clip_norm)},
      {"d", field(&RunConfig::d)},
      {"layers", field(&RunConfig::layers)},
      {"heads", field(&RunConfig::heads)},
      {"joint_L", field(&RunConfig::joint_L)},
      {"K", field(&RunConfig::K)},
      {"ratio_min", field(&RunConfig::ratio_min)},
      {"ratio_max", field(&RunConfig::ratio_max)},
      {"emb_dim", field(&RunConfig::emb_dim)},
      {"window", field(&RunConfig::window)},
      {"level_weights", field(&RunConfig::level_weights)},
      {"clip_cap", field(&RunConfig::clip_cap)},
      {"denom_floor", field(&RunConfig::denom_floor)},
      {"eval_interval", field(&RunConfig::eval_interval)},
      {"eval_samples", field(&RunConfig::eval_samples)},
      {"checkpoint_interval", field(&RunConfig::checkpoint_interval)},
      {"stop_at", field(&RunConfig::stop_at)},
      {"precision", field(&RunConfig::precision)},
      {"seed", field(&RunConfig::seed)},
  };
  return f;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& f = detail::config_fields();
  const auto it = f.find(key);
  if (it == f.end()) throw InvalidConfig("config: unknown key '" + key + "'");
  try {
    it->second.set(*this, value);
  } catch (const InvalidConfig&) {
    throw InvalidConfig("config: bad value '" + value + "' for " + key);
  }
}

inline void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw InvalidConfig("config: " + what);
  };
  need(split > 0 && split < 1, "split must lie in (0, 1)");
  need(S > 0 && B > 0 && steps > 0, "S, B and steps must be positive");
  need(lr > 0, "lr must be positive");
  need(warmup >= 0 && warmup <= steps, "warmup must lie in [0, steps]");
  need(final_lr_fraction >= 0 && final_lr_fraction <= 1, "final_lr_fraction must lie in [0, 1]");
  need(weight_decay >= 0 && clip_norm > 0, "weight_decay >= 0 and clip_norm > 0");
  need(d > 0 && layers > 0 && heads > 0 && d % heads == 0, "d, layers, heads positive with heads dividing d");
  need(joint_L >= 0, "joint_L must be >= 0");
  need(K >= 2, "K must be >= 2");
  need(ratio_min > 0 && ratio_min <= 1 && ratio_max >= 1, "ratios must satisfy 0 < ratio_min <= 1 <= ratio_max");
  need(emb_dim > 0 && window > 0, "emb_dim and window must be positive");
  need(clip_cap > 0 && denom_floor > 0, "clip_cap and denom_floor must be positive");
  need(eval_interval > 0 && eval_samples > 0 && checkpoint_interval > 0, "eval and checkpoint intervals must be positive");
  need(stop_at >= 0, "stop_at must be >= 0");
  need(precision == "float" || precision == "double", "precision must be float or double");
  need(tokenizer == "bytes" || tokenizer == "words", "tokenizer must be bytes or words");
  need(tokenizer == "bytes" || vocab >= 3, "word tokenizer needs vocab >= 3");
}

inline void RunConfig::write(std::ostream& out) const {
  for (const auto& [k, f] : detail::config_fields()) out << k << '=' << f.get(*this) << '\n';
}

// key=value lines; '#' starts a comment.
inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("config: expected key=value, got '" + line + "'", lineno);
    try {
      base.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const InvalidConfig& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read " + path);
  return parse_config(in, std::move(base));
}

inline void apply_override(RunConfig& c, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw InvalidConfig("--set expects key=value, got '" + kv + "'");
  c.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

}  // namespace tdlm
