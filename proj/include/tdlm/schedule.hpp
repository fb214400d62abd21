#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "tdlm/error.hpp"

namespace tdlm {

enum class LevelWeightKind { none, linear, exponential };

struct LevelWeightConfig {
  LevelWeightKind kind = LevelWeightKind::none;
  double gamma = 0.0;
};

inline LevelWeightConfig parse_level_weights(const std::string& spec) {
  if (spec.empty() || spec == "none") return {};
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const double gamma = colon == std::string::npos ? 1.0 : std::stod(spec.substr(colon + 1));
  if (gamma < 0) throw InvalidConfig("level weights: gamma must be nonnegative");
  if (kind == "linear" || kind == "lin") return {LevelWeightKind::linear, gamma};
  if (kind == "exponential" || kind == "exp") return {LevelWeightKind::exponential, gamma};
  throw InvalidConfig("level weights: unknown kind '" + kind + "'");
}

// Per-level multipliers w(beta), beta = 0..H-1, divided by their mean.
inline std::vector<double> height_weights(int H, const LevelWeightConfig& cfg) {
  if (H < 1) throw InvalidConfig("height_weights: H must be >= 1");
  std::vector<double> w(static_cast<std::size_t>(H), 1.0);
  if (cfg.kind == LevelWeightKind::none) return w;
  for (int b = 0; b < H; ++b) {
    if (cfg.kind == LevelWeightKind::exponential) {
      w[static_cast<std::size_t>(b)] = std::exp(cfg.gamma * b);
    } else if (H > 1) {
      w[static_cast<std::size_t>(b)] = 1.0 + cfg.gamma * b / (H - 1);
    }
  }
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / H;
  for (double& x : w) x /= mean;
  return w;
}

struct AlphaValue {
  int level;
  double alpha;
  double dalpha;  // d alpha / dt
};

struct TimeWeight {
  double raw;
  double clipped;
};

// Uniform level thresholds t_h = h / H with a linear in-level schedule:
// alpha(t) = (t_{h+1} - t) / (t_{h+1} - t_h).
class NoiseSchedule {
 public:
  explicit NoiseSchedule(int H, double clip_cap = 10.0, double denom_floor = 1e-4)
      : H_(H), clip_(clip_cap), floor_(denom_floor) {
    if (H < 1) throw InvalidConfig("noise schedule: H = 0 gives a degenerate schedule");
    if (!(clip_cap > 0)) throw InvalidConfig("noise schedule: clip cap must be positive");
    if (!(denom_floor > 0)) throw InvalidConfig("noise schedule: denominator floor must be positive");
    t_.resize(static_cast<std::size_t>(H + 1));
    for (int h = 0; h <= H; ++h) t_[static_cast<std::size_t>(h)] = static_cast<double>(h) / H;
    t_.back() = 1.0;
  }

  int levels() const { return H_; }
  double clip_cap() const { return clip_; }
  double denom_floor() const { return floor_; }
  const std::vector<double>& thresholds() const { return t_; }
  double threshold(int h) const { return t_.at(static_cast<std::size_t>(h)); }
  double level_length(int h) const { return threshold(h + 1) - threshold(h); }

  // h with t in [t_h, t_{h+1}); H-1 at t = 1.
  int level_of(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("level_of: t outside [0, 1]");
    const auto it = std::upper_bound(t_.begin(), t_.end(), t);
    const int h = static_cast<int>(it - t_.begin()) - 1;
    return std::min(h, H_ - 1);
  }

  // In-level schedule of a specific level, evaluated anywhere in its interval.
  double alpha_in(int h, double t) const {
    const double hi = threshold(h + 1), lo = threshold(h);
    if (t <= lo) return 1.0;
    if (t >= hi) return 0.0;
    return (hi - t) / (hi - lo);
  }
  double dalpha_in(int h) const { return -1.0 / level_length(h); }

  AlphaValue alpha(double t) const {
    const int h = level_of(t);
    return {h, alpha_in(h, t), dalpha_in(h)};
  }

  // Integrand weight of the in-level ELBO, -alpha'/(1-alpha), with the
  // denominator floored. Because t ~ U(0, 1) visits level h with probability
  // equal to its length, E_t[1{absorbed} * raw * CE] sums the per-level
  // integrals. Clipping caps the level-normalized weight 1/(1-alpha).
  TimeWeight time_weight(double t) const {
    const auto a = alpha(t);
    const double inv = 1.0 / std::max(1.0 - a.alpha, floor_);
    const double rate = -a.dalpha;
    return {rate * inv, rate * std::min(inv, clip_)};
  }

 private:
  int H_;
  double clip_;
  double floor_;
  std::vector<double> t_;
};

}  // namespace tdlm
