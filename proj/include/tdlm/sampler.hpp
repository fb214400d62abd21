#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tdlm/error.hpp"
#include "tdlm/kernels.hpp"
#include "tdlm/schedule.hpp"
#include "tdlm/tree.hpp"

namespace tdlm {

// Per-level step counts ordered from the top level (H-1) down to level 0.
inline std::vector<int> allocate_steps(int total, int H) {
  if (H < 1) throw InvalidConfig("allocate_steps: H must be >= 1");
  if (total < H) throw InvalidConfig("allocate_steps: total steps " + std::to_string(total) + " < H = " + std::to_string(H));
  std::vector<int> n(static_cast<std::size_t>(H), total / H);
  for (int r = 0; r < total % H; ++r) ++n[static_cast<std::size_t>(H - 1 - r)];
  return n;
}

inline std::vector<int> allocate_steps(int total, int H, const std::vector<int>& custom) {
  if (static_cast<int>(custom.size()) != H) throw InvalidConfig("allocate_steps: need one count per level");
  for (int c : custom)
    if (c < 1) throw InvalidConfig("allocate_steps: every level needs at least one step");
  if (std::accumulate(custom.begin(), custom.end(), 0) != total) {
    throw InvalidConfig("allocate_steps: counts do not sum to the total");
  }
  return custom;
}

// "balanced" or a comma list such as "448,64".
inline std::vector<int> parse_allocation(const std::string& spec, int total, int H) {
  if (spec.empty() || spec == "balanced") return allocate_steps(total, H);
  std::vector<int> v;
  std::stringstream ss(spec);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      v.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw InvalidConfig("allocation: bad entry '" + item + "'");
    }
  }
  return allocate_steps(total, H, v);
}

struct GenerationConfig {
  std::vector<int> allocation;  // n_{H-1}, ..., n_0
  int S = 256;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

// Maps the current states and time to S*K logits.
using LogitFn = std::function<std::vector<double>(std::span<const NodeId>, double)>;

struct TraceStep {
  int step = 0;
  double t = 1.0;               // time after the step
  std::vector<int> histogram;   // positions per height 0..H
  std::vector<std::pair<int, NodeId>> resolved;  // (position, new node)
};

struct GenerationTrace {
  std::vector<TraceStep> steps;
  std::vector<std::vector<NodeId>> states;  // filled when keep_states is set
  bool keep_states = false;

  void write(std::ostream& out) const {
    for (const auto& s : steps) {
      out << s.step << ' ' << s.t << ' ';
      for (std::size_t h = 0; h < s.histogram.size(); ++h) out << (h ? "," : "") << s.histogram[h];
      out << '\n';
    }
  }
};

namespace detail {

inline std::vector<int> height_histogram(const TokenTree& tree, std::span<const NodeId> z) {
  std::vector<int> hist(static_cast<std::size_t>(tree.tree_height() + 1), 0);
  for (NodeId n : z) ++hist[static_cast<std::size_t>(tree.height(n))];
  return hist;
}

// Temperature-scaled softmax over the existing children of u.
inline std::vector<double> child_probabilities(const TokenTree& tree, NodeId u, std::span<const double> logits,
                                               double temperature) {
  const auto& kids = tree.children(u);
  std::vector<double> p(logits.size(), 0.0);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < kids.size(); ++j) mx = std::max(mx, logits[j] / temperature);
  double z = 0;
  for (std::size_t j = 0; j < kids.size(); ++j) {
    p[j] = std::exp(logits[j] / temperature - mx);
    z += p[j];
  }
  for (std::size_t j = 0; j < kids.size(); ++j) p[j] /= z;
  return p;
}

}  // namespace detail

// Coarse-to-fine ancestral generation from the root.
inline std::vector<TokenId> generate(const LogitFn& model, const TokenTree& tree, const NoiseSchedule& sched,
                                     const GenerationConfig& cfg, GenerationTrace* trace = nullptr) {
  const int H = tree.tree_height();
  const int K = tree.branching();
  if (sched.levels() != H) throw ContractViolation("generate: schedule and tree heights differ");
  if (static_cast<int>(cfg.allocation.size()) != H) throw InvalidConfig("generate: allocation needs H entries");
  if (!(cfg.temperature > 0)) throw InvalidConfig("generate: temperature must be positive");
  if (cfg.S < 1) throw InvalidConfig("generate: sequence length must be positive");
  std::vector<NodeId> z(static_cast<std::size_t>(cfg.S), tree.root());
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  int global = 0;
  auto record = [&](double t, std::vector<std::pair<int, NodeId>> resolved) {
    if (!trace) return;
    trace->steps.push_back({global, t, detail::height_histogram(tree, z), std::move(resolved)});
    if (trace->keep_states) trace->states.push_back(z);
  };
  record(1.0, {});

  for (int h = H - 1; h >= 0; --h) {
    const int n = cfg.allocation[static_cast<std::size_t>(H - 1 - h)];
    const double hi = sched.threshold(h + 1), lo = sched.threshold(h);
    for (int k = 0; k < n; ++k) {
      const double t = k == 0 ? hi : hi - (hi - lo) * k / n;
      const double s = k + 1 == n ? lo : hi - (hi - lo) * (k + 1) / n;
      const auto logits = model(z, t);
      if (logits.size() != z.size() * static_cast<std::size_t>(K)) throw ContractViolation("generate: model returned wrong logit count");
      std::vector<std::pair<int, NodeId>> resolved;
      for (std::size_t i = 0; i < z.size(); ++i) {
        if (tree.height(z[i]) != h + 1) continue;
        std::span<const double> row(logits.data() + i * static_cast<std::size_t>(K), static_cast<std::size_t>(K));
        for (double v : row) {
          if (!std::isfinite(v)) {
            throw Error("generate: non-finite logits at step " + std::to_string(global) + ", position " + std::to_string(i) +
                        ", t=" + std::to_string(t));
          }
        }
        const auto p = detail::child_probabilities(tree, z[i], row, cfg.temperature);
        const auto post = reverse_posterior(tree, sched, z[i], s, t, p);
        double u = unif(rng);
        NodeId pick = post.back().first;
        for (const auto& [node, q] : post) {
          if (u < q) {
            pick = node;
            break;
          }
          u -= q;
        }
        if (k + 1 == n && tree.height(pick) == h + 1) {
          // Level endpoint: stay mass is zero analytically; guard floored arithmetic.
          pick = tree.children(z[i])[static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin())];
        }
        if (pick != z[i]) {
          z[i] = pick;
          resolved.emplace_back(static_cast<int>(i), pick);
        }
      }
      ++global;
      record(s, std::move(resolved));
    }
  }
  std::vector<TokenId> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = tree.token_of(z[i]);
  return out;
}

// Every later state of a position descends from every earlier one.
inline bool ancestry_consistent(const TokenTree& tree, const std::vector<std::vector<NodeId>>& states) {
  for (std::size_t k = 1; k < states.size(); ++k) {
    for (std::size_t i = 0; i < states[k].size(); ++i) {
      const NodeId before = states[k - 1][i], after = states[k][i];
      if (tree.height(after) > tree.height(before)) return false;
      if (tree.ancestor(after, tree.height(before)) != before) return false;
    }
  }
  return true;
}

// Point-mass predictor for a fixed target sequence.
inline LogitFn oracle_logit_fn(const TokenTree& tree, std::vector<TokenId> target, double margin = 60.0) {
  return [&tree, target = std::move(target), margin](std::span<const NodeId> z, double) {
    const int K = tree.branching();
    std::vector<double> out(z.size() * static_cast<std::size_t>(K), 0.0);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const int hz = tree.height(z[i]);
      if (hz == 0) continue;
      out[i * static_cast<std::size_t>(K) + static_cast<std::size_t>(tree.child_index(target[i], hz))] = margin;
    }
    return out;
  };
}

}  // namespace tdlm
