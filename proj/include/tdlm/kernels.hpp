#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "tdlm/error.hpp"
#include "tdlm/schedule.hpp"
#include "tdlm/tree.hpp"

namespace tdlm {

// A categorical distribution over a handful of tree nodes.
using NodeDistribution = std::vector<std::pair<NodeId, double>>;

inline double mass_of(const NodeDistribution& d, NodeId n) {
  double m = 0;
  for (const auto& [node, p] : d)
    if (node == n) m += p;
  return m;
}

struct ForwardMarginal {
  int level;
  NodeId lower;  // ancestor at height level, probability alpha
  NodeId upper;  // ancestor at height level + 1, probability 1 - alpha
  double p_lower;
  double p_upper;
};

inline ForwardMarginal forward_marginal(const TokenTree& tree, const NoiseSchedule& sched, TokenId x, double t) {
  const auto a = sched.alpha(t);
  tree.leaf_of(x);
  return {a.level, tree.token_ancestor(x, a.level), tree.token_ancestor(x, a.level + 1), a.alpha, 1.0 - a.alpha};
}

// Independent per-position draw from the forward marginal at time t.
template <class Rng>
std::vector<NodeId> forward_sample(const TokenTree& tree, const NoiseSchedule& sched, std::span<const TokenId> tokens,
                                   double t, Rng& rng) {
  const auto a = sched.alpha(t);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<NodeId> z(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    tree.leaf_of(tokens[i]);
    const bool stay = unif(rng) < a.alpha;
    z[i] = tree.token_ancestor(tokens[i], stay ? a.level : a.level + 1);
  }
  return z;
}

// Sparse square rate matrix: rows[from] lists (to, rate) including the diagonal.
struct RateMatrix {
  int size = 0;
  std::vector<std::vector<std::pair<NodeId, double>>> rows;

  double at(NodeId from, NodeId to) const {
    for (const auto& [c, v] : rows[static_cast<std::size_t>(from)])
      if (c == to) return v;
    return 0.0;
  }
};

// Column-stochastic transition matrix: cols[from] lists (to, probability).
struct TransitionMatrix {
  int size = 0;
  std::vector<std::vector<std::pair<NodeId, double>>> cols;

  static TransitionMatrix identity(int n) {
    TransitionMatrix m;
    m.size = n;
    m.cols.resize(static_cast<std::size_t>(n));
    for (NodeId i = 0; i < n; ++i) m.cols[static_cast<std::size_t>(i)] = {{i, 1.0}};
    return m;
  }

  double at(NodeId to, NodeId from) const {
    double v = 0;
    for (const auto& [r, p] : cols[static_cast<std::size_t>(from)])
      if (r == to) v += p;
    return v;
  }

  // (this * rhs): apply rhs first, then this.
  TransitionMatrix after(const TransitionMatrix& rhs) const {
    TransitionMatrix out;
    out.size = size;
    out.cols.resize(static_cast<std::size_t>(size));
    for (std::size_t j = 0; j < static_cast<std::size_t>(size); ++j) {
      std::map<NodeId, double> acc;
      for (const auto& [k, pk] : rhs.cols[j])
        for (const auto& [r, pr] : cols[static_cast<std::size_t>(k)]) acc[r] += pr * pk;
      out.cols[j].assign(acc.begin(), acc.end());
    }
    return out;
  }
};

// Forward generator Q_t at an interior time: every height-h node leaves to its
// parent at rate -alpha'/alpha; all other rows are zero.
inline RateMatrix generator(const TokenTree& tree, const NoiseSchedule& sched, double t) {
  const auto a = sched.alpha(t);
  if (a.alpha < sched.denom_floor()) {
    throw SingularityError("generator: rates diverge as t approaches the level threshold " +
                           std::to_string(sched.threshold(a.level + 1)) + "; use cumulative()");
  }
  RateMatrix q;
  q.size = tree.node_count();
  q.rows.resize(static_cast<std::size_t>(q.size));
  const double rate = a.dalpha / a.alpha;
  for (NodeId n : tree.level(a.level)) {
    q.rows[static_cast<std::size_t>(n)] = {{n, rate}, {tree.parent(n), -rate}};
  }
  return q;
}

// In-level factor on [lo, hi] inside level h (lo < hi).
inline TransitionMatrix cumulative_in_level(const TokenTree& tree, const NoiseSchedule& sched, int h, double lo,
                                            double hi) {
  auto m = TransitionMatrix::identity(tree.node_count());
  const double stay = sched.alpha_in(h, hi) / sched.alpha_in(h, lo);
  for (NodeId n : tree.level(h)) {
    auto& col = m.cols[static_cast<std::size_t>(n)];
    col = {{n, stay}, {tree.parent(n), 1.0 - stay}};
  }
  return m;
}

// P_{t|s}: composed across every threshold between s and t.
inline TransitionMatrix cumulative(const TokenTree& tree, const NoiseSchedule& sched, double s, double t) {
  if (s > t) throw DomainError("cumulative: s must not exceed t");
  if (s < 0.0 || t > 1.0) throw DomainError("cumulative: times outside [0, 1]");
  auto total = TransitionMatrix::identity(tree.node_count());
  double cur = s;
  while (cur < t) {
    const int h = sched.level_of(cur);
    const double end = std::min(t, sched.threshold(h + 1));
    if (end > cur) total = cumulative_in_level(tree, sched, h, cur, end).after(total);
    if (h == sched.levels() - 1 && end >= t) break;
    cur = end;
  }
  return total;
}

// In-level reverse kernel p(z_s | z_t) from predicted child probabilities of
// the absorbed state. child_probs has K slots; nonexistent children must carry
// zero mass.
inline NodeDistribution reverse_posterior(const TokenTree& tree, const NoiseSchedule& sched, NodeId z_t, double s,
                                          double t, std::span<const double> child_probs) {
  if (s > t) throw DomainError("reverse_posterior: s must not exceed t");
  if (s == t) return {{z_t, 1.0}};
  const int h = sched.level_of(s);
  if (t > sched.threshold(h + 1) + 1e-12) throw DomainError("reverse_posterior: s and t lie in different levels");
  const int hz = tree.height(z_t);
  if (hz == h) return {{z_t, 1.0}};
  if (hz != h + 1) throw ContractViolation("reverse_posterior: state height outside the active level");
  if (static_cast<int>(child_probs.size()) != tree.branching()) {
    throw ContractViolation("reverse_posterior: child_probs must have K entries");
  }
  const auto& kids = tree.children(z_t);
  for (std::size_t j = kids.size(); j < child_probs.size(); ++j) {
    if (child_probs[j] != 0.0) throw ContractViolation("reverse_posterior: mass on a nonexistent child slot");
  }

  const double as = sched.alpha_in(h, s), at = sched.alpha_in(h, t);
  const double denom = std::max(1.0 - at, sched.denom_floor());
  NodeDistribution out;
  double total = 0;
  for (std::size_t j = 0; j < kids.size(); ++j) {
    const double p = child_probs[j] * (as - at) / denom;
    if (p > 0) {
      out.emplace_back(kids[j], p);
      total += p;
    }
  }
  const double stay = (1.0 - as) / denom;
  if (stay > 0) {
    out.emplace_back(z_t, stay);
    total += stay;
  }
  if (total <= 0) return {{z_t, 1.0}};
  // Only differs from 1 when the denominator floor is active.
  if (std::abs(total - 1.0) > 0) {
    for (auto& e : out) e.second /= total;
  }
  return out;
}

// Child probabilities for an absorbed node at time t.
using ChildPredictor = std::function<std::vector<double>(NodeId absorbed, double t)>;

// General reverse kernel p(z_s | z_t): threshold by threshold, each segment
// uses the in-level kernel with the predictor evaluated at its upper end.
inline NodeDistribution reverse_transition(const TokenTree& tree, const NoiseSchedule& sched, NodeId z_t, double s,
                                           double t, const ChildPredictor& predictor) {
  if (s > t) throw DomainError("reverse_transition: s must not exceed t");
  std::map<NodeId, double> dist{{z_t, 1.0}};
  double cur = t;
  while (cur > s) {
    int h = sched.level_of(cur);
    if (cur <= sched.threshold(h)) --h;
    const double lo = std::max(s, sched.threshold(h));
    std::map<NodeId, double> next;
    for (const auto& [node, p] : dist) {
      if (tree.height(node) != h + 1) {
        next[node] += p;
        continue;
      }
      const auto probs = predictor(node, cur);
      for (const auto& [n2, q] : reverse_posterior(tree, sched, node, lo, cur, probs)) next[n2] += p * q;
    }
    dist.swap(next);
    cur = lo;
  }
  return {dist.begin(), dist.end()};
}

// Predictor that puts all mass on the child along token x's path.
inline ChildPredictor ground_truth_predictor(const TokenTree& tree, TokenId x) {
  return [&tree, x](NodeId u, double) {
    std::vector<double> p(static_cast<std::size_t>(tree.branching()), 0.0);
    const int hu = tree.height(u);
    if (tree.token_ancestor(x, hu) == u) {
      p[static_cast<std::size_t>(tree.child_index(x, hu))] = 1.0;
    } else {
      const auto& kids = tree.children(u);
      for (std::size_t j = 0; j < kids.size(); ++j) p[j] = 1.0 / static_cast<double>(kids.size());
    }
    return p;
  };
}

// max_z | sum_{z_t} q_t(z_t|x) p(z | z_t) - q_s(z|x) | under the ground-truth predictor.
inline double reverse_consistency_check(const TokenTree& tree, const NoiseSchedule& sched, TokenId x, double s,
                                        double t) {
  const auto qt = forward_marginal(tree, sched, x, t);
  const auto qs = forward_marginal(tree, sched, x, s);
  const auto pred = ground_truth_predictor(tree, x);
  std::map<NodeId, double> mix;
  for (const auto& [zt, w] : {std::pair{qt.lower, qt.p_lower}, std::pair{qt.upper, qt.p_upper}}) {
    if (w == 0) continue;
    for (const auto& [z, p] : reverse_transition(tree, sched, zt, s, t, pred)) mix[z] += w * p;
  }
  std::map<NodeId, double> target;
  target[qs.lower] += qs.p_lower;
  target[qs.upper] += qs.p_upper;
  double dev = 0;
  for (const auto& [z, p] : mix) dev = std::max(dev, std::abs(p - (target.count(z) ? target[z] : 0.0)));
  for (const auto& [z, p] : target) dev = std::max(dev, std::abs(p - (mix.count(z) ? mix[z] : 0.0)));
  return dev;
}

}  // namespace tdlm
