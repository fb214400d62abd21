#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <memory>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tdlm/error.hpp"
#include "tdlm/kernels.hpp"
#include "tdlm/loss.hpp"
#include "tdlm/parallel.hpp"
#include "tdlm/schedule.hpp"
#include "tdlm/tree.hpp"
#include "tdlm/tree_build.hpp"

namespace tdlm {

struct CheckResult {
  std::string name;
  double measured = 0;
  double threshold = 0;
  bool pass = false;

  std::string line() const {
    std::ostringstream s;
    s << "CHECK " << name << ' ' << std::setprecision(6) << measured << ' ' << threshold << ' ' << (pass ? "PASS" : "FAIL");
    return s.str();
  }
};

using Report = std::vector<CheckResult>;

inline bool all_pass(const Report& r) {
  return std::all_of(r.begin(), r.end(), [](const CheckResult& c) { return c.pass; });
}

// Smooth time-dependent softmax over existing children: logits a + b*t.
inline ChildPredictor random_plugin_predictor(const TokenTree& tree, std::uint64_t seed) {
  const int K = tree.branching();
  auto coef = std::make_shared<std::vector<double>>(static_cast<std::size_t>(tree.node_count() * K * 2));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  for (double& c : *coef) c = nd(rng);
  return [&tree, coef, K](NodeId u, double t) {
    const auto& kids = tree.children(u);
    std::vector<double> p(static_cast<std::size_t>(K), 0.0);
    double z = 0;
    for (std::size_t j = 0; j < kids.size(); ++j) {
      const std::size_t o = (static_cast<std::size_t>(u) * static_cast<std::size_t>(K) + j) * 2;
      p[j] = std::exp((*coef)[o] + (*coef)[o + 1] * t);
      z += p[j];
    }
    for (auto& v : p) v /= z;
    return p;
  };
}

// Reference trees for the verify suites.
inline TokenTree six_token_tree() {
  TokenEmbeddings emb(6, 1);
  const double xs[] = {0.0, 1.0, 2.0, 10.0, 11.0, 12.0};
  for (int i = 0; i < 6; ++i) emb.row(i)[0] = xs[i];
  return build_tree(emb, {2, 0.8, 1.2, 7, 25});
}

inline TokenTree sixteen_leaf_tree() {
  TokenEmbeddings emb(16, 2);
  std::mt19937_64 rng(16);
  std::normal_distribution<double> nd;
  for (double& v : emb.data) v = nd(rng);
  return build_tree(emb, {3, 0.8, 1.2, 16, 25});
}

namespace oracle_detail {

// Uniform thresholds and the linear in-level schedule, restated locally.
struct Level {
  int h;
  double lo, hi;
  double alpha(double t) const { return std::clamp((hi - t) / (hi - lo), 0.0, 1.0); }
};

inline Level level_at(int H, double t) {
  int h = std::min(H - 1, static_cast<int>(std::floor(t * H)));
  h = std::max(h, 0);
  return {h, static_cast<double>(h) / H, h + 1 == H ? 1.0 : static_cast<double>(h + 1) / H};
}

inline Level level_index(int H, int h) { return {h, static_cast<double>(h) / H, h + 1 == H ? 1.0 : static_cast<double>(h + 1) / H}; }

using Dense = std::vector<double>;  // N x N, row = to, col = from

// dP/dt = Q_t^T P with Q_t(n, n) = -r, Q_t(n, parent) = r for height-h nodes.
inline void kolmogorov_rhs(const TokenTree& tree, const Level& lv, double t, const Dense& P, Dense& out) {
  const int N = tree.node_count();
  std::fill(out.begin(), out.end(), 0.0);
  const double r = 1.0 / (lv.hi - t);
  for (NodeId n : tree.level(lv.h)) {
    const NodeId p = tree.parent(n);
    for (int c = 0; c < N; ++c) {
      const double v = r * P[static_cast<std::size_t>(n) * N + c];
      out[static_cast<std::size_t>(n) * N + c] -= v;
      out[static_cast<std::size_t>(p) * N + c] += v;
    }
  }
}

}  // namespace oracle_detail

// Max entrywise gap between RK4 on the forward equation and cumulative(s, t).
inline double ode_error(const TokenTree& tree, const NoiseSchedule& sched, double s, double t, double step) {
  using namespace oracle_detail;
  const int N = tree.node_count();
  const auto lv = level_at(sched.levels(), s);
  Dense P(static_cast<std::size_t>(N) * N, 0.0);
  for (int i = 0; i < N; ++i) P[static_cast<std::size_t>(i) * N + i] = 1.0;
  if (t > s) {
    const int n = std::max(1, static_cast<int>(std::ceil((t - s) / step - 1e-9)));
    const double dt = (t - s) / n;
    Dense k1(P.size()), k2(P.size()), k3(P.size()), k4(P.size()), tmp(P.size());
    for (int i = 0; i < n; ++i) {
      const double tau = s + i * dt;
      kolmogorov_rhs(tree, lv, tau, P, k1);
      for (std::size_t j = 0; j < P.size(); ++j) tmp[j] = P[j] + 0.5 * dt * k1[j];
      kolmogorov_rhs(tree, lv, tau + 0.5 * dt, tmp, k2);
      for (std::size_t j = 0; j < P.size(); ++j) tmp[j] = P[j] + 0.5 * dt * k2[j];
      kolmogorov_rhs(tree, lv, tau + 0.5 * dt, tmp, k3);
      for (std::size_t j = 0; j < P.size(); ++j) tmp[j] = P[j] + dt * k3[j];
      kolmogorov_rhs(tree, lv, tau + dt, tmp, k4);
      for (std::size_t j = 0; j < P.size(); ++j) P[j] += dt / 6.0 * (k1[j] + 2 * k2[j] + 2 * k3[j] + k4[j]);
    }
  }
  const auto closed = cumulative(tree, sched, s, t);
  double err = 0;
  for (NodeId to = 0; to < N; ++to)
    for (NodeId from = 0; from < N; ++from)
      err = std::max(err, std::abs(P[static_cast<std::size_t>(to) * N + from] - closed.at(to, from)));
  return err;
}

// In-level pairs stop 1% of a level short of its upper threshold, where the
// forward rate 1/(t_{h+1} - t) stays resolvable at the RK4 step.
inline Report verify_cumulative_vs_ode(const TokenTree& tree, const NoiseSchedule& sched, int trials,
                                       std::uint64_t seed = 1, double step = 1e-4) {
  if (tree.node_count() > 40) throw InvalidInput("verify_cumulative_vs_ode: at most 40 nodes");
  const int H = sched.levels();
  std::vector<double> errs(static_cast<std::size_t>(trials));
  parallel_for(trials, [&](int i) {
    std::mt19937_64 rng(seed * 1000003 + static_cast<std::uint64_t>(i));
    const auto lv = oracle_detail::level_index(H, std::uniform_int_distribution<int>(0, H - 1)(rng));
    std::uniform_real_distribution<double> u(lv.lo, lv.hi - 0.01 * (lv.hi - lv.lo));
    double s = u(rng), t = u(rng);
    if (s > t) std::swap(s, t);
    errs[static_cast<std::size_t>(i)] = ode_error(tree, sched, s, t, step);
  });
  const double worst = errs.empty() ? 0.0 : *std::max_element(errs.begin(), errs.end());
  return {{"kolmogorov_ode", worst, 1e-6, worst <= 1e-6}};
}

// Composition P_{u|s} = P_{u|t} P_{t|s} across thresholds, and the leaf
// columns of P_{t|0} against the forward marginal.
inline Report verify_chapman_kolmogorov(const TokenTree& tree, const NoiseSchedule& sched, int trials,
                                        std::uint64_t seed = 2) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const int N = tree.node_count();
  double comp = 0, column = 0;
  for (int i = 0; i < trials; ++i) {
    double a[3] = {u01(rng), u01(rng), u01(rng)};
    std::sort(a, a + 3);
    const auto direct = cumulative(tree, sched, a[0], a[2]);
    const auto composed = cumulative(tree, sched, a[1], a[2]).after(cumulative(tree, sched, a[0], a[1]));
    for (NodeId to = 0; to < N; ++to)
      for (NodeId from = 0; from < N; ++from) comp = std::max(comp, std::abs(direct.at(to, from) - composed.at(to, from)));
    const auto p0 = cumulative(tree, sched, 0.0, a[1]);
    for (TokenId x = 0; x < tree.vocab_size(); ++x) {
      const auto fm = forward_marginal(tree, sched, x, a[1]);
      const NodeId leaf = tree.leaf_of(x);
      for (NodeId to = 0; to < N; ++to) {
        double want = 0;
        if (to == fm.lower) want += fm.p_lower;
        if (to == fm.upper) want += fm.p_upper;
        column = std::max(column, std::abs(p0.at(to, leaf) - want));
      }
    }
  }
  return {{"chapman_kolmogorov", comp, 1e-12, comp <= 1e-12}, {"marginal_column", column, 1e-12, column <= 1e-12}};
}

// Gillespie simulation: within level h the jump time solves -log alpha(tau) = E
// with E ~ Exp(1), i.e. tau = t_{h+1} - (t_{h+1} - t_h) e^{-E}.
inline Report verify_marginals_mc(const TokenTree& tree, const NoiseSchedule& sched, int trajectories,
                                  std::vector<double> probes = {0.1, 0.3, 0.55, 0.7, 0.9}, std::uint64_t seed = 3) {
  const int H = sched.levels();
  const int shards = 16;
  const std::size_t P = probes.size();
  std::vector<std::vector<long long>> lower(shards, std::vector<long long>(P, 0));
  std::vector<long long> off_path(shards, 0);
  parallel_for(shards, [&](int sh) {
    std::mt19937_64 rng(seed * 7919 + static_cast<std::uint64_t>(sh));
    std::exponential_distribution<double> ex(1.0);
    std::uniform_int_distribution<int> tok(0, tree.vocab_size() - 1);
    const int n = trajectories / shards + (sh < trajectories % shards ? 1 : 0);
    std::vector<double> jump(static_cast<std::size_t>(H));
    for (int k = 0; k < n; ++k) {
      const TokenId x = tok(rng);
      for (int h = 0; h < H; ++h) {
        const auto lv = oracle_detail::level_index(H, h);
        jump[static_cast<std::size_t>(h)] = lv.hi - (lv.hi - lv.lo) * std::exp(-ex(rng));
      }
      for (std::size_t p = 0; p < P; ++p) {
        const double t = probes[p];
        int height = 0;
        while (height < H && jump[static_cast<std::size_t>(height)] <= t) ++height;
        const NodeId state = tree.token_ancestor(x, height);
        const auto fm = forward_marginal(tree, sched, x, t);
        if (state == fm.lower) {
          ++lower[static_cast<std::size_t>(sh)][p];
        } else if (state != fm.upper) {
          ++off_path[static_cast<std::size_t>(sh)];
        }
      }
    }
  });
  double worst = 0;
  long long bad = 0;
  for (int sh = 0; sh < shards; ++sh) bad += off_path[static_cast<std::size_t>(sh)];
  for (std::size_t p = 0; p < P; ++p) {
    long long c = 0;
    for (int sh = 0; sh < shards; ++sh) c += lower[static_cast<std::size_t>(sh)][p];
    const double f = static_cast<double>(c) / trajectories;
    const double q = forward_marginal(tree, sched, 0, probes[p]).p_lower;
    const double sd = std::sqrt(q * (1 - q) / trajectories);
    const double z = sd > 0 ? std::abs(f - q) / sd : (f == q ? 0.0 : HUGE_VAL);
    worst = std::max(worst, z);
  }
  if (bad > 0) worst = HUGE_VAL;
  return {{"marginals_mc_sigma", worst, 4.0, worst <= 4.0}};
}

// Literal Bayes quotient q_{t|s}(z_t|z_s) q_s(z_s|x_theta) / q_t(z_t|x_theta),
// enumerated over every state of the level.
inline Report verify_reverse_bayes(const TokenTree& tree, const NoiseSchedule& sched, int cases, std::uint64_t seed = 4) {
  const int H = sched.levels();
  const int K = tree.branching();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  double worst = 0;
  for (int c = 0; c < cases; ++c) {
    const auto lv = oracle_detail::level_index(H, std::uniform_int_distribution<int>(0, H - 1)(rng));
    const auto& parents = tree.level(lv.h + 1);
    const NodeId u = parents[std::uniform_int_distribution<std::size_t>(0, parents.size() - 1)(rng)];
    const auto& kids = tree.children(u);
    std::vector<double> probs(static_cast<std::size_t>(K), 0.0);
    double z = 0;
    for (std::size_t j = 0; j < kids.size(); ++j) z += probs[j] = -std::log(u01(rng));
    for (auto& p : probs) p /= z;
    double s, t, as, at;
    do {
      s = lv.lo + (lv.hi - lv.lo) * u01(rng);
      t = lv.lo + (lv.hi - lv.lo) * u01(rng);
      if (s > t) std::swap(s, t);
      as = lv.alpha(s);
      at = lv.alpha(t);
    } while (!(1.0 - at >= 1e-3 && as > at));
    auto q_s = [&](NodeId n) {
      double m = 0;
      for (std::size_t j = 0; j < kids.size(); ++j) {
        if (n == kids[j]) m += probs[j] * as;
        if (n == u) m += probs[j] * (1.0 - as);
      }
      return m;
    };
    auto q_ts = [&](NodeId to, NodeId from) {
      if (from == to) return tree.height(from) == lv.h ? at / as : 1.0;
      if (tree.height(from) == lv.h && tree.parent(from) == to) return 1.0 - at / as;
      return 0.0;
    };
    double q_t = 0;
    std::vector<NodeId> states = tree.level(lv.h);
    states.insert(states.end(), parents.begin(), parents.end());
    for (NodeId n : states) q_t += q_ts(u, n) * q_s(n);
    const auto post = reverse_posterior(tree, sched, u, s, t, probs);
    for (NodeId n : states) worst = std::max(worst, std::abs(q_ts(u, n) * q_s(n) / q_t - mass_of(post, n)));
  }
  return {{"reverse_bayes", worst, 1e-12, worst <= 1e-12}};
}

// Ground-truth reverse kernels against the forward marginals, for in-level
// pairs and pairs spanning two thresholds.
inline Report verify_reverse_factorization(const TokenTree& tree, const NoiseSchedule& sched, int cases,
                                           std::uint64_t seed = 5) {
  const int H = sched.levels();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  double in_level = 0, crossing = 0;
  for (int c = 0; c < cases; ++c) {
    const TokenId x = std::uniform_int_distribution<int>(0, tree.vocab_size() - 1)(rng);
    const int h = std::uniform_int_distribution<int>(0, H - 1)(rng);
    const auto lv = oracle_detail::level_index(H, h);
    double s = lv.lo + (lv.hi - lv.lo) * u01(rng), t = lv.lo + (lv.hi - lv.lo) * u01(rng);
    if (s > t) std::swap(s, t);
    in_level = std::max(in_level, reverse_consistency_check(tree, sched, x, s, t));
    if (H >= 3) {
      const int lo_level = std::uniform_int_distribution<int>(0, H - 3)(rng);
      const auto a = oracle_detail::level_index(H, lo_level), b = oracle_detail::level_index(H, lo_level + 2);
      const double s2 = a.lo + (a.hi - a.lo) * u01(rng), t2 = b.lo + (b.hi - b.lo) * u01(rng);
      crossing = std::max(crossing, reverse_consistency_check(tree, sched, x, s2, t2));
    }
  }
  Report r{{"reverse_in_level", in_level, 1e-12, in_level <= 1e-12}};
  if (H >= 3) r.push_back({"reverse_two_thresholds", crossing, 1e-12, crossing <= 1e-12});
  return r;
}

inline Report verify_elbo_closed_form(const TokenTree& tree, const NoiseSchedule& sched, int predictors,
                                      std::uint64_t seed = 6, int panels = 1000) {
  const int H = sched.levels();
  const int V = tree.vocab_size();
  std::vector<double> delta(static_cast<std::size_t>(predictors), 0.0);
  parallel_for(predictors, [&](int p) {
    const auto pred = random_plugin_predictor(tree, seed * 104729 + static_cast<std::uint64_t>(p));
    double d = 0;
    for (TokenId x = 0; x < V; ++x) {
      for (int h = 0; h < H; ++h) {
        const double cf = closed_form_level_elbo(pred, tree, sched, x, h, panels);
        const double l2 = generic_oracle_elbo(pred, tree, sched, x, h, panels);
        d = std::max(d, std::abs(l2 - (cf + generic_elbo_remainder(sched, h, panels))));
      }
    }
    delta[static_cast<std::size_t>(p)] = d;
  });
  double rem = 0;
  for (int h = 0; h < H; ++h) rem = std::max(rem, std::abs(generic_elbo_remainder(sched, h, panels)));
  const double worst = delta.empty() ? 0.0 : *std::max_element(delta.begin(), delta.end());
  return {{"elbo_closed_form", worst, 1e-6, worst <= 1e-6}, {"elbo_remainder", rem, 1e-8, rem <= 1e-8}};
}

// Reverse CTMC inside level h from the absorbed node u, started at t_{h+1} and
// stopped at t_end, by Euler steps of the backward rate p_j (-alpha') / (1 - alpha).
// Measured is the worst bias-corrected z-score max_j (|f_j - e_j| - b_j) / sigma_j,
// where b_j is the exact deviation of the discrete scheme from the continuum.
inline Report verify_backward_rate(const TokenTree& tree, const NoiseSchedule& sched, NodeId u,
                                   std::vector<double> child_probs, int trajectories, double t_end,
                                   double dt = 1e-3, std::uint64_t seed = 7) {
  const int h = tree.height(u) - 1;
  if (h < 0) throw InvalidInput("verify_backward_rate: u must be an internal node");
  const auto lv = oracle_detail::level_index(sched.levels(), h);
  if (!(t_end > lv.lo && t_end < lv.hi)) throw InvalidInput("verify_backward_rate: t_end must lie inside the level");
  const auto& kids = tree.children(u);
  const std::size_t C = kids.size();
  const int steps = static_cast<int>(std::lround((lv.hi - t_end) / dt));
  const double step = (lv.hi - t_end) / steps;
  std::vector<double> hazard(static_cast<std::size_t>(steps));
  double survive = 1.0;
  for (int k = 0; k < steps; ++k) {
    const double tau = lv.hi - k * step;
    hazard[static_cast<std::size_t>(k)] = step / (tau - lv.lo);  // (-alpha') dt / (1 - alpha)
    survive *= 1.0 - hazard[static_cast<std::size_t>(k)];
  }
  const int shards = 16;
  std::vector<std::vector<long long>> counts(shards, std::vector<long long>(C + 1, 0));
  parallel_for(shards, [&](int sh) {
    std::mt19937_64 rng(seed * 31337 + static_cast<std::uint64_t>(sh));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const int n = trajectories / shards + (sh < trajectories % shards ? 1 : 0);
    auto& cnt = counts[static_cast<std::size_t>(sh)];
    for (int r = 0; r < n; ++r) {
      std::size_t where = C;
      for (int k = 0; k < steps && where == C; ++k) {
        double x = u01(rng);
        const double hz = hazard[static_cast<std::size_t>(k)];
        for (std::size_t j = 0; j < C; ++j) {
          const double pj = child_probs[j] * hz;
          if (x < pj) {
            where = j;
            break;
          }
          x -= pj;
        }
      }
      ++cnt[where];
    }
  });
  const auto post = reverse_posterior(tree, sched, u, t_end, lv.hi, child_probs);
  double worst = 0;
  for (std::size_t j = 0; j <= C; ++j) {
    long long c = 0;
    for (const auto& cnt : counts) c += cnt[j];
    const double f = static_cast<double>(c) / trajectories;
    const NodeId node = j < C ? kids[j] : u;
    const double exact = mass_of(post, node);
    const double discrete = j < C ? child_probs[j] * (1.0 - survive) : survive;
    const double bias = std::abs(discrete - exact);
    const double sd = std::sqrt(std::max(exact * (1 - exact), 0.0) / trajectories);
    const double excess = std::max(0.0, std::abs(f - exact) - bias);
    const double z = sd > 0 ? excess / sd : (excess == 0 ? 0.0 : HUGE_VAL);
    worst = std::max(worst, z);
  }
  return {{"backward_rate_sigma", worst, 4.0, worst <= 4.0}};
}

struct ParamAccounting {
  long long head_vocab;
  long long head_tree;
  double logits_vocab_gib;
  double logits_tree_gib;
};

inline ParamAccounting param_accounting(long long d, long long V, long long K, long long B, long long S) {
  const double gib = 1024.0 * 1024.0 * 1024.0;
  return {d * V, d * K, static_cast<double>(B * S * V * 2) / gib, static_cast<double>(B * S * K * 2) / gib};
}

// Measured values are deviations from the published figures; thresholds are
// half a unit in their last printed digit.
inline Report verify_param_accounting(long long d = 768, long long V = 50000, long long K = 512) {
  const auto a = param_accounting(d, V, K, 512, 512);
  const double dv = std::abs(static_cast<double>(a.head_vocab) - 38.4e6);
  const double dk = std::abs(static_cast<double>(a.head_tree) - 0.393e6);
  const double gv = std::abs(a.logits_vocab_gib - 24.4);
  const double gk = std::abs(a.logits_tree_gib - 0.25);
  return {{"params_head_vocab", dv, 0.0, dv == 0.0},
          {"params_head_tree", dk, 500.0, dk <= 500.0},
          {"logits_vocab_gib", gv, 0.05, gv <= 0.05},
          {"logits_tree_gib", gk, 0.005, gk <= 0.005}};
}

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"kolmogorov", "mc", "reverse", "elbo", "backward", "params"};
  return names;
}

// Runs one named suite (or "all") on the reference trees and prints CHECK lines.
inline Report run_suite(const std::string& suite, std::ostream& out) {
  const bool all = suite == "all";
  if (!all && std::find(suite_names().begin(), suite_names().end(), suite) == suite_names().end()) {
    throw InvalidConfig("verify: unknown suite '" + suite + "'");
  }
  Report report;
  auto add = [&](const Report& r) {
    for (const auto& c : r) {
      out << c.line() << '\n' << std::flush;
      report.push_back(c);
    }
  };
  const auto small = six_token_tree();
  const NoiseSchedule s_small(small.tree_height());
  if (all || suite == "kolmogorov") {
    add(verify_cumulative_vs_ode(small, s_small, 50));
    add(verify_chapman_kolmogorov(small, s_small, 100));
  }
  if (all || suite == "mc") add(verify_marginals_mc(small, s_small, 100000));
  if (all || suite == "reverse") {
    add(verify_reverse_bayes(small, s_small, 100));
    add(verify_reverse_factorization(small, s_small, 100));
  }
  if (all || suite == "elbo") {
    const auto big = sixteen_leaf_tree();
    add(verify_elbo_closed_form(big, NoiseSchedule(big.tree_height()), 20));
  }
  if (all || suite == "backward") {
    NodeId u = small.level(1).front();
    for (NodeId n : small.level(1))
      if (small.children(n).size() > small.children(u).size()) u = n;
    std::vector<double> probs(static_cast<std::size_t>(small.branching()), 0.0);
    const auto n = small.children(u).size();
    for (std::size_t j = 0; j < n; ++j) probs[j] = (j + 1.0) / (n * (n + 1) / 2.0);
    const double lo = s_small.threshold(0), hi = s_small.threshold(1);
    add(verify_backward_rate(small, s_small, u, probs, 100000, lo + 0.25 * (hi - lo)));
  }
  if (all || suite == "params") add(verify_param_accounting());
  return report;
}

}  // namespace tdlm
