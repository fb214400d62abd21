#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "tdlm/error.hpp"
#include "tdlm/kernels.hpp"
#include "tdlm/schedule.hpp"
#include "tdlm/tree.hpp"

namespace tdlm {

// B rows of S positions; one time (and level) per row.
struct CorruptedBatch {
  int B = 0;
  int S = 0;
  std::vector<TokenId> tokens;  // B*S
  std::vector<NodeId> z;        // B*S
  std::vector<double> t;        // B
  std::vector<int> h;           // B

  std::size_t at(int b, int s) const { return static_cast<std::size_t>(b) * static_cast<std::size_t>(S) + static_cast<std::size_t>(s); }
};

struct LossMaps {
  int B = 0;
  int S = 0;
  std::vector<double> J;
  std::vector<double> E;
  std::vector<std::uint8_t> valid;

  double mean_J() const {
    double s = 0;
    for (double v : J) s += v;
    return J.empty() ? 0.0 : s / static_cast<double>(J.size());
  }
};

// Corrupts each row at an independent t ~ U(0, 1), or at forced_t when given.
template <class Rng>
CorruptedBatch corrupt(const TokenTree& tree, const NoiseSchedule& sched, std::span<const TokenId> tokens, int B, int S,
                       Rng& rng, std::optional<double> forced_t = std::nullopt) {
  if (static_cast<std::size_t>(B) * static_cast<std::size_t>(S) != tokens.size()) {
    throw InvalidInput("corrupt: token count is not B*S");
  }
  CorruptedBatch batch;
  batch.B = B;
  batch.S = S;
  batch.tokens.assign(tokens.begin(), tokens.end());
  batch.z.resize(tokens.size());
  batch.t.resize(static_cast<std::size_t>(B));
  batch.h.resize(static_cast<std::size_t>(B));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int b = 0; b < B; ++b) {
    const double t = forced_t ? *forced_t : unif(rng);
    batch.t[static_cast<std::size_t>(b)] = t;
    batch.h[static_cast<std::size_t>(b)] = sched.level_of(t);
    const auto row = forward_sample(tree, sched, tokens.subspan(batch.at(b, 0), static_cast<std::size_t>(S)), t, rng);
    std::copy(row.begin(), row.end(), batch.z.begin() + static_cast<std::ptrdiff_t>(batch.at(b, 0)));
  }
  return batch;
}

namespace detail {

inline void check_batch(const TokenTree& tree, const NoiseSchedule& sched, const CorruptedBatch& batch) {
  const std::size_t n = static_cast<std::size_t>(batch.B) * static_cast<std::size_t>(batch.S);
  if (batch.tokens.size() != n || batch.z.size() != n || batch.t.size() != static_cast<std::size_t>(batch.B) ||
      batch.h.size() != static_cast<std::size_t>(batch.B)) {
    throw InvalidInput("loss: batch arrays do not match B x S");
  }
  if (sched.levels() != tree.tree_height()) throw ContractViolation("loss: schedule and tree heights differ");
  for (int b = 0; b < batch.B; ++b) {
    if (batch.h[static_cast<std::size_t>(b)] != sched.level_of(batch.t[static_cast<std::size_t>(b)])) {
      throw ContractViolation("loss: row " + std::to_string(b) + " level is inconsistent with its time");
    }
  }
}

// Masked log-softmax cross-entropy over the first `valid_slots` entries.
template <class T>
double masked_ce(std::span<const T> logits, int valid_slots, int target) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < valid_slots; ++k) mx = std::max(mx, static_cast<double>(logits[static_cast<std::size_t>(k)]));
  double sum = 0;
  for (int k = 0; k < valid_slots; ++k) sum += std::exp(static_cast<double>(logits[static_cast<std::size_t>(k)]) - mx);
  return mx + std::log(sum) - static_cast<double>(logits[static_cast<std::size_t>(target)]);
}

}  // namespace detail

// Per-position target of the classification problem at the row's level.
struct ChildTarget {
  NodeId absorbed;  // ancestor at height h + 1
  int label;        // child label of the height-h ancestor under it
  int slots;        // number of existing children
  bool valid;       // state currently sits at the absorbed node
};

inline ChildTarget child_target(const TokenTree& tree, TokenId x, NodeId z, int h) {
  const NodeId u = tree.token_ancestor(x, h + 1);
  const bool resolved_token = tree.height(z) == 0;
  return {u, tree.child_index(x, h + 1), static_cast<int>(tree.children(u).size()), !resolved_token && z == u};
}

// Algorithm-1 loss maps. E uses the raw time weight and no level weight; J
// uses the clipped weight times the level weight of the row.
template <class T>
LossMaps tdlm_loss(std::span<const T> logits, const CorruptedBatch& batch, const TokenTree& tree,
                   const NoiseSchedule& sched, std::span<const double> level_weights) {
  detail::check_batch(tree, sched, batch);
  const int K = tree.branching();
  const std::size_t n = batch.z.size();
  if (logits.size() != n * static_cast<std::size_t>(K)) throw InvalidInput("tdlm_loss: logits are not B x S x K");
  if (static_cast<int>(level_weights.size()) != tree.tree_height()) throw InvalidInput("tdlm_loss: need H level weights");
  LossMaps out;
  out.B = batch.B;
  out.S = batch.S;
  out.J.assign(n, 0.0);
  out.E.assign(n, 0.0);
  out.valid.assign(n, 0);
  for (int b = 0; b < batch.B; ++b) {
    const int h = batch.h[static_cast<std::size_t>(b)];
    const auto w = sched.time_weight(batch.t[static_cast<std::size_t>(b)]);
    const double wh = level_weights[static_cast<std::size_t>(h)];
    for (int s = 0; s < batch.S; ++s) {
      const std::size_t i = batch.at(b, s);
      const auto tgt = child_target(tree, batch.tokens[i], batch.z[i], h);
      if (!tgt.valid) continue;
      const double ce = detail::masked_ce<T>(logits.subspan(i * static_cast<std::size_t>(K), static_cast<std::size_t>(K)),
                                             tgt.slots, tgt.label);
      out.valid[i] = 1;
      out.E[i] = ce * w.raw;
      out.J[i] = ce * w.clipped * wh;
    }
  }
  return out;
}

// d mean(J) / d logits. Masked slots receive exactly zero.
template <class T>
std::vector<T> tdlm_loss_grad(std::span<const T> logits, const CorruptedBatch& batch, const TokenTree& tree,
                              const NoiseSchedule& sched, std::span<const double> level_weights) {
  detail::check_batch(tree, sched, batch);
  const int K = tree.branching();
  const std::size_t n = batch.z.size();
  std::vector<T> grad(n * static_cast<std::size_t>(K), T(0));
  const double inv_count = 1.0 / static_cast<double>(n);
  for (int b = 0; b < batch.B; ++b) {
    const int h = batch.h[static_cast<std::size_t>(b)];
    const auto w = sched.time_weight(batch.t[static_cast<std::size_t>(b)]);
    const double scale = w.clipped * level_weights[static_cast<std::size_t>(h)] * inv_count;
    for (int s = 0; s < batch.S; ++s) {
      const std::size_t i = batch.at(b, s);
      const auto tgt = child_target(tree, batch.tokens[i], batch.z[i], h);
      if (!tgt.valid) continue;
      const T* row = logits.data() + i * static_cast<std::size_t>(K);
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < tgt.slots; ++k) mx = std::max(mx, static_cast<double>(row[k]));
      double sum = 0;
      for (int k = 0; k < tgt.slots; ++k) sum += std::exp(static_cast<double>(row[k]) - mx);
      T* g = grad.data() + i * static_cast<std::size_t>(K);
      for (int k = 0; k < tgt.slots; ++k) {
        const double p = std::exp(static_cast<double>(row[k]) - mx) / sum;
        g[k] = static_cast<T>(scale * (p - (k == tgt.label ? 1.0 : 0.0)));
      }
    }
  }
  return grad;
}

struct ElboReport {
  double nats_per_token = 0;
  double std_error = 0;
  double perplexity = 0;
  std::vector<double> per_level;  // sums to nats_per_token
  long long tokens = 0;           // scored (non-pad) positions per sample pass
  long long samples = 0;          // corrupted rows evaluated
};

// Anything mapping a corrupted batch to B*S*K logits.
template <class F>
concept LogitModel = requires(F f, const CorruptedBatch& b) {
  { f(b) };
};

// Monte-Carlo negative ELBO per token. Each sequence is corrupted
// samples_per_seq times; pad positions are excluded from the score.
template <class Model, class Rng>
ElboReport elbo_estimate(Model&& model, const TokenTree& tree, const NoiseSchedule& sched,
                         std::span<const TokenId> tokens, int S, int samples_per_seq, Rng& rng,
                         std::optional<TokenId> pad = std::nullopt, int rows_per_batch = 32) {
  if (tokens.empty() || S <= 0) throw InvalidInput("elbo_estimate: empty evaluation set");
  if (tokens.size() % static_cast<std::size_t>(S) != 0) throw InvalidInput("elbo_estimate: token count not a multiple of S");
  const int H = tree.tree_height();
  const std::vector<double> unit(static_cast<std::size_t>(H), 1.0);
  const int nseq = static_cast<int>(tokens.size() / static_cast<std::size_t>(S));

  long long scored = 0;
  for (auto tok : tokens) scored += (pad && tok == *pad) ? 0 : 1;
  if (scored == 0) throw InvalidInput("elbo_estimate: evaluation set holds only padding");

  std::vector<double> level_sum(static_cast<std::size_t>(H), 0.0);
  // Row totals scaled so their mean is the per-token estimate.
  double sum = 0, sumsq = 0;
  long long rows = 0;
  const double row_scale = static_cast<double>(nseq) / static_cast<double>(scored);
  for (int rep = 0; rep < samples_per_seq; ++rep) {
    for (int first = 0; first < nseq; first += rows_per_batch) {
      const int B = std::min(rows_per_batch, nseq - first);
      auto slice = tokens.subspan(static_cast<std::size_t>(first) * static_cast<std::size_t>(S),
                                  static_cast<std::size_t>(B) * static_cast<std::size_t>(S));
      const auto batch = corrupt(tree, sched, slice, B, S, rng);
      const auto logits = model(batch);
      using L = typename std::decay_t<decltype(logits)>::value_type;
      const auto maps = tdlm_loss<L>(std::span<const L>(logits), batch, tree, sched, unit);
      for (int b = 0; b < B; ++b) {
        double row = 0;
        for (int s = 0; s < S; ++s) {
          const std::size_t i = batch.at(b, s);
          if (pad && batch.tokens[i] == *pad) continue;
          row += maps.E[i];
        }
        level_sum[static_cast<std::size_t>(batch.h[static_cast<std::size_t>(b)])] += row;
        const double r = row * row_scale;
        sum += r;
        sumsq += r * r;
        ++rows;
      }
    }
  }
  ElboReport rep;
  rep.samples = rows;
  rep.tokens = scored;
  const double denom = static_cast<double>(scored) * samples_per_seq;
  rep.per_level.resize(static_cast<std::size_t>(H));
  for (int h = 0; h < H; ++h) rep.per_level[static_cast<std::size_t>(h)] = level_sum[static_cast<std::size_t>(h)] / denom;
  rep.nats_per_token = 0;
  for (double v : rep.per_level) rep.nats_per_token += v;
  const double mean = sum / static_cast<double>(rows);
  const double var = rows > 1 ? (sumsq - rows * mean * mean) / static_cast<double>(rows - 1) : 0.0;
  rep.std_error = std::sqrt(std::max(0.0, var) / static_cast<double>(rows));
  rep.perplexity = std::exp(rep.nats_per_token);
  return rep;
}

using PluginPredictor = ChildPredictor;

namespace detail {

// Composite Simpson over [lo, hi]. The endpoint samples are one-sided limits,
// taken a relative 1e-12 inside, because the rates are singular there.
template <class F>
double simpson(F&& f, double lo, double hi, int panels) {
  if (panels < 10) throw InvalidConfig("quadrature: need at least 10 panels");
  const int n = 2 * panels;
  const double step = (hi - lo) / n;
  const double eps = 1e-12 * (hi - lo);
  double acc = f(lo + eps) + f(hi - eps);
  for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * f(lo + i * step);
  return acc * step / 3.0;
}

}  // namespace detail

// Closed-form in-level ELBO for token x at level h: the z_t expectation is
// exact and the t integral is done by quadrature, so time-dependent
// predictors are supported. Returns a log-likelihood bound (<= 0).
inline double closed_form_level_elbo(const PluginPredictor& predictor, const TokenTree& tree,
                                     const NoiseSchedule& sched, TokenId x, int h, int quadrature_steps) {
  const NodeId u = tree.token_ancestor(x, h + 1);
  const int y = tree.child_index(x, h + 1);
  auto integrand = [&](double t) {
    const double a = sched.alpha_in(h, t);
    const double weight = -sched.dalpha_in(h) / (1.0 - a);
    const double p = predictor(u, t)[static_cast<std::size_t>(y)];
    return (1.0 - a) * weight * std::log(p);
  };
  return detail::simpson(integrand, sched.threshold(h), sched.threshold(h + 1), quadrature_steps);
}

// Cross-level bound: sum of the in-level bounds.
inline double closed_form_elbo(const PluginPredictor& predictor, const TokenTree& tree, const NoiseSchedule& sched,
                               TokenId x, int quadrature_steps) {
  double total = 0;
  for (int h = 0; h < tree.tree_height(); ++h) total += closed_form_level_elbo(predictor, tree, sched, x, h, quadrature_steps);
  return total;
}

// Generic in-level continuous-time ELBO (without the theta-free constant C),
// evaluated by enumerating every state pair of the level and integrating over t.
inline double generic_oracle_elbo(const PluginPredictor& predictor, const TokenTree& tree, const NoiseSchedule& sched,
                                 TokenId x, int h, int quadrature_steps) {
  if (quadrature_steps < 10) throw InvalidConfig("generic_oracle_elbo: quadrature_steps must be >= 10");
  const NodeId xh = tree.token_ancestor(x, h);
  const NodeId xh1 = tree.token_ancestor(x, h + 1);
  std::vector<NodeId> states = tree.level(h);
  states.insert(states.end(), tree.level(h + 1).begin(), tree.level(h + 1).end());
  const double tlo = sched.threshold(h), thi = sched.threshold(h + 1);

  auto integrand = [&](double t) {
    const double a = (thi - t) / (thi - tlo);
    const double da = -1.0 / (thi - tlo);
    // Forward rate Q_t(from, to) inside the level.
    auto Q = [&](NodeId from, NodeId to) {
      if (tree.height(from) != h) return 0.0;
      if (from == to) return da / a;
      if (tree.parent(from) == to) return -da / a;
      return 0.0;
    };
    auto q_data = [&](NodeId z) { return (z == xh ? a : 0.0) + (z == xh1 ? 1.0 - a : 0.0); };
    double total = 0;
    for (NodeId zt : states) {
      const double qzt = q_data(zt);
      if (qzt == 0.0) continue;
      const NodeId u = tree.height(zt) == h + 1 ? zt : tree.parent(zt);
      const auto probs = predictor(u, t);
      const auto& kids = tree.children(u);
      auto q_model = [&](NodeId z) {
        double m = 0;
        for (std::size_t j = 0; j < kids.size(); ++j) {
          const double pj = probs[j];
          if (z == kids[j]) m += pj * a;
          if (z == u) m += pj * (1.0 - a);
        }
        return m;
      };
      const double qm_zt = q_model(zt);
      double first = 0, second = 0;
      for (NodeId zs : states) {
        const double qz = q_data(zs);
        if (zs != zt) {
          const double rate = Q(zs, zt);
          if (rate != 0.0 && qz != 0.0) {
            first += rate * (qz / qzt) * std::log(q_model(zs) * qzt / (qm_zt * qz));
          }
        }
        const double rate_in = Q(zs, zt);
        if (rate_in != 0.0) second -= rate_in * q_model(zs) / qm_zt;
      }
      total += qzt * (first + second);
    }
    return total;
  };
  return detail::simpson(integrand, tlo, thi, quadrature_steps);
}

// The theta-independent terms collected out of the generic ELBO; zero in
// exact arithmetic.
inline double generic_elbo_remainder(const NoiseSchedule& sched, int h, int quadrature_steps) {
  auto integrand = [&](double t) {
    const double a = sched.alpha_in(h, t);
    const double da = sched.dalpha_in(h);
    return (1.0 - a) * (da / (1.0 - a)) + a * (-da / a);
  };
  return detail::simpson(integrand, sched.threshold(h), sched.threshold(h + 1), quadrature_steps);
}

// ---------------------------------------------------------------------------
// Joint neighborhood modeling.

struct NeighborhoodConfig {
  int L = 1;
};

inline std::size_t joint_space_size(int K, int L) {
  if (L < 1) throw InvalidConfig("joint: neighborhood length must be >= 1");
  if (static_cast<double>(L) * std::log2(static_cast<double>(K)) > 20.0 + 1e-9) {
    throw InvalidConfig("joint: K^L exceeds 2^20 targets");
  }
  std::size_t n = 1;
  for (int l = 0; l < L; ++l) n *= static_cast<std::size_t>(K);
  return n;
}

// Allowed slots per position: the state's own label when it is already at
// height h, the existing children when it is absorbed at height h + 1.
inline std::vector<std::vector<int>> feasible_slots(const TokenTree& tree, std::span<const NodeId> z, int h) {
  std::vector<std::vector<int>> slots;
  for (NodeId n : z) {
    if (tree.height(n) == h) {
      slots.push_back({tree.label(n)});
    } else if (tree.height(n) == h + 1) {
      std::vector<int> s(tree.children(n).size());
      for (std::size_t j = 0; j < s.size(); ++j) s[j] = static_cast<int>(j);
      slots.push_back(std::move(s));
    } else {
      throw ContractViolation("joint: state height outside the active level");
    }
  }
  return slots;
}

// Composite index: first position is the most significant base-K digit.
inline std::vector<std::uint8_t> joint_target_mask(const TokenTree& tree, std::span<const NodeId> z, int h) {
  const int K = tree.branching();
  const int L = static_cast<int>(z.size());
  const std::size_t total = joint_space_size(K, L);
  const auto slots = feasible_slots(tree, z, h);
  std::vector<std::uint8_t> mask(total, 0);
  std::vector<std::size_t> digit(static_cast<std::size_t>(L), 0);
  for (;;) {
    std::size_t idx = 0;
    for (int l = 0; l < L; ++l) idx = idx * static_cast<std::size_t>(K) + static_cast<std::size_t>(slots[static_cast<std::size_t>(l)][digit[static_cast<std::size_t>(l)]]);
    mask[idx] = 1;
    int l = L - 1;
    while (l >= 0 && ++digit[static_cast<std::size_t>(l)] == slots[static_cast<std::size_t>(l)].size()) {
      digit[static_cast<std::size_t>(l)] = 0;
      --l;
    }
    if (l < 0) break;
  }
  return mask;
}

namespace detail {

inline std::size_t joint_target_index(const TokenTree& tree, const CorruptedBatch& batch, int b, int first, int L, int h) {
  std::size_t idx = 0;
  for (int l = 0; l < L; ++l) {
    const TokenId x = batch.tokens[batch.at(b, first + l)];
    idx = idx * static_cast<std::size_t>(tree.branching()) + static_cast<std::size_t>(tree.child_index(x, h + 1));
  }
  return idx;
}

}  // namespace detail

// Joint loss maps over B x N neighborhoods (N = S / L), reported per token
// (divided by L). A neighborhood is valid when any of its positions is absorbed.
template <class T>
LossMaps joint_loss(std::span<const T> joint_logits, const CorruptedBatch& batch, const TokenTree& tree,
                    const NoiseSchedule& sched, const NeighborhoodConfig& cfg, std::span<const double> level_weights,
                    std::vector<T>* grad = nullptr) {
  detail::check_batch(tree, sched, batch);
  const int L = cfg.L;
  if (batch.S % L != 0) throw InvalidConfig("joint: sequence length is not a multiple of L");
  const int N = batch.S / L;
  const std::size_t C = joint_space_size(tree.branching(), L);
  const std::size_t count = static_cast<std::size_t>(batch.B) * static_cast<std::size_t>(N);
  if (joint_logits.size() != count * C) throw InvalidInput("joint_loss: logits are not B x N x K^L");
  LossMaps out;
  out.B = batch.B;
  out.S = N;
  out.J.assign(count, 0.0);
  out.E.assign(count, 0.0);
  out.valid.assign(count, 0);
  if (grad) grad->assign(joint_logits.size(), T(0));
  for (int b = 0; b < batch.B; ++b) {
    const int h = batch.h[static_cast<std::size_t>(b)];
    const auto w = sched.time_weight(batch.t[static_cast<std::size_t>(b)]);
    const double wh = level_weights[static_cast<std::size_t>(h)];
    for (int nb = 0; nb < N; ++nb) {
      const std::size_t o = static_cast<std::size_t>(b) * static_cast<std::size_t>(N) + static_cast<std::size_t>(nb);
      std::span<const NodeId> z(batch.z.data() + batch.at(b, nb * L), static_cast<std::size_t>(L));
      bool any_absorbed = false;
      for (NodeId n : z) any_absorbed = any_absorbed || tree.height(n) == h + 1;
      if (!any_absorbed) continue;
      const auto mask = joint_target_mask(tree, z, h);
      const T* row = joint_logits.data() + o * C;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < C; ++c)
        if (mask[c]) mx = std::max(mx, static_cast<double>(row[c]));
      double sum = 0;
      for (std::size_t c = 0; c < C; ++c)
        if (mask[c]) sum += std::exp(static_cast<double>(row[c]) - mx);
      const std::size_t y = detail::joint_target_index(tree, batch, b, nb * L, L, h);
      const double ce = mx + std::log(sum) - static_cast<double>(row[y]);
      out.valid[o] = 1;
      out.E[o] = ce * w.raw / L;
      out.J[o] = ce * w.clipped * wh / L;
      if (grad) {
        const double scale = w.clipped * wh / L / static_cast<double>(count);
        T* g = grad->data() + o * C;
        for (std::size_t c = 0; c < C; ++c) {
          if (!mask[c]) continue;
          const double p = std::exp(static_cast<double>(row[c]) - mx) / sum;
          g[c] = static_cast<T>(scale * (p - (c == y ? 1.0 : 0.0)));
        }
      }
    }
  }
  return out;
}

}  // namespace tdlm
