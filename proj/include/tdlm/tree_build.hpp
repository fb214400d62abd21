#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "tdlm/embeddings.hpp"
#include "tdlm/error.hpp"
#include "tdlm/tree.hpp"

namespace tdlm {

struct TreeBuildConfig {
  int branching = 16;
  double ratio_min = 0.8;
  double ratio_max = 1.2;
  std::uint64_t seed = 0;
  int kmeans_rounds = 25;
};

// Cluster-size window for splitting n tokens into K groups. Lower bound is at
// least one so every cluster is a real child.
struct SizeBounds {
  int min_size;
  int max_size;
};

inline SizeBounds cluster_size_bounds(int n, int K, double ratio_min, double ratio_max) {
  const double mean = static_cast<double>(n) / K;
  // Small epsilon so exact products like 0.8 * 5 do not floor to 3.
  const int lo = static_cast<int>(std::floor(ratio_min * mean + 1e-9));
  const int hi = static_cast<int>(std::ceil(ratio_max * mean - 1e-9));
  return {std::max(1, lo), std::max(1, hi)};
}

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Capacity-constrained Lloyd iterations over the given members (token ids,
// ascending). Returns a cluster index per member; every cluster ends with a
// size inside [bounds.min_size, bounds.max_size].
inline std::vector<int> balanced_kmeans(const TokenEmbeddings& emb, std::span<const TokenId> members, int K,
                                        SizeBounds bounds, int rounds, std::mt19937_64& rng) {
  const std::size_t n = members.size();
  const std::size_t D = static_cast<std::size_t>(emb.dim);
  const std::size_t Ks = static_cast<std::size_t>(K);
  auto point = [&](std::size_t i) { return emb.row(members[i]); };

  // k-means++ seeding; all-zero distances fall back to the lowest unused member.
  std::vector<double> cent(Ks * D, 0.0);
  std::vector<bool> used(n, false);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::size_t first = static_cast<std::size_t>(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
  used[first] = true;
  std::copy(point(first).begin(), point(first).end(), cent.begin());
  std::vector<double> mind(n, std::numeric_limits<double>::infinity());
  for (std::size_t c = 1; c < Ks; ++c) {
    std::span<const double> prev(cent.data() + (c - 1) * D, D);
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      mind[i] = std::min(mind[i], sq_dist(point(i), prev));
      if (!used[i]) total += mind[i];
    }
    std::size_t pick = n;
    if (total > 0) {
      double r = unif(rng) * total;
      for (std::size_t i = 0; i < n; ++i) {
        if (used[i]) continue;
        r -= mind[i];
        if (r <= 0) {
          pick = i;
          break;
        }
      }
      if (pick == n) {
        for (std::size_t i = n; i-- > 0;)
          if (!used[i] && mind[i] > 0) {
            pick = i;
            break;
          }
      }
    }
    if (pick == n) {
      for (std::size_t i = 0; i < n; ++i)
        if (!used[i]) {
          pick = i;
          break;
        }
    }
    used[pick] = true;
    std::copy(point(pick).begin(), point(pick).end(), cent.begin() + static_cast<std::ptrdiff_t>(c * D));
  }

  std::vector<int> assign(n, -1);
  std::vector<double> dist(n * Ks);
  std::vector<std::size_t> order(n);
  std::vector<int> count(Ks);
  std::vector<int> pref(Ks);
  for (int round = 0; round < std::max(1, rounds); ++round) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < Ks; ++c) dist[i * Ks + c] = sq_dist(point(i), {cent.data() + c * D, D});

    // Points with the clearest preference are placed first.
    std::vector<double> margin(n);
    for (std::size_t i = 0; i < n; ++i) {
      double b1 = std::numeric_limits<double>::infinity(), b2 = b1;
      for (std::size_t c = 0; c < Ks; ++c) {
        const double d = dist[i * Ks + c];
        if (d < b1) {
          b2 = b1;
          b1 = d;
        } else if (d < b2) {
          b2 = d;
        }
      }
      margin[i] = b2 - b1;
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return margin[a] > margin[b]; });

    std::vector<int> next(n, -1);
    std::fill(count.begin(), count.end(), 0);
    for (std::size_t i : order) {
      std::iota(pref.begin(), pref.end(), 0);
      std::stable_sort(pref.begin(), pref.end(),
                       [&](int a, int b) { return dist[i * Ks + static_cast<std::size_t>(a)] < dist[i * Ks + static_cast<std::size_t>(b)]; });
      for (int c : pref) {
        if (count[static_cast<std::size_t>(c)] < bounds.max_size) {
          next[i] = c;
          ++count[static_cast<std::size_t>(c)];
          break;
        }
      }
    }

    // Fill clusters under the minimum with the nearest point from a surplus cluster.
    for (;;) {
      int deficient = -1;
      for (std::size_t c = 0; c < Ks; ++c)
        if (count[c] < bounds.min_size) {
          deficient = static_cast<int>(c);
          break;
        }
      if (deficient < 0) break;
      std::size_t best = n;
      double bestd = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) {
        const int from = next[i];
        if (from == deficient || count[static_cast<std::size_t>(from)] <= bounds.min_size) continue;
        const double d = dist[i * Ks + static_cast<std::size_t>(deficient)];
        if (d < bestd) {
          bestd = d;
          best = i;
        }
      }
      if (best == n) throw ContractViolation("balanced k-means: size bounds infeasible");
      --count[static_cast<std::size_t>(next[best])];
      next[best] = deficient;
      ++count[static_cast<std::size_t>(deficient)];
    }

    const bool converged = next == assign;
    assign = std::move(next);
    std::fill(cent.begin(), cent.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = point(i);
      double* c = cent.data() + static_cast<std::size_t>(assign[i]) * D;
      for (std::size_t k = 0; k < D; ++k) c[k] += p[k];
    }
    for (std::size_t c = 0; c < Ks; ++c)
      for (std::size_t k = 0; k < D; ++k) cent[c * D + k] /= count[c];
    if (converged) break;
  }
  return assign;
}

}  // namespace detail

// Recursive balanced K-means tree over the vocabulary, then padded to uniform
// leaf depth with single-child chains inserted directly above short leaves.
inline TokenTree build_tree(const TokenEmbeddings& emb, const TreeBuildConfig& cfg) {
  const int K = cfg.branching;
  if (K < 2) throw InvalidConfig("build_tree: branching factor must be >= 2");
  if (cfg.ratio_min > cfg.ratio_max) throw InvalidConfig("build_tree: ratio_min exceeds ratio_max");
  if (!(cfg.ratio_min > 0.0) || cfg.ratio_min > 1.0 || cfg.ratio_max < 1.0) {
    throw InvalidConfig("build_tree: ratios must satisfy 0 < min <= 1 <= max");
  }
  if (emb.rows < 1) throw InvalidInput("build_tree: empty vocabulary");
  if (!emb.finite()) throw InvalidInput("build_tree: non-finite embeddings");

  struct Proto {
    std::vector<TokenId> members;
    std::vector<int> kids;
    int parent = -1;
    int depth = 0;
  };
  std::vector<Proto> nodes;
  nodes.push_back({});
  nodes[0].members.resize(static_cast<std::size_t>(emb.rows));
  std::iota(nodes[0].members.begin(), nodes[0].members.end(), 0);

  std::mt19937_64 rng(cfg.seed);
  std::deque<int> queue{0};
  while (!queue.empty()) {
    const int id = queue.front();
    queue.pop_front();
    const std::vector<TokenId> members = nodes[static_cast<std::size_t>(id)].members;
    const int n = static_cast<int>(members.size());
    if (n <= 1) continue;

    std::vector<std::vector<TokenId>> groups;
    if (n < K) {
      for (TokenId t : members) groups.push_back({t});
    } else {
      const auto bounds = cluster_size_bounds(n, K, cfg.ratio_min, cfg.ratio_max);
      const auto assign = detail::balanced_kmeans(emb, members, K, bounds, cfg.kmeans_rounds, rng);
      groups.assign(static_cast<std::size_t>(K), {});
      for (std::size_t i = 0; i < members.size(); ++i) groups[static_cast<std::size_t>(assign[i])].push_back(members[i]);
    }

    // Child labels follow ascending centroid norm, then smallest member id.
    std::vector<std::pair<double, TokenId>> keys;
    for (const auto& g : groups) {
      std::vector<double> c(static_cast<std::size_t>(emb.dim), 0.0);
      for (TokenId t : g)
        for (int k = 0; k < emb.dim; ++k) c[static_cast<std::size_t>(k)] += emb.row(t)[static_cast<std::size_t>(k)];
      double norm = 0;
      for (double x : c) norm += (x / static_cast<double>(g.size())) * (x / static_cast<double>(g.size()));
      keys.emplace_back(std::sqrt(norm), *std::min_element(g.begin(), g.end()));
    }
    std::vector<std::size_t> order(groups.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (keys[a].first != keys[b].first) return keys[a].first < keys[b].first;
      return keys[a].second < keys[b].second;
    });
    for (std::size_t o : order) {
      Proto child;
      child.members = std::move(groups[o]);
      child.parent = id;
      child.depth = nodes[static_cast<std::size_t>(id)].depth + 1;
      nodes.push_back(std::move(child));
      const int cid = static_cast<int>(nodes.size()) - 1;
      nodes[static_cast<std::size_t>(id)].kids.push_back(cid);
      queue.push_back(cid);
    }
  }

  int H = 0;
  for (const auto& p : nodes)
    if (p.kids.empty()) H = std::max(H, p.depth);

  // Pad: replace leaf L under P by P -> c1 -> ... -> cm -> L, all extra links label 0.
  const std::size_t proto_count = nodes.size();
  for (std::size_t i = 0; i < proto_count; ++i) {
    if (!nodes[i].kids.empty() || nodes[i].depth == H) continue;
    const int missing = H - nodes[i].depth;
    const int leaf = static_cast<int>(i);
    const int top_parent = nodes[i].parent;
    int prev = top_parent;
    int first_pad = -1;
    for (int k = 0; k < missing; ++k) {
      Proto pad;
      pad.members = nodes[i].members;
      pad.parent = prev;
      pad.depth = nodes[i].depth + k;
      nodes.push_back(std::move(pad));
      const int pid = static_cast<int>(nodes.size()) - 1;
      if (k == 0) first_pad = pid;
      else nodes[static_cast<std::size_t>(prev)].kids = {pid};
      prev = pid;
    }
    auto& siblings = nodes[static_cast<std::size_t>(top_parent)].kids;
    *std::find(siblings.begin(), siblings.end(), leaf) = first_pad;
    nodes[static_cast<std::size_t>(prev)].kids = {leaf};
    nodes[i].parent = prev;
    nodes[i].depth = H;
  }

  // Breadth-first ids: root is 0, children contiguous in label order.
  std::vector<NodeId> parent, newid(nodes.size(), kNoNode);
  std::vector<int> label, height;
  std::vector<TokenId> token;
  std::deque<int> bfs{0};
  newid[0] = 0;
  parent.push_back(kNoNode);
  label.push_back(-1);
  height.push_back(H);
  token.push_back(kNoToken);
  while (!bfs.empty()) {
    const int id = bfs.front();
    bfs.pop_front();
    const auto& kids = nodes[static_cast<std::size_t>(id)].kids;
    if (kids.empty()) token[static_cast<std::size_t>(newid[static_cast<std::size_t>(id)])] = nodes[static_cast<std::size_t>(id)].members.front();
    for (std::size_t j = 0; j < kids.size(); ++j) {
      const int c = kids[j];
      newid[static_cast<std::size_t>(c)] = static_cast<NodeId>(parent.size());
      parent.push_back(newid[static_cast<std::size_t>(id)]);
      label.push_back(static_cast<int>(j));
      height.push_back(H - nodes[static_cast<std::size_t>(c)].depth);
      token.push_back(kNoToken);
      bfs.push_back(c);
    }
  }
  return TokenTree(K, std::move(parent), std::move(label), std::move(height), std::move(token));
}

// Number of leaves under each node (equals the token count of its cluster).
inline std::vector<int> subtree_leaf_counts(const TokenTree& tree) {
  std::vector<int> cnt(static_cast<std::size_t>(tree.node_count()), 0);
  for (int h = 0; h <= tree.tree_height(); ++h) {
    for (NodeId n : tree.level(h)) {
      if (tree.is_leaf(n)) cnt[static_cast<std::size_t>(n)] = 1;
      if (tree.parent(n) != kNoNode) cnt[static_cast<std::size_t>(tree.parent(n))] += cnt[static_cast<std::size_t>(n)];
    }
  }
  return cnt;
}

}  // namespace tdlm
