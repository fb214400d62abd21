#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tdlm/error.hpp"

namespace tdlm {

using NodeId = std::int32_t;
using TokenId = std::int32_t;
inline constexpr NodeId kNoNode = -1;
inline constexpr TokenId kNoToken = -1;

// Height-h to height-(h+1) aggregation matrix. Stored by column since every
// column has exactly one nonzero entry.
struct LevelMap {
  int rows = 0;
  int cols = 0;
  std::vector<int> row_of_col;

  double at(int r, int c) const { return row_of_col[static_cast<std::size_t>(c)] == r ? 1.0 : 0.0; }

  std::vector<double> apply(std::span<const double> mass) const {
    if (static_cast<int>(mass.size()) != cols) {
      throw InvalidInput("level map: expected " + std::to_string(cols) + " entries");
    }
    std::vector<double> out(static_cast<std::size_t>(rows), 0.0);
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(row_of_col[c])] += mass[static_cast<std::size_t>(c)];
    return out;
  }
};

// Uniform-depth K-ary hierarchy over a vocabulary. Leaves (height 0) are
// tokens, the single root sits at height H. Immutable once built.
//
// The raw-array constructor accepts structurally broken trees (wrong heights,
// too many children) so that validate() can report on them; queries assume a
// valid tree.
class TokenTree {
 public:
  TokenTree() = default;

  TokenTree(int branching, std::vector<NodeId> parent, std::vector<int> label, std::vector<int> height,
            std::vector<TokenId> token)
      : K_(branching),
        parent_(std::move(parent)),
        label_(std::move(label)),
        height_(std::move(height)),
        token_(std::move(token)) {
    const std::size_t n = parent_.size();
    if (n == 0) throw InvalidInput("tree: no nodes");
    if (label_.size() != n || height_.size() != n || token_.size() != n) {
      throw InvalidInput("tree: per-node arrays differ in length");
    }
    if (K_ < 1) throw InvalidConfig("tree: branching factor must be positive");
    H_ = *std::max_element(height_.begin(), height_.end());
    if (*std::min_element(height_.begin(), height_.end()) < 0) throw InvalidInput("tree: negative height");

    children_.assign(n, {});
    for (std::size_t i = 0; i < n; ++i) {
      const NodeId p = parent_[i];
      if (p == kNoNode) continue;
      if (p < 0 || static_cast<std::size_t>(p) >= n) {
        throw InvalidInput("tree: node " + std::to_string(i) + " has dangling parent " + std::to_string(p));
      }
      children_[static_cast<std::size_t>(p)].push_back(static_cast<NodeId>(i));
    }
    for (auto& ch : children_) {
      std::stable_sort(ch.begin(), ch.end(), [&](NodeId a, NodeId b) { return label_[a] < label_[b]; });
    }

    TokenId vmax = -1;
    for (TokenId tok : token_) vmax = std::max(vmax, tok);
    leaf_of_token_.assign(static_cast<std::size_t>(vmax + 1), kNoNode);
    for (std::size_t i = 0; i < n; ++i) {
      if (token_[i] >= 0) leaf_of_token_[static_cast<std::size_t>(token_[i])] = static_cast<NodeId>(i);
    }

    level_nodes_.assign(static_cast<std::size_t>(H_ + 1), {});
    level_pos_.assign(n, -1);
    for (std::size_t i = 0; i < n; ++i) {
      auto& lv = level_nodes_[static_cast<std::size_t>(height_[i])];
      level_pos_[i] = static_cast<int>(lv.size());
      lv.push_back(static_cast<NodeId>(i));
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (parent_[i] == kNoNode && height_[i] == H_) root_ = static_cast<NodeId>(i);
    }
    build_ancestor_table();
  }

  int branching() const { return K_; }
  int tree_height() const { return H_; }
  int node_count() const { return static_cast<int>(parent_.size()); }
  int vocab_size() const { return static_cast<int>(leaf_of_token_.size()); }
  NodeId root() const { return root_; }

  NodeId parent(NodeId n) const { return parent_[idx(n)]; }
  int label(NodeId n) const { return label_[idx(n)]; }
  int height(NodeId n) const { return height_[idx(n)]; }
  TokenId token_of(NodeId n) const { return token_[idx(n)]; }
  bool is_leaf(NodeId n) const { return children_[idx(n)].empty(); }
  const std::vector<NodeId>& children(NodeId n) const { return children_[idx(n)]; }

  NodeId leaf_of(TokenId tok) const {
    if (tok < 0 || tok >= vocab_size()) throw DomainError("token " + std::to_string(tok) + " outside vocabulary");
    return leaf_of_token_[static_cast<std::size_t>(tok)];
  }

  // Nodes of height h in dense order, and the position of a node in that order.
  const std::vector<NodeId>& level(int h) const { return level_nodes_.at(static_cast<std::size_t>(h)); }
  int level_position(NodeId n) const { return level_pos_[idx(n)]; }

  NodeId ancestor(NodeId node, int h) const {
    const int hn = height(node);
    if (h < hn || h > H_) {
      throw DomainError("ancestor: height " + std::to_string(h) + " outside [" + std::to_string(hn) + ", " +
                        std::to_string(H_) + "]");
    }
    NodeId cur = node;
    for (int k = hn; k < h; ++k) cur = parent_[idx(cur)];
    return cur;
  }

  // Precomputed fast path for token ancestors; no bounds checks beyond debug.
  NodeId token_ancestor(TokenId tok, int h) const {
    return token_anc_[static_cast<std::size_t>(tok) * static_cast<std::size_t>(H_ + 1) + static_cast<std::size_t>(h)];
  }

  // Height-h descendants of node. For h == height(node) below the root this is
  // the sibling set including node itself.
  std::vector<NodeId> offspring(NodeId node, int h) const {
    const int hn = height(node);
    if (h < 0 || h > hn) {
      throw DomainError("offspring: height " + std::to_string(h) + " outside [0, " + std::to_string(hn) + "]");
    }
    if (h == hn) {
      if (hn == H_) return {node};
      return offspring(parent(node), h);
    }
    std::vector<NodeId> frontier{node};
    for (int k = hn; k > h; --k) {
      std::vector<NodeId> next;
      for (NodeId f : frontier) {
        const auto& ch = children(f);
        next.insert(next.end(), ch.begin(), ch.end());
      }
      frontier.swap(next);
    }
    return frontier;
  }

  // Label j with children(ancestor(token, h))[j] == ancestor(token, h - 1).
  int child_index(TokenId tok, int h) const {
    if (h < 1 || h > H_) throw DomainError("child_index: height must lie in [1, H]");
    return label(token_ancestor(tok, h - 1));
  }

  std::vector<bool> child_mask(NodeId node) const {
    if (height(node) < 1) throw DomainError("child_mask: leaves have no children");
    std::vector<bool> mask(static_cast<std::size_t>(K_), false);
    for (NodeId c : children(node)) {
      const int j = label(c);
      if (j >= 0 && j < K_) mask[static_cast<std::size_t>(j)] = true;
    }
    return mask;
  }

  LevelMap level_map(int h) const {
    if (h < 0 || h >= H_) throw DomainError("level_map: height must lie in [0, H)");
    LevelMap m;
    m.rows = static_cast<int>(level(h + 1).size());
    m.cols = static_cast<int>(level(h).size());
    m.row_of_col.resize(static_cast<std::size_t>(m.cols));
    for (int c = 0; c < m.cols; ++c) {
      m.row_of_col[static_cast<std::size_t>(c)] = level_position(parent(level(h)[static_cast<std::size_t>(c)]));
    }
    return m;
  }

  friend bool operator==(const TokenTree& a, const TokenTree& b) {
    return a.K_ == b.K_ && a.parent_ == b.parent_ && a.label_ == b.label_ && a.height_ == b.height_ &&
           a.token_ == b.token_;
  }

 private:
  static std::size_t idx(NodeId n) { return static_cast<std::size_t>(n); }

  void build_ancestor_table() {
    const std::size_t stride = static_cast<std::size_t>(H_ + 1);
    token_anc_.assign(leaf_of_token_.size() * stride, kNoNode);
    for (std::size_t tok = 0; tok < leaf_of_token_.size(); ++tok) {
      NodeId cur = leaf_of_token_[tok];
      if (cur == kNoNode || height_[idx(cur)] != 0) continue;
      for (std::size_t h = 0; h < stride && cur != kNoNode; ++h) {
        if (height_[idx(cur)] != static_cast<int>(h)) break;
        token_anc_[tok * stride + h] = cur;
        cur = parent_[idx(cur)];
      }
    }
  }

  int K_ = 0;
  int H_ = 0;
  NodeId root_ = kNoNode;
  std::vector<NodeId> parent_;
  std::vector<int> label_;
  std::vector<int> height_;
  std::vector<TokenId> token_;
  std::vector<std::vector<NodeId>> children_;
  std::vector<NodeId> leaf_of_token_;
  std::vector<std::vector<NodeId>> level_nodes_;
  std::vector<int> level_pos_;
  std::vector<NodeId> token_anc_;
};

// Invariant check. Each structural defect yields one message.
inline std::vector<std::string> validate(const TokenTree& tree) {
  std::vector<std::string> out;
  const int n = tree.node_count();
  const int K = tree.branching();
  const int H = tree.tree_height();
  auto node_str = [](NodeId i) { return "node " + std::to_string(i); };

  int roots = 0;
  for (NodeId i = 0; i < n; ++i) {
    if (tree.parent(i) == kNoNode) {
      ++roots;
      if (tree.height(i) != H) out.push_back(node_str(i) + ": root has height " + std::to_string(tree.height(i)) +
                                             ", expected " + std::to_string(H));
    }
  }
  if (roots != 1) out.push_back("expected exactly one root, found " + std::to_string(roots));

  int heightH = 0;
  for (NodeId i = 0; i < n; ++i) heightH += tree.height(i) == H ? 1 : 0;
  if (heightH != 1 && roots == 1) out.push_back(std::to_string(heightH) + " nodes at height H, expected 1");

  for (NodeId i = 0; i < n; ++i) {
    const NodeId p = tree.parent(i);
    if (p != kNoNode && tree.height(p) != tree.height(i) + 1) {
      out.push_back(node_str(i) + ": height " + std::to_string(tree.height(i)) + " under parent of height " +
                    std::to_string(tree.height(p)) + " (leaf depth not uniform)");
    }
  }

  for (NodeId i = 0; i < n; ++i) {
    const auto& ch = tree.children(i);
    if (ch.empty()) continue;
    bool labels_ok = true;
    for (std::size_t j = 0; j < ch.size(); ++j) labels_ok = labels_ok && tree.label(ch[j]) == static_cast<int>(j);
    if (static_cast<int>(ch.size()) > K) {
      out.push_back(node_str(i) + ": " + std::to_string(ch.size()) + " children exceeds K=" + std::to_string(K));
    } else if (!labels_ok) {
      out.push_back(node_str(i) + ": child labels are not 0.." + std::to_string(ch.size() - 1));
    }
  }
  for (NodeId i = 0; i < n; ++i) {
    if (tree.parent(i) == kNoNode && tree.label(i) != -1) out.push_back(node_str(i) + ": root carries a child label");
  }

  std::vector<int> seen(static_cast<std::size_t>(tree.vocab_size()), 0);
  for (NodeId i = 0; i < n; ++i) {
    const TokenId tok = tree.token_of(i);
    const bool leaf = tree.children(i).empty();
    if (leaf && tok < 0) {
      out.push_back(node_str(i) + ": leaf without a token");
    } else if (!leaf && tok >= 0) {
      out.push_back(node_str(i) + ": internal node carries token " + std::to_string(tok));
    } else if (leaf && tree.height(i) != 0) {
      out.push_back(node_str(i) + ": leaf at height " + std::to_string(tree.height(i)));
    }
    if (tok >= 0) ++seen[static_cast<std::size_t>(tok)];
  }
  for (std::size_t tok = 0; tok < seen.size(); ++tok) {
    if (seen[tok] == 0) out.push_back("token " + std::to_string(tok) + " has no leaf");
    if (seen[tok] > 1) out.push_back("token " + std::to_string(tok) + " maps to " + std::to_string(seen[tok]) + " leaves");
  }
  return out;
}

}  // namespace tdlm
