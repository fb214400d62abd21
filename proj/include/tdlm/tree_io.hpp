#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tdlm/error.hpp"
#include "tdlm/tree.hpp"

namespace tdlm {

inline void write_tree(const TokenTree& tree, std::ostream& out) {
  out << "TDLM-TREE v1 K=" << tree.branching() << " H=" << tree.tree_height() << " N=" << tree.node_count()
      << " V=" << tree.vocab_size() << "\n";
  for (NodeId i = 0; i < tree.node_count(); ++i) {
    out << i << ' ' << tree.parent(i) << ' ' << tree.label(i) << ' ' << tree.height(i) << ' ' << tree.token_of(i)
        << "\n";
  }
}

inline void save_tree(const TokenTree& tree, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path);
  write_tree(tree, out);
}

namespace detail {

inline int header_field(const std::string& field, const char* key, const std::string& line) {
  const std::string k = std::string(key) + "=";
  if (field.rfind(k, 0) != 0) throw ParseError("bad tree header '" + line + "'", 1);
  try {
    std::size_t used = 0;
    const int v = std::stoi(field.substr(k.size()), &used);
    if (used != field.size() - k.size()) throw ParseError("bad tree header '" + line + "'", 1);
    return v;
  } catch (const std::logic_error&) {
    throw ParseError("bad tree header '" + line + "'", 1);
  }
}

}  // namespace detail

// Parses and validates; any structural defect is an error.
inline TokenTree read_tree(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header", 1);
  std::istringstream hs(line);
  std::string magic, ver, kf, hf, nf, vf, extra;
  hs >> magic >> ver >> kf >> hf >> nf >> vf;
  if (magic != "TDLM-TREE" || ver != "v1" || (hs >> extra)) throw ParseError("bad tree header '" + line + "'", 1);
  const int K = detail::header_field(kf, "K", line);
  const int H = detail::header_field(hf, "H", line);
  const int N = detail::header_field(nf, "N", line);
  const int V = detail::header_field(vf, "V", line);
  if (K < 1 || H < 0 || N < 1 || V < 1) throw ParseError("tree header has out-of-range sizes", 1);

  std::vector<NodeId> parent(static_cast<std::size_t>(N));
  std::vector<int> label(static_cast<std::size_t>(N)), height(static_cast<std::size_t>(N));
  std::vector<TokenId> token(static_cast<std::size_t>(N));
  int lineno = 1;
  for (int i = 0; i < N; ++i) {
    ++lineno;
    if (!std::getline(in, line)) {
      throw ParseError("header declares N=" + std::to_string(N) + " nodes but file has " + std::to_string(i), lineno);
    }
    std::istringstream ls(line);
    long long id, p, l, h, t;
    if (!(ls >> id >> p >> l >> h >> t) || (ls >> extra)) throw ParseError("expected 5 integers", lineno);
    if (id != i) throw ParseError("node ids must be 0..N-1 in order", lineno);
    if (p < -1 || p >= N) throw ParseError("parent " + std::to_string(p) + " out of range", lineno);
    if (t < -1 || t >= V) throw ParseError("token " + std::to_string(t) + " out of range", lineno);
    if (h < 0 || h > H) throw ParseError("height " + std::to_string(h) + " out of range", lineno);
    parent[static_cast<std::size_t>(i)] = static_cast<NodeId>(p);
    label[static_cast<std::size_t>(i)] = static_cast<int>(l);
    height[static_cast<std::size_t>(i)] = static_cast<int>(h);
    token[static_cast<std::size_t>(i)] = static_cast<TokenId>(t);
  }
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") != std::string::npos) {
      throw ParseError("more node lines than the header's N=" + std::to_string(N), lineno);
    }
  }
  TokenTree tree(K, std::move(parent), std::move(label), std::move(height), std::move(token));
  if (tree.tree_height() != H) throw ParseError("header H does not match node heights", 1);
  if (tree.vocab_size() != V) throw ParseError("header V does not match the largest token id", 1);
  const auto problems = validate(tree);
  if (!problems.empty()) throw InvalidInput("invalid tree: " + problems.front());
  return tree;
}

inline TokenTree load_tree(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read " + path);
  try {
    return read_tree(in);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what(), 0);
  }
}

// Complete K-ary tree of height H; tokens numbered left to right.
inline TokenTree complete_tree(int K, int H) {
  if (K < 1 || H < 0) throw InvalidConfig("complete_tree: need K >= 1 and H >= 0");
  std::vector<NodeId> parent{kNoNode};
  std::vector<int> label{-1}, height{H};
  std::vector<TokenId> token{H == 0 ? 0 : kNoToken};
  std::vector<NodeId> frontier{0};
  TokenId next_token = 0;
  for (int h = H - 1; h >= 0; --h) {
    std::vector<NodeId> next;
    for (NodeId p : frontier) {
      for (int j = 0; j < K; ++j) {
        const NodeId id = static_cast<NodeId>(parent.size());
        parent.push_back(p);
        label.push_back(j);
        height.push_back(h);
        token.push_back(h == 0 ? next_token++ : kNoToken);
        next.push_back(id);
      }
    }
    frontier.swap(next);
  }
  return TokenTree(K, std::move(parent), std::move(label), std::move(height), std::move(token));
}

}  // namespace tdlm
