#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "tdlm/kernels.hpp"
#include "tdlm/loss.hpp"
#include "tdlm/oracle.hpp"
#include "tdlm/tree.hpp"

namespace tdlm::testing {

inline ChildPredictor random_predictor(const TokenTree& tree, std::uint64_t seed) {
  return random_plugin_predictor(tree, seed);
}

// Logits that put (almost) all mass on the true child of every absorbed position.
inline std::vector<double> oracle_logits(const TokenTree& tree, const CorruptedBatch& b, double scale = 60.0) {
  const int K = tree.branching();
  std::vector<double> out(b.z.size() * static_cast<std::size_t>(K), 0.0);
  for (int r = 0; r < b.B; ++r) {
    for (int s = 0; s < b.S; ++s) {
      const std::size_t i = b.at(r, s);
      const NodeId z = b.z[i];
      if (tree.height(z) == 0) continue;
      const int j = tree.child_index(b.tokens[i], tree.height(z));
      out[i * static_cast<std::size_t>(K) + static_cast<std::size_t>(j)] = scale;
    }
  }
  return out;
}

}  // namespace tdlm::testing
