#include <catch_amalgamated.hpp>

#include <random>

#include "tdlm/kernels.hpp"
#include "tdlm/tree_io.hpp"

using namespace tdlm;
using Catch::Approx;

namespace {

// Root with children of 3 and 2 tokens.
TokenTree small_tree() {
  return TokenTree(3, {-1, 0, 0, 1, 1, 1, 2, 2}, {-1, 0, 1, 0, 1, 2, 0, 1}, {2, 1, 1, 0, 0, 0, 0, 0},
                   {-1, -1, -1, 0, 1, 2, 3, 4});
}

}  // namespace

TEST_CASE("generator rows") {
  const auto tree = small_tree();
  NoiseSchedule s(2);
  const auto q = generator(tree, s, 0.25);  // alpha 0.5, alpha' -2
  const NodeId leaf = tree.leaf_of(0);
  CHECK(q.at(leaf, leaf) == Approx(-4.0));
  CHECK(q.at(leaf, tree.parent(leaf)) == Approx(4.0));
  CHECK(q.at(tree.parent(leaf), tree.root()) == 0.0);
  CHECK_THROWS_AS(generator(tree, s, 0.5 - 1e-9), SingularityError);
}

TEST_CASE("cumulative kernel") {
  const auto tree = complete_tree(2, 1);
  NoiseSchedule s(1);
  // alpha_s = 0.8 at s = 0.2, alpha_t = 0.4 at t = 0.6.
  const auto p = cumulative(tree, s, 0.2, 0.6);
  const NodeId n = tree.children(tree.root())[0];
  CHECK(p.at(n, n) == Approx(0.5));
  CHECK(p.at(tree.root(), n) == Approx(0.5));
  CHECK(p.at(tree.root(), tree.root()) == 1.0);
  const auto id = cumulative(tree, s, 0.3, 0.3);
  CHECK(id.at(n, n) == 1.0);
}

TEST_CASE("cross-level composition reaches the root") {
  const auto tree = small_tree();
  NoiseSchedule s(2);
  const auto p = cumulative(tree, s, 0.0, 1.0);
  for (NodeId n = 0; n < tree.node_count(); ++n) CHECK(p.at(tree.root(), n) == Approx(1.0).margin(1e-15));
  const auto q = cumulative(tree, s, 0.1, 0.9);
  const NodeId leaf = tree.leaf_of(1);
  const double a2 = 0.2;  // the parent survives level 1 from 0.5 to 0.9
  CHECK(q.at(leaf, leaf) == 0.0);
  CHECK(q.at(tree.parent(leaf), leaf) == Approx(a2 * 1.0));
  CHECK(q.at(tree.root(), leaf) == Approx(1.0 - a2));
}

TEST_CASE("reverse posterior") {
  const auto tree = small_tree();
  NoiseSchedule s(1);
  const NodeId u = tree.children(tree.root())[1];  // two children
  const std::vector<double> p{0.5, 0.5, 0.0};
  // alpha_s = 0.75, alpha_t = 0.25.
  const auto flat = complete_tree(2, 1);
  const auto post = reverse_posterior(flat, s, flat.root(), 0.25, 0.75, std::vector<double>{0.5, 0.5});
  CHECK(mass_of(post, flat.children(flat.root())[0]) == Approx(1.0 / 3.0));
  CHECK(mass_of(post, flat.children(flat.root())[1]) == Approx(1.0 / 3.0));
  CHECK(mass_of(post, flat.root()) == Approx(1.0 / 3.0));
  CHECK_THROWS_AS(reverse_posterior(tree, NoiseSchedule(2), u, 0.1, 0.2, std::vector<double>{0.0, 0.0, 1.0}),
                  ContractViolation);
  const auto point = reverse_posterior(flat, s, flat.root(), 0.5, 0.5, std::vector<double>{0.5, 0.5});
  CHECK(point.size() == 1);
}

TEST_CASE("reverse consistency") {
  const auto tree = complete_tree(2, 3);
  NoiseSchedule s(3);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0;
  for (int i = 0; i < 200; ++i) {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    const TokenId x = static_cast<TokenId>(i % tree.vocab_size());
    worst = std::max(worst, reverse_consistency_check(tree, s, x, a, b));
  }
  CHECK(worst <= 1e-12);
  CHECK(reverse_consistency_check(tree, s, 3, 0.05, 0.95) <= 1e-12);
}

TEST_CASE("forward sampling frequency") {
  const auto tree = complete_tree(2, 2);
  NoiseSchedule s(2);
  std::mt19937_64 rng(5);
  std::vector<TokenId> toks(100000, 2);
  const auto z = forward_sample(tree, s, toks, 0.375, rng);  // alpha = 0.25 in level 0
  const NodeId upper = tree.token_ancestor(2, 1);
  double absorbed = 0;
  for (NodeId n : z) absorbed += n == upper ? 1 : 0;
  const double n = static_cast<double>(z.size());
  const double sigma = std::sqrt(0.75 * 0.25 / n);
  CHECK(std::abs(absorbed / n - 0.75) <= 4 * sigma);
}
