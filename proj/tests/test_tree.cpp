#include <catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include "tdlm/embeddings.hpp"
#include "tdlm/tree.hpp"
#include "tdlm/tree_build.hpp"
#include "tdlm/tree_io.hpp"

using namespace tdlm;
using Catch::Approx;

namespace {

TokenEmbeddings line_embeddings(std::vector<double> xs) {
  TokenEmbeddings e(static_cast<int>(xs.size()), 1);
  e.data = std::move(xs);
  return e;
}

TreeBuildConfig cfg_k(int K) {
  TreeBuildConfig c;
  c.branching = K;
  return c;
}

}  // namespace

TEST_CASE("single token vocabulary gives a bare root") {
  const auto tree = build_tree(line_embeddings({3.0}), cfg_k(4));
  CHECK(tree.tree_height() == 0);
  CHECK(tree.node_count() == 1);
  CHECK(tree.token_of(tree.root()) == 0);
  CHECK(validate(tree).empty());
}

TEST_CASE("four spread points split into four singletons") {
  const auto tree = build_tree(line_embeddings({0, 1, 10, 11}), cfg_k(4));
  CHECK(tree.tree_height() == 1);
  CHECK(tree.children(tree.root()).size() == 4);
  CHECK(validate(tree).empty());
  // Ascending centroid norm fixes the label order.
  for (int j = 0; j < 4; ++j) CHECK(tree.token_of(tree.children(tree.root())[static_cast<std::size_t>(j)]) == j);
}

TEST_CASE("six points with K=2 need padding to reach uniform depth") {
  const auto tree = build_tree(line_embeddings({0, 1, 2, 10, 11, 12}), cfg_k(2));
  REQUIRE(validate(tree).empty());
  CHECK(tree.tree_height() == 3);
  const auto counts = subtree_leaf_counts(tree);
  const auto& top = tree.children(tree.root());
  REQUIRE(top.size() == 2);
  CHECK(counts[static_cast<std::size_t>(top[0])] == 3);
  CHECK(counts[static_cast<std::size_t>(top[1])] == 3);
  // {0,1,2} and {10,11,12} stay together.
  CHECK(tree.token_ancestor(0, 2) == tree.token_ancestor(2, 2));
  CHECK(tree.token_ancestor(3, 2) == tree.token_ancestor(5, 2));
  for (NodeId c : top) {
    std::vector<int> sizes;
    for (NodeId g : tree.children(c)) sizes.push_back(counts[static_cast<std::size_t>(g)]);
    std::sort(sizes.begin(), sizes.end());
    CHECK(sizes == std::vector<int>{1, 2});
    for (NodeId g : tree.children(c)) {
      if (counts[static_cast<std::size_t>(g)] == 1) {
        REQUIRE(tree.children(g).size() == 1);
        CHECK(tree.label(tree.children(g)[0]) == 0);
      }
    }
  }
}

TEST_CASE("validate reports a short leaf") {
  // root(h=2) -> a(h=1) -> leaf0 ; root -> leaf1 at height 0 directly.
  TokenTree t(2, {-1, 0, 1, 0}, {-1, 0, 0, 1}, {2, 1, 0, 0}, {-1, -1, 0, 1});
  const auto v = validate(t);
  CHECK(v.size() == 1);
}

TEST_CASE("validate reports K+1 children") {
  TokenTree t(2, {-1, 0, 0, 0}, {-1, 0, 1, 2}, {1, 0, 0, 0}, {-1, 0, 1, 2});
  const auto v = validate(t);
  REQUIRE(v.size() == 1);
  CHECK(v[0].find("exceeds K=2") != std::string::npos);
}

TEST_CASE("tree file round trip and rejections") {
  const auto tree = build_tree(line_embeddings({0, 1, 2, 10, 11, 12}), cfg_k(2));
  std::stringstream ss;
  write_tree(tree, ss);
  CHECK(ss.str().rfind("TDLM-TREE v1 K=2 H=3 N=", 0) == 0);
  const auto back = read_tree(ss);
  CHECK(back == tree);

  SECTION("node count mismatch") {
    std::string text = ss.str();
    std::stringstream bad;
    write_tree(tree, bad);
    text = bad.str();
    const auto pos = text.find(" N=");
    const auto end = text.find(' ', pos + 1);
    text.replace(pos, end - pos, " N=" + std::to_string(tree.node_count() + 1));
    std::istringstream in(text);
    CHECK_THROWS_AS(read_tree(in), ParseError);
  }
  SECTION("two leaves share a token") {
    std::istringstream in("TDLM-TREE v1 K=2 H=1 N=3 V=1\n0 -1 -1 1 -1\n1 0 0 0 0\n2 0 1 0 0\n");
    CHECK_THROWS_AS(read_tree(in), InvalidInput);
  }
}

TEST_CASE("ancestor, offspring and level maps agree") {
  const auto tree = build_tree(line_embeddings({0, 1, 2, 10, 11, 12, 20, 21, 30}), cfg_k(3));
  REQUIRE(validate(tree).empty());
  const int H = tree.tree_height();
  for (NodeId n = 0; n < tree.node_count(); ++n) {
    for (int h1 = tree.height(n); h1 <= H; ++h1) {
      for (int h2 = h1; h2 <= H; ++h2) {
        CHECK(tree.ancestor(tree.ancestor(n, h1), h2) == tree.ancestor(n, h2));
      }
    }
    for (int h = 0; h < tree.height(n); ++h) {
      for (NodeId m : tree.offspring(n, h)) CHECK(tree.ancestor(m, tree.height(n)) == n);
    }
  }
  for (TokenId x = 0; x < tree.vocab_size(); ++x) {
    std::vector<double> mass(tree.level(0).size(), 0.0);
    mass[static_cast<std::size_t>(tree.level_position(tree.leaf_of(x)))] = 1.0;
    for (int h = 0; h < H; ++h) mass = tree.level_map(h).apply(mass);
    REQUIRE(mass.size() == 1);
    CHECK(mass[0] == 1.0);
  }
  CHECK_THROWS_AS(tree.ancestor(tree.root(), 0), DomainError);
}

TEST_CASE("build is deterministic and random configs satisfy the bounds") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int V = std::uniform_int_distribution<int>(1, 300)(rng);
    const int K = std::uniform_int_distribution<int>(2, 16)(rng);
    TokenEmbeddings e(V, 3);
    std::normal_distribution<double> nd;
    for (double& x : e.data) x = nd(rng);
    TreeBuildConfig c = cfg_k(K);
    c.seed = static_cast<std::uint64_t>(trial);
    const auto a = build_tree(e, c);
    CHECK(validate(a).empty());
    CHECK(build_tree(e, c) == a);
    const auto counts = subtree_leaf_counts(a);
    for (NodeId n = 0; n < a.node_count(); ++n) {
      const int size = counts[static_cast<std::size_t>(n)];
      const auto& kids = a.children(n);
      if (size < K || kids.size() <= 1) continue;
      const auto b = cluster_size_bounds(size, K, c.ratio_min, c.ratio_max);
      for (NodeId k : kids) {
        CHECK(counts[static_cast<std::size_t>(k)] >= b.min_size);
        CHECK(counts[static_cast<std::size_t>(k)] <= b.max_size);
      }
    }
  }
}

TEST_CASE("invalid build configs are rejected") {
  auto e = line_embeddings({0, 1, 2});
  CHECK_THROWS_AS(build_tree(e, cfg_k(1)), InvalidConfig);
  TreeBuildConfig c = cfg_k(2);
  c.ratio_min = 1.3;
  CHECK_THROWS_AS(build_tree(e, c), InvalidConfig);
  e.data[1] = std::nan("");
  CHECK_THROWS_AS(build_tree(e, cfg_k(2)), InvalidInput);
}

TEST_CASE("ppmi embeddings") {
  SECTION("abab gives distinct rows") {
    const std::vector<std::int32_t> corpus{0, 1, 0, 1};
    const auto e = ppmi_embeddings(corpus, 2, 2, 1, 0);
    CHECK(e.rows == 2);
    CHECK(e.finite());
    CHECK((e.row(0)[0] != e.row(1)[0] || e.row(0)[1] != e.row(1)[1]));
  }
  SECTION("identical contexts give identical rows") {
    // 1 and 2 both always sit between 0 and 3.
    const std::vector<std::int32_t> corpus{0, 1, 3, 0, 2, 3, 0, 1, 3, 0, 2, 3};
    const auto e = ppmi_embeddings(corpus, 4, 2, 1, 0);
    for (int k = 0; k < 2; ++k) CHECK(e.row(1)[static_cast<std::size_t>(k)] == Approx(e.row(2)[static_cast<std::size_t>(k)]).margin(1e-9));
  }
  SECTION("matches a dense eigendecomposition") {
    std::mt19937_64 rng(3);
    std::vector<std::int32_t> corpus(2000);
    for (auto& t : corpus) t = std::uniform_int_distribution<int>(0, 11)(rng);
    const auto m = ppmi_matrix(corpus, 12, 2);
    const auto [vals, basis] = symmetric_top_eigen(m, 12, 4, 1);
    Eigen::Map<const Eigen::Matrix<double, 12, 12, Eigen::RowMajor>> M(m.data());
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 12, 12>> es(M);
    std::vector<double> ref(es.eigenvalues().data(), es.eigenvalues().data() + 12);
    std::sort(ref.begin(), ref.end(), [](double a, double b) { return std::abs(a) > std::abs(b); });
    for (int k = 0; k < 4; ++k) CHECK(vals[static_cast<std::size_t>(k)] == Approx(ref[static_cast<std::size_t>(k)]).margin(1e-9));
  }
}
