#include <catch_amalgamated.hpp>

#include <random>

#include "support/fixtures.hpp"
#include "tdlm/loss.hpp"
#include "tdlm/tree_io.hpp"

using namespace tdlm;
using Catch::Approx;

namespace {

// Root with a 4-way child and a single-child padding chain above token 4.
TokenTree padded_tree() {
  return TokenTree(4, {-1, 0, 0, 1, 1, 1, 1, 2}, {-1, 0, 1, 0, 1, 2, 3, 0}, {2, 1, 1, 0, 0, 0, 0, 0},
                   {-1, -1, -1, 0, 1, 2, 3, 4});
}

}  // namespace

TEST_CASE("corrupt at the endpoints") {
  const auto tree = complete_tree(2, 3);
  NoiseSchedule s(3);
  std::mt19937_64 rng(1);
  const std::vector<TokenId> toks{0, 3, 5, 7};
  const auto b0 = corrupt(tree, s, toks, 2, 2, rng, 0.0);
  for (std::size_t i = 0; i < toks.size(); ++i) CHECK(b0.z[i] == tree.leaf_of(toks[i]));
  const auto b1 = corrupt(tree, s, toks, 2, 2, rng, 1.0);
  for (NodeId z : b1.z) CHECK(z == tree.root());
  CHECK(b1.h[0] == 2);
  CHECK_THROWS_AS(corrupt(tree, s, toks, 3, 2, rng), InvalidInput);
}

TEST_CASE("uniform logits give ln K on absorbed positions") {
  const auto tree = complete_tree(4, 1);
  NoiseSchedule s(1);
  std::mt19937_64 rng(1);
  const std::vector<TokenId> toks{0, 1, 2, 3};
  const auto b = corrupt(tree, s, toks, 1, 4, rng, 1.0);
  const std::vector<double> logits(16, 0.0), lw{1.0};
  const auto m = tdlm_loss<double>(logits, b, tree, s, lw);
  for (int i = 0; i < 4; ++i) {
    CHECK(m.valid[static_cast<std::size_t>(i)] == 1);
    CHECK(m.E[static_cast<std::size_t>(i)] == Approx(1.38629).margin(1e-5));
    CHECK(m.J[static_cast<std::size_t>(i)] == Approx(1.38629).margin(1e-5));
  }
}

TEST_CASE("padding and resolved positions") {
  const auto tree = padded_tree();
  NoiseSchedule s(2);
  std::mt19937_64 rng(1);
  const std::vector<TokenId> toks{4, 0};
  auto b = corrupt(tree, s, toks, 1, 2, rng, 0.25);
  b.z = {tree.parent(tree.leaf_of(4)), tree.leaf_of(0)};
  std::vector<double> logits{3.0, -1.0, 7.0, 2.0, 0.0, 0.0, 0.0, 0.0};
  const std::vector<double> lw{1.0, 1.0};
  const auto m = tdlm_loss<double>(logits, b, tree, s, lw);
  CHECK(m.valid[0] == 1);
  CHECK(m.E[0] == 0.0);
  CHECK(m.valid[1] == 0);
  CHECK(m.J[1] == 0.0);
  const auto g = tdlm_loss_grad<double>(logits, b, tree, s, lw);
  for (double v : g) CHECK(v == 0.0);
}

TEST_CASE("level consistency is enforced") {
  const auto tree = complete_tree(2, 2);
  NoiseSchedule s(2);
  std::mt19937_64 rng(1);
  const std::vector<TokenId> toks{0, 1};
  auto b = corrupt(tree, s, toks, 1, 2, rng, 0.3);
  b.h[0] = 1;
  const std::vector<double> logits(4, 0.0), lw{1.0, 1.0};
  CHECK_THROWS_AS(tdlm_loss<double>(logits, b, tree, s, lw), ContractViolation);
  b.h[0] = 0;
  CHECK_THROWS_AS(tdlm_loss<double>(std::vector<double>(3, 0.0), b, tree, s, lw), InvalidInput);
}

TEST_CASE("E ignores the clip cap and J tracks it") {
  const auto tree = complete_tree(3, 2);
  std::mt19937_64 rng(4);
  std::vector<TokenId> toks(64);
  for (auto& t : toks) t = std::uniform_int_distribution<int>(0, 8)(rng);
  NoiseSchedule a(2, 10.0), c(2, 2.0);
  std::mt19937_64 r1(9);
  const auto b = corrupt(tree, a, toks, 8, 8, r1);
  std::vector<double> logits(64 * 3);
  std::normal_distribution<double> nd;
  for (auto& v : logits) v = nd(rng);
  const auto lw = height_weights(2, parse_level_weights("exp:0.5"));
  const auto ma = tdlm_loss<double>(logits, b, tree, a, lw);
  const auto mc = tdlm_loss<double>(logits, b, tree, c, lw);
  for (std::size_t i = 0; i < ma.E.size(); ++i) {
    CHECK(ma.E[i] == mc.E[i]);
    if (!ma.valid[i]) continue;
    const auto wa = a.time_weight(b.t[i / 8]);
    CHECK(ma.J[i] == Approx(ma.E[i] * wa.clipped / wa.raw * lw[static_cast<std::size_t>(b.h[i / 8])]).epsilon(1e-12));
    CHECK(ma.E[i] >= 0.0);
  }
}

TEST_CASE("loss gradient matches finite differences") {
  const auto tree = padded_tree();
  NoiseSchedule s(2);
  std::mt19937_64 rng(2);
  std::vector<TokenId> toks{0, 1, 2, 3, 4, 4, 2, 0};
  const auto b = corrupt(tree, s, toks, 2, 4, rng);
  std::vector<double> logits(8 * 4);
  std::normal_distribution<double> nd;
  for (auto& v : logits) v = nd(rng);
  const std::vector<double> lw{0.8, 1.2};
  const auto g = tdlm_loss_grad<double>(logits, b, tree, s, lw);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    auto lp = logits, lm = logits;
    lp[i] += 1e-5;
    lm[i] -= 1e-5;
    const double fd = (tdlm_loss<double>(lp, b, tree, s, lw).mean_J() - tdlm_loss<double>(lm, b, tree, s, lw).mean_J()) / 2e-5;
    CHECK(g[i] == Approx(fd).margin(1e-7));
  }
}

TEST_CASE("elbo estimate on oracle and uniform models") {
  const auto tree = complete_tree(2, 4);
  NoiseSchedule s(4);
  std::mt19937_64 rng(3);
  std::vector<TokenId> toks(16 * 32);
  for (auto& t : toks) t = std::uniform_int_distribution<int>(0, 15)(rng);

  auto uniform = [&](const CorruptedBatch& b) { return std::vector<double>(b.z.size() * 2, 0.0); };
  const auto u = elbo_estimate(uniform, tree, s, toks, 32, 200, rng);
  CHECK(std::abs(u.nats_per_token - 4 * std::log(2.0)) <= 3 * u.std_error);
  double sum = 0;
  for (double v : u.per_level) sum += v;
  CHECK(sum == Approx(u.nats_per_token).epsilon(1e-12));
  CHECK(u.perplexity == Approx(std::exp(u.nats_per_token)));

  auto oracle = [&](const CorruptedBatch& b) { return testing::oracle_logits(tree, b); };
  const auto o = elbo_estimate(oracle, tree, s, toks, 32, 10, rng);
  CHECK(o.nats_per_token == Approx(0.0).margin(1e-12));

  auto padded = toks;
  for (std::size_t i = 0; i < padded.size(); i += 2) padded[i] = 15;
  const auto p = elbo_estimate(uniform, tree, s, padded, 32, 100, rng, TokenId{15});
  CHECK(p.tokens == std::count_if(padded.begin(), padded.end(), [](TokenId t) { return t != 15; }));
  CHECK(std::abs(p.nats_per_token - 4 * std::log(2.0)) <= 3 * p.std_error);
  CHECK_THROWS_AS(elbo_estimate(uniform, tree, s, std::vector<TokenId>{}, 32, 1, rng), InvalidInput);
}

TEST_CASE("closed form matches the enumerated continuous-time bound") {
  const auto tree = padded_tree();
  NoiseSchedule s(2);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto pred = testing::random_predictor(tree, seed);
    for (TokenId x = 0; x < tree.vocab_size(); ++x) {
      for (int h = 0; h < 2; ++h) {
        const double cf = closed_form_level_elbo(pred, tree, s, x, h, 1000);
        const double l2 = generic_oracle_elbo(pred, tree, s, x, h, 1000);
        const double rem = generic_elbo_remainder(s, h, 1000);
        CHECK(std::abs(l2 - (cf + rem)) <= 1e-6);
        CHECK(std::abs(rem) <= 1e-8);
        CHECK(std::abs(generic_oracle_elbo(pred, tree, s, x, h, 2000) - l2) <= 1e-8);
      }
    }
  }
  const auto truth = ground_truth_predictor(tree, 2);
  CHECK(closed_form_elbo(truth, tree, s, 2, 100) == Approx(0.0).margin(1e-12));
  CHECK_THROWS_AS(generic_oracle_elbo(truth, tree, s, 2, 0, 9), InvalidConfig);
}

TEST_CASE("joint target masks") {
  const auto tree = complete_tree(2, 2);
  const NodeId a = tree.token_ancestor(0, 1), b = tree.token_ancestor(3, 1);
  const std::vector<NodeId> both{a, b};
  const auto m = joint_target_mask(tree, both, 0);
  CHECK(std::count(m.begin(), m.end(), 1) == 4);
  const std::vector<NodeId> one{tree.leaf_of(1), b};
  const auto m1 = joint_target_mask(tree, one, 0);
  CHECK(std::count(m1.begin(), m1.end(), 1) == 2);
  CHECK(m1[2] == 1);
  CHECK(m1[3] == 1);

  const auto deep = complete_tree(2, 1);
  const std::vector<NodeId> roots(16, deep.root());
  const auto big = joint_target_mask(deep, roots, 0);
  CHECK(big.size() == 65536);
  CHECK(std::count(big.begin(), big.end(), 1) == 65536);
  CHECK_THROWS_AS(joint_space_size(2, 21), InvalidConfig);
}

TEST_CASE("factorized joint logits reproduce marginal losses") {
  const auto tree = complete_tree(3, 2);
  NoiseSchedule s(2);
  std::mt19937_64 rng(8);
  const int B = 4, S = 6, L = 3, K = 3;
  std::vector<TokenId> toks(B * S);
  for (auto& t : toks) t = std::uniform_int_distribution<int>(0, 8)(rng);
  const auto b = corrupt(tree, s, toks, B, S, rng);
  std::vector<double> logits(B * S * K);
  std::normal_distribution<double> nd;
  for (auto& v : logits) v = nd(rng);
  // Positions already resolved predict only their own label under the mask.
  const std::vector<double> lw{1.0, 1.0};
  const auto marg = tdlm_loss<double>(logits, b, tree, s, lw);

  const int N = S / L;
  const std::size_t C = 27;
  std::vector<double> joint(static_cast<std::size_t>(B * N) * C, 0.0);
  for (int r = 0; r < B; ++r) {
    for (int n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        std::size_t rem = c;
        double acc = 0;
        for (int l = L - 1; l >= 0; --l) {
          const std::size_t i = b.at(r, n * L + l);
          acc += logits[i * K + rem % K];
          rem /= K;
        }
        joint[(static_cast<std::size_t>(r * N + n)) * C + c] = acc;
      }
    }
  }
  const auto jl = joint_loss<double>(joint, b, tree, s, {L}, lw);
  for (int r = 0; r < B; ++r) {
    for (int n = 0; n < N; ++n) {
      double sum = 0;
      for (int l = 0; l < L; ++l) sum += marg.E[b.at(r, n * L + l)];
      CHECK(std::abs(jl.E[static_cast<std::size_t>(r * N + n)] * L - sum) <= 1e-10);
    }
  }

  const auto one = joint_loss<double>(logits, b, tree, s, {1}, lw);
  for (std::size_t i = 0; i < one.E.size(); ++i) CHECK(std::abs(one.E[i] - marg.E[i]) <= 1e-12);

  std::vector<double> grad;
  joint_loss<double>(joint, b, tree, s, {L}, lw, &grad);
  for (std::size_t i = 0; i < joint.size(); i += 7) {
    auto jp = joint, jm = joint;
    jp[i] += 1e-5;
    jm[i] -= 1e-5;
    const double fd = (joint_loss<double>(jp, b, tree, s, {L}, lw).mean_J() - joint_loss<double>(jm, b, tree, s, {L}, lw).mean_J()) / 2e-5;
    CHECK(grad[i] == Approx(fd).margin(1e-7));
  }
}
