#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>

#include "support/gradcheck.hpp"
#include "tdlm/checkpoint.hpp"
#include "tdlm/loss.hpp"
#include "tdlm/model.hpp"
#include "tdlm/optim.hpp"
#include "tdlm/tree_io.hpp"

using namespace tdlm;
using Catch::Approx;

namespace {

DenoiserConfig tiny(int node_vocab, int K) {
  DenoiserConfig c;
  c.d = 8;
  c.layers = 1;
  c.heads = 1;
  c.S = 4;
  c.node_vocab = node_vocab;
  c.K = K;
  return c;
}

}  // namespace

TEST_CASE("init is deterministic in the seed") {
  const auto c = tiny(7, 2);
  Denoiser<float> a(c, 1), b(c, 1), other(c, 2);
  for (std::size_t i = 0; i < a.params().size(); ++i) CHECK(a.params()[i].data == b.params()[i].data);
  CHECK(a.params()[0].data != other.params()[0].data);
}

TEST_CASE("parameter count") {
  const auto c = tiny(7, 2);
  Denoiser<float> m(c, 0);
  // 7*8 + 4*8 + (2*64 + 16) + (16 + 256 + 512 + 32 + 8) + 8 + 16
  const std::size_t hand = 56 + 32 + 144 + 824 + 8 + 16;
  CHECK(m.parameter_count() == hand);
  CHECK(parameter_count(c) == hand);
  CHECK(m.param("head.w").size() == 16);
  auto big = c;
  big.node_vocab = 5000;
  CHECK(Denoiser<float>(big, 0).param("head.w").size() == 16);
}

TEST_CASE("forward shapes, purity and batch independence") {
  const auto tree = complete_tree(2, 2);
  auto c = tiny(tree.node_count(), 2);
  c.heads = 2;
  Denoiser<double> m(c, 3);
  const std::vector<NodeId> ids{0, 1, 2, 3, 4, 5, 6, 0};
  const std::vector<double> t{0.3, 0.8};
  const auto a = m.forward(ids, t, 2);
  CHECK(a.logits.size() == 16);
  const auto again = m.forward(ids, t, 2);
  CHECK(a.logits == again.logits);
  const std::vector<NodeId> swapped{4, 5, 6, 0, 0, 1, 2, 3};
  const std::vector<double> ts{0.8, 0.3};
  const auto b = m.forward(swapped, ts, 2);
  for (int i = 0; i < 8; ++i) CHECK(b.logits[static_cast<std::size_t>(i)] == Approx(a.logits[static_cast<std::size_t>(i + 8)]).epsilon(1e-14));
  for (double v : a.logits) CHECK(std::isfinite(v));
  const std::vector<NodeId> bad{0, 1, 2, 99};
  CHECK_THROWS_AS(m.forward(bad, std::vector<double>{0.5}, 1), InvalidInput);
}

TEST_CASE("golden logits") {
  const auto tree = complete_tree(2, 2);
  auto c = tiny(tree.node_count(), 2);
  c.heads = 2;
  Denoiser<double> m(c, 12345);
  const std::vector<NodeId> ids{0, 1, 5, 3, 2, 6, 4, 0};
  const auto out = m.forward(ids, std::vector<double>{0.25, 0.75}, 2);
  const std::string path = std::string(TDLM_FIXTURES) + "/golden_logits.txt";
  if (std::getenv("TDLM_REGEN_GOLDEN")) {
    std::ofstream f(path);
    f << std::setprecision(17);
    for (double v : out.logits) f << v << "\n";
  }
  std::ifstream f(path);
  REQUIRE(f);
  std::vector<double> golden;
  for (double v; f >> v;) golden.push_back(v);
  REQUIRE(golden.size() == out.logits.size());
  for (std::size_t i = 0; i < golden.size(); ++i) CHECK(out.logits[i] == Approx(golden[i]).margin(1e-12));
}

TEST_CASE("gradients match central differences") {
  for (const auto& g : testing::gradient_check(5)) {
    INFO(g.name);
    CHECK(g.rel_error <= 1e-4);
    CHECK(g.grad_norm > 0.0);
  }
}

TEST_CASE("no valid positions give zero gradients") {
  testing::GradcheckProblem prob(1);
  std::mt19937_64 rng(1);
  const auto batch = corrupt(prob.tree, prob.sched, prob.batch.tokens, 2, 4, rng, 0.0);
  Denoiser<double> m(prob.config(), 2);
  const auto out = m.forward(batch.z, batch.t, 2);
  const auto dl = tdlm_loss_grad<double>(out.logits, batch, prob.tree, prob.sched, prob.lw);
  for (const auto& g : m.backward(dl)) {
    for (double v : g.data) CHECK(v == 0.0);
  }
}

TEST_CASE("adam step by hand") {
  std::vector<Tensor<double>> p{{"w", {1, 1}, {1.0}}};
  std::vector<Tensor<double>> g{{"w", {1, 1}, {0.5}}};
  auto s = make_adam_state(p);
  AdamConfig c;
  c.lr = 0.1;
  c.warmup = 0;
  c.total_steps = 10;
  c.weight_decay = 0.02;
  c.clip_norm = 1.0;
  optimizer_step(p, g, s, c);
  // m = 0.05, v = 0.0025; bias-corrected 0.5 / (0.5 + eps), decay adds 0.02.
  CHECK(p[0].data[0] == Approx(1.0 - 0.1 * (0.5 / (0.5 + 1e-9) + 0.02)).epsilon(1e-14));
  CHECK(s.step == 1);

  std::vector<Tensor<double>> q{{"w", {1, 1}, {2.0}}}, z{{"w", {1, 1}, {0.0}}};
  auto s2 = make_adam_state(q);
  c.weight_decay = 0;
  optimizer_step(q, z, s2, c);
  CHECK(q[0].data[0] == 2.0);

  std::vector<Tensor<double>> big{{"w", {1, 2}, {0.0, 0.0}}}, bg{{"w", {1, 2}, {3.0, 4.0}}};
  auto s3 = make_adam_state(big);
  CHECK(optimizer_step(big, bg, s3, c) == Approx(5.0));
  AdamConfig w;
  w.warmup = 100;
  CHECK(learning_rate(w, 0) == 0.0);
  CHECK(learning_rate(w, 50) == Approx(0.5 * w.lr));
  CHECK(learning_rate(w, w.total_steps) == Approx(0.1 * w.lr));
}

TEST_CASE("checkpoint round trip") {
  const auto tree = complete_tree(2, 2);
  auto c = tiny(tree.node_count(), 2);
  c.joint_L = 2;
  Denoiser<float> m(c, 9);
  const auto dir = std::filesystem::temp_directory_path() / "tdlm_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "m.ckpt").string();
  save_checkpoint(m, 42, path);
  {
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "TDLM-CKPT v1 step=42");
  }
  long long step = 0;
  auto back = load_checkpoint<float>(path, &step);
  CHECK(step == 42);
  CHECK(back.config() == c);
  for (std::size_t i = 0; i < m.params().size(); ++i) CHECK(back.params()[i].data == m.params()[i].data);

  auto st = make_adam_state(m.params());
  st.step = 7;
  st.m[0].data[0] = 0.25f;
  save_optimizer(st, path + ".opt");
  const auto st2 = load_optimizer(path + ".opt", m.params());
  CHECK(st2.step == 7);
  CHECK(st2.m[0].data[0] == 0.25f);
  CHECK_FALSE(checkpoint_is_wide(path));

  Denoiser<double> wide(c, 10);
  save_checkpoint(wide, 3, path);
  CHECK(checkpoint_is_wide(path));
  const auto wback = load_checkpoint<double>(path);
  for (std::size_t i = 0; i < wide.params().size(); ++i) CHECK(wback.params()[i].data == wide.params()[i].data);
  std::filesystem::remove_all(dir);
}

TEST_CASE("overfits one batch") {
  const auto tree = complete_tree(4, 2);
  NoiseSchedule s(2);
  DenoiserConfig c;
  c.d = 64;
  c.layers = 2;
  c.heads = 4;
  c.S = 16;
  c.node_vocab = tree.node_count();
  c.K = 4;
  Denoiser<float> m(c, 4);
  std::mt19937_64 rng(6);
  std::vector<TokenId> toks(4 * 16);
  for (auto& t : toks) t = std::uniform_int_distribution<int>(0, 15)(rng);
  const auto batch = corrupt(tree, s, toks, 4, 16, rng);
  const std::vector<double> lw{1.0, 1.0};
  AdamConfig ac;
  ac.lr = 3e-3;
  ac.warmup = 20;
  ac.total_steps = 500;
  auto st = make_adam_state(m.params());
  double first = -1, last = 0;
  for (int step = 0; step < 500; ++step) {
    const auto out = m.forward(batch.z, batch.t, 4);
    last = tdlm_loss<float>(out.logits, batch, tree, s, lw).mean_J();
    if (first < 0) first = last;
    if (last < 0.1 * first) break;
    auto g = m.backward(tdlm_loss_grad<float>(out.logits, batch, tree, s, lw));
    optimizer_step(m.params(), g, st, ac);
  }
  CHECK(first > 0);
  CHECK(last < 0.1 * first);
}
