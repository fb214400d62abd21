#include <catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "support/corpus.hpp"
#include "tdlm/checkpoint.hpp"
#include "tdlm/config.hpp"
#include "tdlm/data.hpp"
#include "tdlm/train.hpp"
#include "tdlm/tree_io.hpp"

using namespace tdlm;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

struct Run {
  int rc;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(TDLM_CLI) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p);
  std::string out;
  char buf[4096];
  for (std::size_t n; (n = fread(buf, 1, sizeof buf, p)) > 0;) out.append(buf, n);
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

fs::path workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "tdlm_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream(d / "corpus.txt") << testing::synthetic_corpus(200000, 7);
    return d;
  }();
  return dir;
}

std::string corpus() { return (workdir() / "corpus.txt").string(); }

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

double value_after(const std::string& out, const std::string& key) {
  for (const auto& l : lines_of(out))
    if (l.rfind(key + " ", 0) == 0) return std::stod(l.substr(key.size() + 1));
  FAIL("missing " << key << " in output:\n" << out);
  return 0;
}

const std::string kTiny = "d=16 layers=1 heads=2 S=32 B=4 eval_interval=10 checkpoint_interval=10 warmup=5";

}  // namespace

TEST_CASE("config files and overrides") {
  std::istringstream in("# comment\nS = 64\nlr=1e-3  # trailing\n\nlevel_weights=exp:1\n");
  auto c = parse_config(in);
  CHECK(c.S == 64);
  CHECK(c.lr == 1e-3);
  CHECK(c.level_weights == "exp:1");
  CHECK(c.B == 32);
  apply_override(c, "B=8");
  CHECK(c.B == 8);
  std::istringstream bad("S=64\nnope=1\n");
  try {
    parse_config(bad);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  std::istringstream badval("S=abc\n");
  CHECK_THROWS_AS(parse_config(badval), ParseError);
  CHECK_THROWS_AS(apply_override(c, "S"), InvalidConfig);
  c.split = 1.0;
  CHECK_THROWS_AS(c.validate(), InvalidConfig);
  RunConfig d;
  d.validate();
  CHECK(d.d == 128);
  CHECK(d.layers == 4);
  CHECK(d.heads == 4);
  CHECK(d.S == 256);
  CHECK(d.steps == 5000);
  CHECK(d.warmup == 250);
}

TEST_CASE("tokenizers round trip") {
  ByteTokenizer b;
  std::string all;
  for (int i = 0; i < 256; ++i) all.push_back(static_cast<char>(i));
  CHECK(b.vocab_size() == 257);
  CHECK(b.decode(b.encode(all)) == all);
  const std::vector<TokenId> with_pad{104, 105, 256, 256};
  CHECK(b.decode(with_pad) == "hi");
  const std::vector<TokenId> out_of_range{257};
  CHECK_THROWS_AS(b.decode(out_of_range), InvalidInput);

  const auto w = WordTokenizer::fit("the cat sat on the mat . the end", 5);
  CHECK(w.vocab_size() == 5);
  CHECK(w.encode("the") == std::vector<TokenId>{0});
  CHECK(w.decode(w.encode("the cat zebra")) == "the cat <unk>");
  const auto path = (workdir() / "words.txt").string();
  w.save(path);
  const auto back = WordTokenizer::load(path);
  CHECK(back.encode("the cat sat") == w.encode("the cat sat"));
}

TEST_CASE("ingest chunks, pads and splits") {
  std::vector<TokenId> toks(1 << 20, 7);
  const auto d = ingest(toks, 256, 0.05, 1, 256);
  CHECK(d.train_chunks() + d.val_chunks() == 4096);
  CHECK(d.val_chunks() == 205);
  const std::vector<TokenId> small{1, 2, 3, 4, 5, 6, 7};
  const auto p = ingest(small, 3, 0.3, 0, 9);
  CHECK(p.val == std::vector<TokenId>{7, 9, 9});
  CHECK(p.train.size() == 6u);
  const auto again = ingest(toks, 256, 0.05, 1, 256);
  CHECK(again.order == d.order);
  CHECK(ingest(toks, 256, 0.05, 2, 256).order != d.order);
  CHECK_THROWS_AS(ingest(std::vector<TokenId>{}, 4, 0.05, 0, 0), InvalidInput);
}

TEST_CASE("verify gate") {
  const auto r = run("verify --suite all");
  INFO(r.out);
  CHECK(r.rc == 0);
  int checks = 0;
  for (const auto& l : lines_of(r.out)) {
    if (l.rfind("CHECK ", 0) != 0) continue;
    ++checks;
    CHECK(l.ends_with(" PASS"));
  }
  CHECK(checks >= 14);
  CHECK(run("verify --suite nope").rc != 0);
}

TEST_CASE("build-tree on the byte vocabulary") {
  for (const auto& [K, lo, hi] : std::vector<std::tuple<int, int, int>>{{16, 3, 3}, {512, 1, 1}, {2, 9, 12}}) {
    const auto out = (workdir() / ("tree" + std::to_string(K) + ".txt")).string();
    const auto r = run("build-tree --corpus " + corpus() + " --K " + std::to_string(K) + " --out " + out);
    INFO(r.out);
    REQUIRE(r.rc == 0);
    const auto tree = load_tree(out);
    CHECK(tree.vocab_size() == 257);
    CHECK(tree.tree_height() >= lo);
    CHECK(tree.tree_height() <= hi);
    CHECK(r.out.find("H=" + std::to_string(tree.tree_height())) != std::string::npos);
  }
  CHECK(run("build-tree --corpus /nonexistent/file --K 4").rc != 0);
}

TEST_CASE("train, resume and evaluate") {
  const auto a = (workdir() / "ra").string(), b = (workdir() / "rb").string();
  const std::string common = " --corpus " + corpus() + " --steps 30 --set " + kTiny + " precision=double level_weights=exp:1";
  auto r = run("train --out " + a + common);
  INFO(r.out);
  REQUIRE(r.rc == 0);
  REQUIRE(run("train --out " + b + common + " stop_at=20").rc == 0);
  REQUIRE(run("train --resume --out " + b + common).rc == 0);
  const auto ma = read_metrics(a + "/metrics.log"), mb = read_metrics(b + "/metrics.log");
  REQUIRE(ma.size() == 4u);
  REQUIRE(mb.size() == 4u);
  CHECK(ma.back().line() == mb.back().line());

  std::ifstream log(a + "/metrics.log");
  std::string header, weights;
  std::getline(log, header);
  std::getline(log, weights);
  const auto tree = load_tree(a + "/tree.txt");
  const auto lw = height_weights(tree.tree_height(), parse_level_weights("exp:1"));
  std::ostringstream want;
  want << "# level_weights exp:1 ";
  for (std::size_t h = 0; h < lw.size(); ++h) want << (h ? "," : "") << std::setprecision(10) << lw[h];
  CHECK(weights == want.str());

  const auto e = run("eval --ckpt " + a + "/model.ckpt --tree " + a + "/tree.txt --corpus " + corpus() + " --samples 2");
  INFO(e.out);
  REQUIRE(e.rc == 0);
  double sum = 0;
  for (int h = 0; h < tree.tree_height(); ++h) {
    const auto key = "level " + std::to_string(h) + " elbo_nats";
    sum += value_after(e.out, key);
  }
  CHECK(sum == Approx(value_after(e.out, "total_nats")).margin(1e-6));
  CHECK(value_after(e.out, "ppl") == Approx(std::exp(value_after(e.out, "total_nats"))).epsilon(1e-6));

  const auto w = run("eval --ckpt " + a + "/model.ckpt --tree " + a + "/tree.txt --corpus " + corpus() + " --weights linear:1");
  CHECK(w.out.find("weighted_J ") != std::string::npos);

  const auto other = (workdir() / "tree512.txt").string();
  if (fs::exists(other)) {
    const auto m = run("eval --ckpt " + a + "/model.ckpt --tree " + other + " --corpus " + corpus());
    CHECK(m.rc != 0);
    CHECK(m.out.find("mismatch") != std::string::npos);
  }
}

TEST_CASE("non-finite loss keeps the last good checkpoint") {
  const auto dir = (workdir() / "diverge").string();
  const auto r = run("train --out " + dir + " --corpus " + corpus() +
                     " --steps 20 --set d=16 layers=1 heads=2 S=32 B=4 warmup=0 lr=1e38 checkpoint_interval=1 eval_interval=100");
  INFO(r.out);
  CHECK(r.rc == 2);
  CHECK(r.out.find("non-finite") != std::string::npos);
  long long step = -1;
  const auto m = load_checkpoint<float>(dir + "/model.ckpt", &step);
  CHECK(step >= 1);
  CHECK(step < 20);
  for (const auto& p : m.params())
    for (float v : p.data) CHECK(std::isfinite(v));
}

TEST_CASE("uniform evaluation on a complete binary tree") {
  const auto tree_path = (workdir() / "k2h4.txt").string();
  save_tree(complete_tree(2, 4), tree_path);
  const auto ids = (workdir() / "ids.txt").string();
  {
    std::ofstream f(ids);
    std::mt19937_64 rng(3);
    for (int i = 0; i < 64 * 1000; ++i) f << std::uniform_int_distribution<int>(0, 15)(rng) << ' ';
  }
  const auto r = run("eval --uniform --tree " + tree_path + " --corpus " + ids + " --tokenizer ids --S 64 --all --samples 16");
  INFO(r.out);
  REQUIRE(r.rc == 0);
  const double se = value_after(r.out, "std_error");
  CHECK(se < 0.03);
  CHECK(value_after(r.out, "total_nats") == Approx(4 * std::log(2.0)).margin(3 * se));
}

TEST_CASE("sample with a trace") {
  const auto a = (workdir() / "ra").string();
  REQUIRE(fs::exists(a + "/model.ckpt"));
  const auto trace = (workdir() / "trace.txt").string();
  const auto r = run("sample --ckpt " + a + "/model.ckpt --tree " + a + "/tree.txt --len 32 --steps 9 --seed 4 --trace-out " + trace);
  INFO(r.out);
  REQUIRE(r.rc == 0);
  const auto lines = lines_of(std::string(std::istreambuf_iterator<char>(*std::make_unique<std::ifstream>(trace)), {}));
  CHECK(lines.size() == 10u);
  CHECK(lines.front().rfind("0 1 ", 0) == 0);
  const auto again = run("sample --ckpt " + a + "/model.ckpt --tree " + a + "/tree.txt --len 32 --steps 9 --seed 4");
  CHECK(again.out == r.out);
  CHECK(run("sample --ckpt " + a + "/model.ckpt --tree " + a + "/tree.txt --steps 1").rc != 0);
}

TEST_CASE("ablation grids") {
  const auto empty = run("ablate --out " + (workdir() / "ab0").string());
  CHECK(empty.rc == 0);
  CHECK(empty.out.find("empty grid") != std::string::npos);

  const auto dir = workdir() / "ab";
  const auto r = run("ablate --out " + dir.string() + " --set corpus=" + corpus() + " steps=10 " + kTiny +
                     " --grid K=2,16 alloc=balanced --sample-steps 64 --len 8");
  INFO(r.out);
  REQUIRE(r.rc == 0);
  const auto h2 = load_tree((dir / "K=2" / "tree.txt").string()).tree_height();
  const auto h16 = load_tree((dir / "K=16" / "tree.txt").string()).tree_height();
  CHECK(h2 > h16);
  for (const char* k : {"K=2", "K=16"}) {
    CHECK(read_metrics((dir / k / "metrics.log").string()).size() == 2u);
    CHECK(fs::exists(dir / k / "trace_balanced.txt"));
  }
  CHECK(fs::exists(dir / "summary.txt"));

  const auto a = (workdir() / "ra").string();
  const auto dir2 = workdir() / "ab2";
  const auto s = run("ablate --out " + dir2.string() + " --ckpt " + a + "/model.ckpt --tree " + a +
                     "/tree.txt --grid alloc=64/32/32,112/8/8 --sample-steps 128 --len 8");
  INFO(s.out);
  REQUIRE(s.rc == 0);
  CHECK(s.out.find("alloc=64,32,32") != std::string::npos);
  CHECK(s.out.find("alloc=112,8,8") != std::string::npos);
  CHECK(fs::exists(dir2 / "trace_64-32-32.txt"));
  CHECK(fs::exists(dir2 / "trace_112-8-8.txt"));
}
