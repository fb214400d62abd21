#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tdlm/checkpoint.hpp"
#include "tdlm/config.hpp"
#include "tdlm/data.hpp"
#include "tdlm/oracle.hpp"
#include "tdlm/sampler.hpp"
#include "tdlm/train.hpp"
#include "tdlm/tree_io.hpp"

namespace fs = std::filesystem;
using namespace tdlm;

namespace {

struct Encoded {
  std::vector<TokenId> tokens;
  int vocab = 0;
  std::optional<TokenId> pad;
};

// "ids" reads whitespace-separated integer token ids.
Encoded encode_corpus(const std::string& path, const std::string& tokenizer, int vocab, const std::string& words_in,
                      const std::string& words_out) {
  const auto text = read_file(path);
  Encoded e;
  if (tokenizer == "bytes") {
    ByteTokenizer t;
    e.tokens = t.encode(text);
    e.vocab = t.vocab_size();
    e.pad = t.pad();
  } else if (tokenizer == "words") {
    const auto t = words_in.empty() ? WordTokenizer::fit(text, vocab) : WordTokenizer::load(words_in);
    if (!words_out.empty()) t.save(words_out);
    e.tokens = t.encode(text);
    e.vocab = t.vocab_size();
    e.pad = t.pad();
  } else if (tokenizer == "ids") {
    std::istringstream in(text);
    for (long long v; in >> v;) {
      if (v < 0) throw InvalidInput(path + ": negative token id");
      e.tokens.push_back(static_cast<TokenId>(v));
      e.vocab = std::max(e.vocab, static_cast<int>(v) + 1);
    }
    if (!in.eof()) throw InvalidInput(path + ": expected integer token ids");
  } else {
    throw InvalidConfig("unknown tokenizer '" + tokenizer + "'");
  }
  if (e.tokens.empty()) throw InvalidInput(path + ": empty corpus");
  return e;
}

void check_vocab(const TokenTree& tree, const Encoded& e) {
  if (e.tokens.empty()) return;
  const TokenId mx = *std::max_element(e.tokens.begin(), e.tokens.end());
  if (mx >= tree.vocab_size()) {
    throw InvalidInput("corpus token " + std::to_string(mx) + " outside the tree vocabulary of " +
                       std::to_string(tree.vocab_size()));
  }
}

template <class F>
auto with_precision(bool wide, F&& f) {
  if (wide) return f(double{});
  return f(float{});
}

RunConfig gather_config(const std::string& file, const std::vector<std::string>& sets) {
  RunConfig c = file.empty() ? RunConfig{} : load_config(file);
  for (const auto& kv : sets) apply_override(c, kv);
  return c;
}

void print_tree_summary(const TokenTree& tree, std::ostream& out) {
  std::map<std::size_t, int> hist;
  for (NodeId n = 0; n < tree.node_count(); ++n)
    if (!tree.is_leaf(n)) ++hist[tree.children(n).size()];
  out << "tree K=" << tree.branching() << " H=" << tree.tree_height() << " nodes=" << tree.node_count()
      << " leaves=" << tree.vocab_size() << '\n';
  out << "branching";
  for (const auto& [k, c] : hist) out << ' ' << k << ':' << c;
  out << '\n';
}

// ---------------------------------------------------------------------------

struct BuildTreeArgs {
  std::string config, corpus, out = "tree.txt", tokenizer;
  std::vector<std::string> sets;
};

int cmd_build_tree(const BuildTreeArgs& a) {
  auto c = gather_config(a.config, a.sets);
  if (!a.corpus.empty()) c.corpus = a.corpus;
  if (!a.tokenizer.empty()) c.tokenizer = a.tokenizer;
  c.validate();
  if (c.corpus.empty()) throw InvalidConfig("build-tree: --corpus is required");
  const auto e = encode_corpus(c.corpus, c.tokenizer, c.vocab, "", "");
  const auto tree = build_corpus_tree(e.tokens, e.vocab, c);
  const auto problems = validate(tree);
  if (!problems.empty()) throw Error("build-tree: invalid tree: " + problems.front());
  save_tree(tree, a.out);
  print_tree_summary(tree, std::cout);
  std::cout << "wrote " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, corpus, out;
  long long steps = 0;
  bool resume = false;
  std::vector<std::string> sets;
};

struct TrainSummary {
  int H = 0;
  int K = 0;
  double val_nats = 0;
  std::string checkpoint, tree;
  bool diverged = false;
};

TrainSummary run_training(RunConfig c, bool resume, std::ostream& echo) {
  c.validate();
  if (c.corpus.empty()) throw InvalidConfig("train: corpus is required");
  fs::create_directories(c.out);
  const std::string words = (fs::path(c.out) / "words.txt").string();
  const auto e = encode_corpus(c.corpus, c.tokenizer, c.vocab, resume && fs::exists(words) ? words : "",
                               c.tokenizer == "words" ? words : "");
  const auto data = ingest(e.tokens, c.S, c.split, c.seed, e.pad.value_or(0));
  const std::string tree_path = (fs::path(c.out) / "tree.txt").string();
  TokenTree tree;
  if (!c.tree.empty()) {
    tree = load_tree(c.tree);
    check_vocab(tree, e);
  } else if (resume && fs::exists(tree_path)) {
    tree = load_tree(tree_path);
  } else {
    tree = build_corpus_tree(std::span<const TokenId>(data.train), e.vocab, c);
  }
  save_tree(tree, tree_path);
  {
    std::ofstream cf(fs::path(c.out) / "config.txt");
    c.write(cf);
  }
  TrainPaths paths{(fs::path(c.out) / "model.ckpt").string(), (fs::path(c.out) / "metrics.log").string()};
  echo << "# chunks train=" << data.train_chunks() << " val=" << data.val_chunks() << " H=" << tree.tree_height()
       << " K=" << tree.branching() << " uniform_nats=" << tree.tree_height() * std::log(tree.branching()) << '\n';
  return with_precision(c.precision == "double", [&](auto tag) {
    using T = decltype(tag);
    long long start = 0;
    std::optional<AdamState<T>> state;
    Denoiser<T> model;
    if (resume && fs::exists(paths.checkpoint)) {
      model = load_checkpoint<T>(paths.checkpoint, &start);
      if (!(model.config() == model_config(c, tree))) throw InvalidInput("train: checkpoint does not match the config");
      state = load_optimizer(paths.checkpoint + ".opt", model.params());
    } else {
      model = Denoiser<T>(model_config(c, tree), c.seed);
    }
    const auto r = train_model(model, tree, data, c, paths, &echo, start, state ? &*state : nullptr);
    TrainSummary s;
    s.H = tree.tree_height();
    s.K = tree.branching();
    s.val_nats = r.metrics.empty() ? NAN : r.metrics.back().val_nats;
    s.checkpoint = paths.checkpoint;
    s.tree = tree_path;
    s.diverged = r.diverged;
    if (r.diverged) std::cerr << "tdlm train: aborted: " << r.message << '\n';
    echo << "# done seconds=" << r.seconds << '\n';
    return s;
  });
}

int cmd_train(const TrainArgs& a) {
  auto c = gather_config(a.config, a.sets);
  if (!a.corpus.empty()) c.corpus = a.corpus;
  if (!a.out.empty()) c.out = a.out;
  if (a.steps > 0) {
    c.steps = a.steps;
    c.warmup = std::min(c.warmup, c.steps);
  }
  const auto s = run_training(c, a.resume, std::cout);
  return s.diverged ? 2 : 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, tree, corpus, tokenizer = "bytes", words, weights;
  int vocab = 0;
  int samples = 4;
  int S = 0;
  double split = 0.05;
  bool all = false;
  bool uniform = false;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
  const auto tree = load_tree(a.tree);
  const auto e = encode_corpus(a.corpus, a.tokenizer, a.vocab, a.words, "");
  check_vocab(tree, e);
  const NoiseSchedule sched(tree.tree_height());
  auto report = [&](const ElboReport& r, std::optional<double> weighted) {
    std::cout << std::setprecision(8);
    for (std::size_t h = 0; h < r.per_level.size(); ++h) std::cout << "level " << h << " elbo_nats " << r.per_level[h] << '\n';
    std::cout << "total_nats " << r.nats_per_token << '\n';
    std::cout << "std_error " << r.std_error << '\n';
    std::cout << "ppl " << r.perplexity << '\n';
    if (weighted) std::cout << "weighted_J " << *weighted << '\n';
  };
  auto select = [&](int S) {
    const auto d = ingest(e.tokens, S, a.split, a.seed, e.pad.value_or(0));
    if (!a.all) return d.val;
    auto both = d.train;
    both.insert(both.end(), d.val.begin(), d.val.end());
    return both;
  };
  if (a.uniform) {
    const int S = a.S > 0 ? a.S : 256;
    const auto toks = select(S);
    std::mt19937_64 rng(a.seed);
    const int K = tree.branching();
    auto zero = [K](const CorruptedBatch& b) { return std::vector<double>(b.z.size() * static_cast<std::size_t>(K), 0.0); };
    report(elbo_estimate(zero, tree, sched, toks, S, a.samples, rng, e.pad), std::nullopt);
    return 0;
  }
  if (a.ckpt.empty()) throw InvalidConfig("eval: --ckpt is required unless --uniform is given");
  return with_precision(checkpoint_is_wide(a.ckpt), [&](auto tag) {
    using T = decltype(tag);
    auto model = load_checkpoint<T>(a.ckpt);
    if (model.config().K != tree.branching() || model.config().node_vocab != tree.node_count()) {
      throw InvalidInput("eval: tree/checkpoint K mismatch (checkpoint K=" + std::to_string(model.config().K) +
                         ", tree K=" + std::to_string(tree.branching()) + ")");
    }
    const int S = a.S > 0 ? a.S : model.config().S;
    const auto toks = select(S);
    const auto r = evaluate_model(model, tree, sched, toks, S, a.samples, a.seed, e.pad);
    std::optional<double> weighted;
    if (!a.weights.empty()) {
      const auto lw = height_weights(tree.tree_height(), parse_level_weights(a.weights));
      weighted = weighted_objective(model, tree, sched, toks, S, lw, a.seed, e.pad);
    }
    report(r, weighted);
    return 0;
  });
}

// ---------------------------------------------------------------------------

struct SampleArgs {
  std::string ckpt, tree, alloc = "balanced", trace_out, words;
  int len = 0;
  int steps = 512;
  double temp = 1.0;
  std::uint64_t seed = 0;
  bool ids = false;
};

std::vector<TokenId> sample_tokens(const std::string& ckpt, const TokenTree& tree, const SampleArgs& a) {
  const NoiseSchedule sched(tree.tree_height());
  return with_precision(checkpoint_is_wide(ckpt), [&](auto tag) {
    using T = decltype(tag);
    auto model = load_checkpoint<T>(ckpt);
    if (model.config().K != tree.branching() || model.config().node_vocab != tree.node_count()) {
      throw InvalidInput("sample: tree/checkpoint K mismatch");
    }
    GenerationConfig g;
    g.S = a.len > 0 ? a.len : model.config().S;
    if (g.S > model.config().S) throw InvalidConfig("sample: --len exceeds the model context");
    g.allocation = parse_allocation(a.alloc, a.steps, tree.tree_height());
    g.temperature = a.temp;
    g.seed = a.seed;
    const LogitFn fn = [&model](std::span<const NodeId> z, double t) {
      const double tt[1] = {t};
      const auto out = model.forward(z, tt, 1);
      return std::vector<double>(out.logits.begin(), out.logits.end());
    };
    GenerationTrace trace;
    auto toks = generate(fn, tree, sched, g, a.trace_out.empty() ? nullptr : &trace);
    if (!a.trace_out.empty()) {
      std::ofstream out(a.trace_out);
      if (!out) throw InvalidInput("cannot write " + a.trace_out);
      trace.write(out);
    }
    return toks;
  });
}

int cmd_sample(const SampleArgs& a) {
  const auto tree = load_tree(a.tree);
  const auto toks = sample_tokens(a.ckpt, tree, a);
  if (a.ids || (a.words.empty() && tree.vocab_size() != ByteTokenizer::kVocab)) {
    for (std::size_t i = 0; i < toks.size(); ++i) std::cout << (i ? " " : "") << toks[i];
    std::cout << '\n';
  } else if (!a.words.empty()) {
    std::cout << WordTokenizer::load(a.words).decode(toks) << '\n';
  } else {
    std::cout << ByteTokenizer{}.decode(toks) << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_verify(const std::string& suite) {
  const auto r = run_suite(suite, std::cout);
  return all_pass(r) ? 0 : 1;
}

// ---------------------------------------------------------------------------

struct AblateArgs {
  std::string config, out = "ablate", ckpt, tree;
  std::vector<std::string> sets, grids;
  int sample_steps = 512;
  int len = 0;
};

int cmd_ablate(const AblateArgs& a) {
  std::vector<std::pair<std::string, std::vector<std::string>>> train_grid;
  std::vector<std::string> allocs;
  for (const auto& g : a.grids) {
    const auto eq = g.find('=');
    if (eq == std::string::npos) throw InvalidConfig("ablate: --grid expects key=v1,v2");
    const std::string key = g.substr(0, eq);
    std::vector<std::string> vals;
    std::stringstream ss(g.substr(eq + 1));
    for (std::string v; std::getline(ss, v, ',');)
      if (!v.empty()) vals.push_back(v);
    if (vals.empty()) continue;
    if (key == "alloc") {
      for (auto v : vals) {
        std::replace(v.begin(), v.end(), '/', ',');
        allocs.push_back(v);
      }
    } else {
      RunConfig probe;
      probe.set(key, vals.front());
      train_grid.emplace_back(key, vals);
    }
  }
  if (train_grid.empty() && allocs.empty()) {
    std::cout << "ablate: empty grid, nothing to do\n";
    return 0;
  }
  const auto base = gather_config(a.config, a.sets);
  fs::create_directories(a.out);
  std::vector<std::string> table;
  auto sample_runs = [&](const std::string& name, const std::string& ckpt, const std::string& tree_path,
                         const fs::path& dir) {
    const auto tree = load_tree(tree_path);
    for (const auto& al : allocs) {
      SampleArgs sa;
      sa.alloc = al;
      sa.steps = a.sample_steps;
      sa.len = a.len;
      std::string tag = al;
      std::replace(tag.begin(), tag.end(), ',', '-');
      sa.trace_out = (dir / ("trace_" + tag + ".txt")).string();
      sample_tokens(ckpt, tree, sa);
      table.push_back("sample " + name + " alloc=" + al + " trace=" + sa.trace_out);
    }
  };
  if (train_grid.empty()) {
    if (a.ckpt.empty() || a.tree.empty()) throw InvalidConfig("ablate: an allocation-only grid needs --ckpt and --tree");
    sample_runs("ckpt", a.ckpt, a.tree, a.out);
  } else {
    std::vector<std::size_t> idx(train_grid.size(), 0);
    while (true) {
      RunConfig c = base;
      std::string name;
      for (std::size_t i = 0; i < train_grid.size(); ++i) {
        const auto& [key, vals] = train_grid[i];
        c.set(key, vals[idx[i]]);
        if (key == "K") c.tree.clear();
        name += (name.empty() ? "" : "_") + key + "=" + vals[idx[i]];
      }
      for (char& ch : name)
        if (ch == ':' || ch == '/') ch = '-';
      c.out = (fs::path(a.out) / name).string();
      std::cout << "# run " << name << '\n';
      const auto s = run_training(c, false, std::cout);
      std::ostringstream row;
      row << "run " << name << " K=" << s.K << " H=" << s.H << " val_nats=" << std::setprecision(8) << s.val_nats
          << " metrics=" << (fs::path(c.out) / "metrics.log").string();
      table.push_back(row.str());
      if (!s.diverged) sample_runs(name, s.checkpoint, s.tree, c.out);
      std::size_t k = 0;
      while (k < idx.size() && ++idx[k] == train_grid[k].second.size()) idx[k++] = 0;
      if (k == idx.size()) break;
    }
  }
  std::ofstream summary(fs::path(a.out) / "summary.txt");
  for (const auto& line : table) {
    std::cout << line << '\n';
    summary << line << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tdlm: tree-structured discrete diffusion language model"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker cap (same as TDLM_THREADS)");

  BuildTreeArgs bt;
  auto* build = app.add_subcommand("build-tree", "Build a vocabulary tree from a corpus");
  build->add_option("--config", bt.config, "key=value config file");
  build->add_option("--set", bt.sets, "Override key=value")->take_all();
  build->add_option("--corpus", bt.corpus, "Corpus file");
  build->add_option("--tokenizer", bt.tokenizer, "bytes | words");
  build->add_option("--out", bt.out, "Tree file to write");
  int bt_K = 0, bt_vocab = 0;
  build->add_option("--K", bt_K, "Branching factor");
  build->add_option("--vocab", bt_vocab, "Word vocabulary size");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train a denoiser");
  train->add_option("--config", tr.config, "key=value config file");
  train->add_option("--set", tr.sets, "Override key=value")->take_all();
  train->add_option("--corpus", tr.corpus, "Corpus file");
  train->add_option("--out", tr.out, "Output directory");
  train->add_option("--steps", tr.steps, "Training steps");
  train->add_flag("--resume", tr.resume, "Continue from the checkpoint in the output directory");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Negative ELBO of a checkpoint on a corpus");
  eval->add_option("--ckpt", ev.ckpt, "Checkpoint");
  eval->add_option("--tree", ev.tree, "Tree file")->required();
  eval->add_option("--corpus", ev.corpus, "Corpus file")->required();
  eval->add_option("--tokenizer", ev.tokenizer, "bytes | words | ids");
  eval->add_option("--words", ev.words, "Word list written by train");
  eval->add_option("--samples", ev.samples, "Corruptions per sequence");
  eval->add_option("--S", ev.S, "Chunk length (defaults to the model context)");
  eval->add_option("--split", ev.split, "Validation fraction");
  eval->add_option("--seed", ev.seed, "Seed");
  eval->add_option("--weights", ev.weights, "Level weights for the training objective, e.g. exp:1");
  eval->add_flag("--all", ev.all, "Score every chunk instead of the validation split");
  eval->add_flag("--uniform", ev.uniform, "Score the uniform child predictor");

  SampleArgs sa;
  auto* sample = app.add_subcommand("sample", "Generate text");
  sample->add_option("--ckpt", sa.ckpt, "Checkpoint")->required();
  sample->add_option("--tree", sa.tree, "Tree file")->required();
  sample->add_option("--len", sa.len, "Sequence length");
  sample->add_option("--steps", sa.steps, "Total reverse steps");
  sample->add_option("--alloc", sa.alloc, "balanced or per-level counts, top level first");
  sample->add_option("--temp", sa.temp, "Temperature");
  sample->add_option("--seed", sa.seed, "Seed");
  sample->add_option("--trace-out", sa.trace_out, "Per-step height histogram file");
  sample->add_option("--words", sa.words, "Word list for decoding");
  sample->add_flag("--ids", sa.ids, "Print token ids");

  std::string suite = "all";
  auto* verify = app.add_subcommand("verify", "Run the brute-force oracle checks");
  verify->add_option("--suite", suite, "kolmogorov | mc | reverse | elbo | backward | params | all");

  AblateArgs ab;
  auto* ablate = app.add_subcommand("ablate", "Run a grid of training and sampling runs");
  ablate->add_option("--config", ab.config, "Base config file");
  ablate->add_option("--set", ab.sets, "Override key=value")->take_all();
  ablate->add_option("--grid", ab.grids, "key=v1,v2 (alloc=256/256,448/64 for samplers)")->take_all();
  ablate->add_option("--out", ab.out, "Output directory");
  ablate->add_option("--ckpt", ab.ckpt, "Checkpoint for allocation-only grids");
  ablate->add_option("--tree", ab.tree, "Tree for allocation-only grids");
  ablate->add_option("--sample-steps", ab.sample_steps, "Total reverse steps per sample");
  ablate->add_option("--len", ab.len, "Sample length");

  CLI11_PARSE(app, argc, argv);
  if (threads > 0) setenv("TDLM_THREADS", std::to_string(threads).c_str(), 1);

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (name == "build-tree") {
      if (bt_K > 0) bt.sets.push_back("K=" + std::to_string(bt_K));
      if (bt_vocab > 0) bt.sets.push_back("vocab=" + std::to_string(bt_vocab));
      return cmd_build_tree(bt);
    }
    if (name == "train") return cmd_train(tr);
    if (name == "eval") return cmd_eval(ev);
    if (name == "sample") return cmd_sample(sa);
    if (name == "verify") return cmd_verify(suite);
    if (name == "ablate") return cmd_ablate(ab);
  } catch (const ParseError& e) {
    std::cerr << "tdlm " << name << ": parse error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "tdlm " << name << ": error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
