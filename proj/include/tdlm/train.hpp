#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tdlm/checkpoint.hpp"
#include "tdlm/config.hpp"
#include "tdlm/data.hpp"
#include "tdlm/embeddings.hpp"
#include "tdlm/error.hpp"
#include "tdlm/loss.hpp"
#include "tdlm/model.hpp"
#include "tdlm/optim.hpp"
#include "tdlm/schedule.hpp"
#include "tdlm/tree.hpp"
#include "tdlm/tree_build.hpp"
#include "tdlm/tree_io.hpp"

namespace tdlm {

struct MetricsRow {
  long long step = 0;
  double train_J = 0;  // clipped, level-weighted objective
  double train_E = 0;  // raw objective
  double val_nats = 0;
  double val_ppl = 0;
  std::vector<double> per_level;

  std::string line() const {
    std::ostringstream s;
    s << std::setprecision(8) << step << ' ' << train_J << ' ' << val_nats << ' ' << val_ppl;
    for (std::size_t h = 0; h < per_level.size(); ++h) s << " lvl:" << h << '=' << per_level[h];
    s << " train_E=" << train_E;
    return s.str();
  }

  static MetricsRow parse(const std::string& line) {
    std::istringstream in(line);
    MetricsRow r;
    if (!(in >> r.step >> r.train_J >> r.val_nats >> r.val_ppl)) throw ParseError("metrics: bad line '" + line + "'", 0);
    for (std::string tok; in >> tok;) {
      if (tok.rfind("lvl:", 0) == 0) {
        r.per_level.push_back(std::stod(tok.substr(tok.find('=') + 1)));
      } else if (tok.rfind("train_E=", 0) == 0) {
        r.train_E = std::stod(tok.substr(8));
      }
    }
    return r;
  }
};

inline std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read " + path);
  std::vector<MetricsRow> rows;
  for (std::string line; std::getline(in, line);) {
    if (line.empty() || line[0] == '#') continue;
    rows.push_back(MetricsRow::parse(line));
  }
  return rows;
}

// Trailing moving averages of width w (shorter at the front).
inline std::vector<double> moving_average(const std::vector<double>& v, std::size_t w) {
  std::vector<double> out(v.size());
  double acc = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i];
    if (i >= w) acc -= v[i - w];
    out[i] = acc / static_cast<double>(std::min(i + 1, w));
  }
  return out;
}

inline NoiseSchedule make_schedule(const RunConfig& c, int H) { return NoiseSchedule(H, c.clip_cap, c.denom_floor); }

inline AdamConfig adam_config(const RunConfig& c) {
  AdamConfig a;
  a.lr = c.lr;
  a.weight_decay = c.weight_decay;
  a.clip_norm = c.clip_norm;
  a.warmup = static_cast<int>(c.warmup);
  a.total_steps = static_cast<int>(c.steps);
  a.final_fraction = c.final_lr_fraction;
  return a;
}

inline DenoiserConfig model_config(const RunConfig& c, const TokenTree& tree) {
  DenoiserConfig m;
  m.d = c.d;
  m.layers = c.layers;
  m.heads = c.heads;
  m.S = c.S;
  m.node_vocab = tree.node_count();
  m.K = tree.branching();
  m.joint_L = c.joint_L;
  return m;
}

// PPMI embeddings of the corpus, then the balanced tree.
inline TokenTree build_corpus_tree(std::span<const TokenId> corpus, int vocab, const RunConfig& c) {
  const auto emb = ppmi_embeddings(corpus, vocab, std::min(c.emb_dim, vocab), c.window, c.seed);
  return build_tree(emb, {c.K, c.ratio_min, c.ratio_max, c.seed, 25});
}

// Chunk ids for the rows of a step: epochs walk seeded permutations of the
// training chunks, so the batch depends only on (seed, step).
class BatchSchedule {
 public:
  BatchSchedule(const Dataset& d, std::uint64_t seed) : data_(&d), seed_(seed) {}

  std::vector<TokenId> batch(long long step, int B) {
    const long long n = data_->train_chunks();
    std::vector<TokenId> out;
    out.reserve(static_cast<std::size_t>(B) * static_cast<std::size_t>(data_->S));
    for (int b = 0; b < B; ++b) {
      const long long pos = step * B + b;
      const long long epoch = pos / n;
      if (epoch != epoch_) {
        perm_ = data_->order;
        if (epoch > 0) {
          std::mt19937_64 rng(seed_ * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(epoch));
          std::shuffle(perm_.begin(), perm_.end(), rng);
        }
        epoch_ = epoch;
      }
      const auto chunk = data_->train_chunk(perm_[static_cast<std::size_t>(pos % n)]);
      out.insert(out.end(), chunk.begin(), chunk.end());
    }
    return out;
  }

 private:
  const Dataset* data_;
  std::uint64_t seed_;
  long long epoch_ = -1;
  std::vector<int> perm_;
};

template <class T>
ElboReport evaluate_model(Denoiser<T>& model, const TokenTree& tree, const NoiseSchedule& sched,
                          std::span<const TokenId> tokens, int S, int samples, std::uint64_t seed,
                          std::optional<TokenId> pad) {
  std::mt19937_64 rng(seed);
  auto fn = [&](const CorruptedBatch& b) { return model.forward(b.z, b.t, b.B).logits; };
  return elbo_estimate(fn, tree, sched, tokens, S, samples, rng, pad);
}

// Mean clipped, level-weighted objective J over an evaluation set.
template <class T>
double weighted_objective(Denoiser<T>& model, const TokenTree& tree, const NoiseSchedule& sched,
                          std::span<const TokenId> tokens, int S, const std::vector<double>& lw, std::uint64_t seed,
                          std::optional<TokenId> pad, int rows_per_batch = 32) {
  std::mt19937_64 rng(seed);
  const int nseq = static_cast<int>(tokens.size() / static_cast<std::size_t>(S));
  double total = 0;
  long long count = 0;
  for (int first = 0; first < nseq; first += rows_per_batch) {
    const int B = std::min(rows_per_batch, nseq - first);
    const auto slice = tokens.subspan(static_cast<std::size_t>(first) * static_cast<std::size_t>(S),
                                      static_cast<std::size_t>(B) * static_cast<std::size_t>(S));
    const auto batch = corrupt(tree, sched, slice, B, S, rng);
    const auto out = model.forward(batch.z, batch.t, B);
    const auto maps = tdlm_loss<T>(out.logits, batch, tree, sched, lw);
    for (std::size_t i = 0; i < maps.J.size(); ++i) {
      if (pad && batch.tokens[i] == *pad) continue;
      total += maps.J[i];
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

struct TrainOutcome {
  std::vector<MetricsRow> metrics;
  long long last_good_step = -1;  // step of the last written checkpoint
  bool diverged = false;
  std::string message;
  double seconds = 0;
};

struct TrainPaths {
  std::string checkpoint;  // empty disables checkpoints
  std::string metrics;     // empty disables the log file
};

template <class T>
TrainOutcome train_model(Denoiser<T>& model, const TokenTree& tree, const Dataset& data, const RunConfig& cfg,
                         const TrainPaths& paths, std::ostream* echo = nullptr, long long start_step = 0,
                         AdamState<T>* resume_state = nullptr) {
  cfg.validate();
  const int H = tree.tree_height();
  const auto sched = make_schedule(cfg, H);
  const auto lw = height_weights(H, parse_level_weights(cfg.level_weights));
  const auto acfg = adam_config(cfg);
  auto state = resume_state ? std::move(*resume_state) : make_adam_state(model.params());
  BatchSchedule batches(data, cfg.seed);
  const std::optional<TokenId> pad = data.pad;
  const int S = data.S;
  const NeighborhoodConfig joint{std::max(1, cfg.joint_L)};

  std::ofstream log;
  if (!paths.metrics.empty()) {
    log.open(paths.metrics, std::ios::app);
    if (!log) throw InvalidInput("cannot write " + paths.metrics);
    log << "# tdlm train K=" << tree.branching() << " H=" << H << " V=" << tree.vocab_size() << " S=" << S
        << " B=" << cfg.B << " steps=" << cfg.steps << " start=" << start_step << '\n';
    log << "# level_weights " << cfg.level_weights << ' ';
    for (std::size_t h = 0; h < lw.size(); ++h) log << (h ? "," : "") << std::setprecision(10) << lw[h];
    log << '\n' << std::flush;
  }

  TrainOutcome result;
  const auto t0 = std::chrono::steady_clock::now();
  double acc_J = 0, acc_E = 0;
  long long acc_n = 0;

  auto emit = [&](long long step) {
    const auto rep = evaluate_model(model, tree, sched, data.val, S, cfg.eval_samples, cfg.seed + 1, pad);
    MetricsRow row;
    row.step = step;
    row.train_J = acc_n ? acc_J / static_cast<double>(acc_n) : 0.0;
    row.train_E = acc_n ? acc_E / static_cast<double>(acc_n) : 0.0;
    row.val_nats = rep.nats_per_token;
    row.val_ppl = rep.perplexity;
    row.per_level = rep.per_level;
    acc_J = acc_E = 0;
    acc_n = 0;
    if (log.is_open()) log << row.line() << '\n' << std::flush;
    if (echo) *echo << row.line() << '\n' << std::flush;
    result.metrics.push_back(row);
  };
  auto checkpoint = [&](long long step) {
    if (paths.checkpoint.empty()) return;
    save_checkpoint(model, step, paths.checkpoint);
    save_optimizer(state, paths.checkpoint + ".opt");
    result.last_good_step = step;
  };

  if (start_step == 0) emit(0);
  for (long long step = start_step; step < cfg.steps; ++step) {
    const auto tokens = batches.batch(step, cfg.B);
    std::mt19937_64 rng(cfg.seed * 1000003ull + static_cast<std::uint64_t>(step) + 17);
    const auto batch = corrupt(tree, sched, tokens, cfg.B, S, rng);
    const auto out = model.forward(batch.z, batch.t, cfg.B);
    const auto maps = tdlm_loss<T>(out.logits, batch, tree, sched, lw);
    double J = maps.mean_J();
    double E = 0;
    for (double e : maps.E) E += e;
    E /= static_cast<double>(maps.E.size());
    std::vector<T> djoint;
    if (cfg.joint_L > 0) {
      const auto jm = joint_loss<T>(out.joint, batch, tree, sched, joint, lw, &djoint);
      J += jm.mean_J();
    }
    if (!std::isfinite(J) || !std::isfinite(E)) {
      result.diverged = true;
      result.message = "non-finite loss at step " + std::to_string(step) + "; last good checkpoint at step " +
                       std::to_string(result.last_good_step);
      break;
    }
    auto grads = model.backward(tdlm_loss_grad<T>(out.logits, batch, tree, sched, lw), djoint);
    const double gnorm = optimizer_step(model.params(), grads, state, acfg);
    if (!std::isfinite(gnorm)) {
      result.diverged = true;
      result.message = "non-finite gradient at step " + std::to_string(step) + "; last good checkpoint at step " +
                       std::to_string(result.last_good_step);
      break;
    }
    acc_J += J;
    acc_E += E;
    ++acc_n;
    const long long done = step + 1;
    if (done % cfg.eval_interval == 0 || done == cfg.steps) emit(done);
    if (done % cfg.checkpoint_interval == 0 || done == cfg.steps || done == cfg.stop_at) checkpoint(done);
    if (done == cfg.stop_at) break;
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (log.is_open() && result.diverged) log << "# aborted: " << result.message << '\n';
  return result;
}

}  // namespace tdlm
