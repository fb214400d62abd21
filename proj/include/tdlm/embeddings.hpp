#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tdlm/error.hpp"

namespace tdlm {

// Row-major V x D matrix of token embeddings.
struct TokenEmbeddings {
  int rows = 0;
  int dim = 0;
  std::vector<double> data;

  TokenEmbeddings() = default;
  TokenEmbeddings(int v, int d) : rows(v), dim(d), data(static_cast<std::size_t>(v) * static_cast<std::size_t>(d), 0.0) {}

  std::span<double> row(int i) {
    return {data.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
  }
  std::span<const double> row(int i) const {
    return {data.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
  }

  bool finite() const {
    return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
  }
};

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

// Dense symmetric PPMI matrix from windowed co-occurrence counts.
inline std::vector<double> ppmi_matrix(std::span<const std::int32_t> corpus, int vocab, int window) {
  if (corpus.empty()) throw InvalidInput("ppmi: empty corpus");
  if (window < 1) throw InvalidConfig("ppmi: window must be >= 1");
  const std::size_t V = static_cast<std::size_t>(vocab);
  std::vector<double> counts(V * V, 0.0);
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(corpus.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto a = corpus[static_cast<std::size_t>(i)];
    if (a < 0 || a >= vocab) throw InvalidInput("ppmi: token " + std::to_string(a) + " outside vocabulary");
    for (std::ptrdiff_t j = std::max<std::ptrdiff_t>(0, i - window); j <= std::min<std::ptrdiff_t>(n - 1, i + window); ++j) {
      if (j == i) continue;
      counts[static_cast<std::size_t>(a) * V + static_cast<std::size_t>(corpus[static_cast<std::size_t>(j)])] += 1.0;
    }
  }
  std::vector<double> rowsum(V, 0.0);
  double total = 0.0;
  for (std::size_t a = 0; a < V; ++a) {
    for (std::size_t b = 0; b < V; ++b) rowsum[a] += counts[a * V + b];
    total += rowsum[a];
  }
  std::vector<double> m(V * V, 0.0);
  if (total == 0.0) return m;
  for (std::size_t a = 0; a < V; ++a) {
    for (std::size_t b = 0; b < V; ++b) {
      const double c = counts[a * V + b];
      if (c == 0.0) continue;
      const double pmi = std::log(c * total / (rowsum[a] * rowsum[b]));
      m[a * V + b] = std::max(0.0, pmi);
    }
  }
  return m;
}

// Flips each column so its largest-magnitude entry is positive (lowest row on ties).
inline void canonicalize_signs(std::vector<double>& basis, std::size_t rows, std::size_t cols) {
  for (std::size_t k = 0; k < cols; ++k) {
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < rows; ++i) {
      const double v = std::abs(basis[i * cols + k]);
      if (v > best + 1e-12) {
        best = v;
        arg = i;
      }
    }
    if (basis[arg * cols + k] < 0) {
      for (std::size_t i = 0; i < rows; ++i) basis[i * cols + k] = -basis[i * cols + k];
    }
  }
}

// Top-d eigenpairs (by magnitude) of a symmetric matrix via subspace
// iteration with Rayleigh-Ritz. Returns eigenvalues and a row-major V x d basis.
inline std::pair<std::vector<double>, std::vector<double>> symmetric_top_eigen(std::span<const double> m, int vocab,
                                                                               int d, std::uint64_t seed,
                                                                               int max_iter = 1000) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Index V = vocab;
  const Eigen::Index D = d;
  // Oversampling speeds up convergence when the spectrum is clustered at the cut.
  const Eigen::Index P = std::min<Eigen::Index>(V, D + std::max<Eigen::Index>(4, D / 2));
  Eigen::Map<const Mat> M(m.data(), V, V);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Mat q(V, P);
  for (Eigen::Index i = 0; i < V; ++i)
    for (Eigen::Index k = 0; k < P; ++k) q(i, k) = normal(rng);
  q = Eigen::HouseholderQR<Mat>(q).householderQ() * Mat::Identity(V, P);

  Eigen::VectorXd vals = Eigen::VectorXd::Zero(P);
  Mat vecs = q;
  for (int it = 0; it < max_iter; ++it) {
    const Mat z = M * q;
    Mat t = q.transpose() * z;
    t = 0.5 * (t + t.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Mat> es(t);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(P));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
      return std::abs(es.eigenvalues()(a)) > std::abs(es.eigenvalues()(b));
    });
    Mat w(P, P);
    for (Eigen::Index k = 0; k < P; ++k) {
      vals(k) = es.eigenvalues()(order[static_cast<std::size_t>(k)]);
      w.col(k) = es.eigenvectors().col(order[static_cast<std::size_t>(k)]);
    }
    vecs = q * w;
    const Mat resid = M * vecs.leftCols(D) - vecs.leftCols(D) * vals.head(D).asDiagonal();
    const double scale = std::max(1.0, std::abs(vals(0)));
    if (resid.cwiseAbs().maxCoeff() <= 1e-11 * scale) break;
    q = Eigen::HouseholderQR<Mat>(z).householderQ() * Mat::Identity(V, P);
  }

  std::vector<double> evals(vals.data(), vals.data() + D);
  std::vector<double> basis(static_cast<std::size_t>(V * D));
  for (Eigen::Index i = 0; i < V; ++i)
    for (Eigen::Index k = 0; k < D; ++k) basis[static_cast<std::size_t>(i * D + k)] = vecs(i, k);
  canonicalize_signs(basis, static_cast<std::size_t>(V), static_cast<std::size_t>(D));
  return {evals, basis};
}

// Embedding rows = eigenvectors scaled by sqrt(|eigenvalue|). Tokens that never
// occur get an all-zero row.
inline TokenEmbeddings ppmi_embeddings(std::span<const std::int32_t> corpus, int vocab, int dim, int window,
                                       std::uint64_t seed) {
  if (corpus.empty()) throw InvalidInput("ppmi: empty corpus");
  if (dim < 1 || dim > vocab) throw InvalidConfig("ppmi: embedding width must lie in [1, V]");
  const auto m = ppmi_matrix(corpus, vocab, window);
  auto [vals, basis] = symmetric_top_eigen(m, vocab, dim, seed);
  TokenEmbeddings emb(vocab, dim);
  for (int i = 0; i < vocab; ++i) {
    for (int k = 0; k < dim; ++k) {
      emb.data[static_cast<std::size_t>(i) * static_cast<std::size_t>(dim) + static_cast<std::size_t>(k)] =
          basis[static_cast<std::size_t>(i) * static_cast<std::size_t>(dim) + static_cast<std::size_t>(k)] *
          std::sqrt(std::abs(vals[static_cast<std::size_t>(k)]));
    }
  }
  std::vector<bool> present(static_cast<std::size_t>(vocab), false);
  for (auto tok : corpus) present[static_cast<std::size_t>(tok)] = true;
  for (int i = 0; i < vocab; ++i) {
    if (!present[static_cast<std::size_t>(i)]) std::fill(emb.row(i).begin(), emb.row(i).end(), 0.0);
  }
  return emb;
}

inline void save_embeddings(const TokenEmbeddings& emb, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path);
  out << "TDLM-EMB v1 V=" << emb.rows << " D=" << emb.dim << "\n";
  out << std::setprecision(17);
  for (int i = 0; i < emb.rows; ++i) {
    const auto r = emb.row(i);
    for (int k = 0; k < emb.dim; ++k) out << (k ? " " : "") << r[static_cast<std::size_t>(k)];
    out << "\n";
  }
}

inline TokenEmbeddings load_embeddings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header", 1);
  int v = -1, d = -1;
  {
    std::istringstream hs(line);
    std::string magic, ver, vf, df;
    hs >> magic >> ver >> vf >> df;
    if (magic != "TDLM-EMB" || ver != "v1" || vf.rfind("V=", 0) != 0 || df.rfind("D=", 0) != 0) {
      throw ParseError("bad embedding header '" + line + "'", 1);
    }
    try {
      v = std::stoi(vf.substr(2));
      d = std::stoi(df.substr(2));
    } catch (const std::exception&) {
      throw ParseError("bad embedding header '" + line + "'", 1);
    }
    if (v < 1 || d < 1) throw ParseError("embedding header has non-positive sizes", 1);
  }
  TokenEmbeddings emb(v, d);
  for (int i = 0; i < v; ++i) {
    if (!std::getline(in, line)) throw ParseError("expected " + std::to_string(v) + " rows", i + 2);
    std::istringstream ls(line);
    for (int k = 0; k < d; ++k) {
      double x;
      if (!(ls >> x)) throw ParseError("row has fewer than " + std::to_string(d) + " values", i + 2);
      emb.row(i)[static_cast<std::size_t>(k)] = x;
    }
    std::string extra;
    if (ls >> extra) throw ParseError("row has more than " + std::to_string(d) + " values", i + 2);
  }
  if (!emb.finite()) throw InvalidInput("embedding file contains non-finite values");
  return emb;
}

}  // namespace tdlm
