#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tdlm/error.hpp"
#include "tdlm/parallel.hpp"
#include "tdlm/tree.hpp"

namespace tdlm {

struct DenoiserConfig {
  int d = 128;
  int layers = 4;
  int heads = 4;
  int S = 256;
  int node_vocab = 0;
  int K = 0;
  int joint_L = 0;  // 0 disables the joint head

  void check() const {
    if (d < 2 || d % 2 != 0) throw InvalidConfig("model: d must be even and >= 2");
    if (layers < 0 || heads < 1 || d % heads != 0) throw InvalidConfig("model: d must be divisible by heads");
    if (S < 1 || node_vocab < 1 || K < 1) throw InvalidConfig("model: S, node_vocab and K must be positive");
    if (joint_L < 0 || (joint_L > 0 && S % joint_L != 0)) throw InvalidConfig("model: joint L must divide S");
    if (joint_L > 0 && static_cast<double>(joint_L) * std::log2(static_cast<double>(K)) > 20.0 + 1e-9) {
      throw InvalidConfig("model: K^L exceeds 2^20 joint targets");
    }
  }

  std::size_t joint_width() const {
    std::size_t c = 1;
    for (int l = 0; l < joint_L; ++l) c *= static_cast<std::size_t>(K);
    return c;
  }

  bool operator==(const DenoiserConfig&) const = default;
};

template <class T>
struct Tensor {
  std::string name;
  std::vector<int> dims;
  std::vector<T> data;

  std::size_t size() const { return data.size(); }
  int rows() const { return dims[0]; }
  int cols() const { return dims.size() > 1 ? dims[1] : 1; }
};

// Closed-form parameter count, independent of the tensor list.
inline std::size_t parameter_count(const DenoiserConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.d);
  const std::size_t per_block = 2 * d + 4 * d * d + 2 * (4 * d * d) + 4 * d + d;
  std::size_t n = static_cast<std::size_t>(c.node_vocab) * d + static_cast<std::size_t>(c.S) * d;
  n += 2 * d * d + 2 * d;
  n += static_cast<std::size_t>(c.layers) * per_block;
  n += d + d * static_cast<std::size_t>(c.K);
  if (c.joint_L > 0) n += static_cast<std::size_t>(c.joint_L) * d * c.joint_width();
  return n;
}

namespace detail {

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

// Bidirectional pre-norm transformer. Inputs are node ids and one time per
// row; outputs are K child logits per position and, optionally, K^L joint
// logits per neighborhood of L positions.
template <class T>
class Denoiser {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;

  struct Output {
    int B = 0;
    int S = 0;
    std::vector<T> logits;  // B*S*K
    std::vector<T> joint;   // B*(S/L)*K^L
  };

  Denoiser() = default;

  // Zero-initialized parameters with the full layout.
  explicit Denoiser(const DenoiserConfig& cfg) : cfg_(cfg) {
    cfg_.check();
    layout();
  }

  // Scaled-normal initialization: std 0.02 for matrices, 0.02/sqrt(2*layers)
  // for residual output projections, 1/sqrt(d) for the first time layer;
  // gains 1, biases 0.
  Denoiser(const DenoiserConfig& cfg, std::uint64_t seed) : Denoiser(cfg) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    const double resid = 0.02 / std::sqrt(2.0 * std::max(1, cfg_.layers));
    for (auto& p : params_) {
      const bool gain = p.name.ends_with(".g");
      const bool bias = p.name.find(".b") != std::string::npos && p.dims.size() == 1;
      double std = 0.02;
      if (p.name.ends_with("wo") || p.name.ends_with("mlp.w2")) std = resid;
      if (p.name == "time.w1") std = 1.0 / std::sqrt(static_cast<double>(cfg_.d));
      for (auto& v : p.data) {
        if (gain) v = T(1);
        else if (bias) v = T(0);
        else v = static_cast<T>(std * nd(rng));
      }
    }
  }

  const DenoiserConfig& config() const { return cfg_; }
  std::vector<Tensor<T>>& params() { return params_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

  Tensor<T>& param(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p;
    throw InvalidInput("model: no parameter named " + name);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  std::vector<Tensor<T>> zeros_like() const {
    auto g = params_;
    for (auto& p : g) std::fill(p.data.begin(), p.data.end(), T(0));
    return g;
  }

  // Runs the network and keeps the activations for backward().
  Output forward(std::span<const NodeId> ids, std::span<const double> t, int B) {
    if (B < 1 || ids.size() % static_cast<std::size_t>(B) != 0) throw InvalidInput("model: ids are not B x S");
    const int S = static_cast<int>(ids.size()) / B;
    if (S > cfg_.S) throw InvalidInput("model: sequence longer than the positional table");
    if (t.size() != static_cast<std::size_t>(B)) throw InvalidInput("model: need one time per row");
    if (cfg_.joint_L > 0 && S % cfg_.joint_L != 0) throw InvalidInput("model: S not a multiple of joint L");
    for (NodeId id : ids) {
      if (id < 0 || id >= cfg_.node_vocab) throw InvalidInput("model: node id " + std::to_string(id) + " out of range");
    }
    const int d = cfg_.d, N = B * S;
    c_.B = B;
    c_.S = S;
    c_.ids.assign(ids.begin(), ids.end());

    Mat X(N, d);
    {
      const auto E = cmap(lay_.node);
      const auto P = cmap(lay_.pos);
      for (int i = 0; i < N; ++i) X.row(i) = E.row(ids[static_cast<std::size_t>(i)]) + P.row(i % S);
    }

    // Time conditioning.
    c_.temb.resize(B, d);
    const int half = d / 2;
    for (int b = 0; b < B; ++b) {
      for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * k / half);
        const double arg = 1000.0 * t[static_cast<std::size_t>(b)] * freq;
        c_.temb(b, k) = static_cast<T>(std::sin(arg));
        c_.temb(b, k + half) = static_cast<T>(std::cos(arg));
      }
    }
    c_.ta.noalias() = c_.temb * cmap(lay_.tw1);
    c_.ta.rowwise() += cvec(lay_.tb1);
    c_.ts = c_.ta.unaryExpr([](T v) { return v * detail::sigmoid(v); });
    c_.cond.noalias() = c_.ts * cmap(lay_.tw2);
    c_.cond.rowwise() += cvec(lay_.tb2);

    c_.blocks.resize(static_cast<std::size_t>(cfg_.layers));
    for (int l = 0; l < cfg_.layers; ++l) {
      auto& bc = c_.blocks[static_cast<std::size_t>(l)];
      const auto& li = lay_.blocks[static_cast<std::size_t>(l)];
      bc.U = X;
      for (int i = 0; i < N; ++i) bc.U.row(i) += c_.cond.row(i / S);
      rms_forward(bc.U, li.g1, bc.r1, bc.N1);
      bc.Q.noalias() = bc.N1 * cmap(li.wq);
      bc.K.noalias() = bc.N1 * cmap(li.wk);
      bc.V.noalias() = bc.N1 * cmap(li.wv);
      attention_forward(bc);
      bc.X1 = bc.U;
      bc.X1.noalias() += bc.Ctx * cmap(li.wo);
      rms_forward(bc.X1, li.g2, bc.r2, bc.N2);
      bc.Hpre.noalias() = bc.N2 * cmap(li.w1);
      bc.Hpre.rowwise() += cvec(li.b1);
      {
        const auto x = bc.Hpre.array();
        bc.Hth = (T(detail::kGeluC) * (x + T(0.044715) * x.cube())).tanh().matrix();
        bc.Hact = (T(0.5) * x * (T(1) + bc.Hth.array())).matrix();
      }
      X = bc.X1;
      X.noalias() += bc.Hact * cmap(li.w2);
      X.rowwise() += cvec(li.b2);
    }
    c_.Xf = X;
    rms_forward(c_.Xf, lay_.gf, c_.rf, c_.F);

    Output out;
    out.B = B;
    out.S = S;
    out.logits.resize(static_cast<std::size_t>(N) * static_cast<std::size_t>(cfg_.K));
    MapM(out.logits.data(), N, cfg_.K).noalias() = c_.F * cmap(lay_.head);
    if (cfg_.joint_L > 0) {
      const int L = cfg_.joint_L;
      const Eigen::Index C = static_cast<Eigen::Index>(cfg_.joint_width());
      out.joint.resize(static_cast<std::size_t>(N / L) * static_cast<std::size_t>(C));
      CMapM Fr(c_.F.data(), N / L, L * d);
      MapM(out.joint.data(), N / L, C).noalias() = Fr * cmap(lay_.joint);
    }
    return out;
  }

  // Gradients of a scalar loss given d loss / d logits (and joint logits).
  std::vector<Tensor<T>> backward(std::span<const T> dlogits, std::span<const T> djoint = {}) const {
    const int B = c_.B, S = c_.S, N = B * S, d = cfg_.d;
    if (dlogits.size() != static_cast<std::size_t>(N) * static_cast<std::size_t>(cfg_.K)) {
      throw InvalidInput("model: dlogits shape does not match the last forward");
    }
    auto grads = zeros_like();
    auto gm = [&](int idx) { return MapM(grads[static_cast<std::size_t>(idx)].data.data(), params_[static_cast<std::size_t>(idx)].rows(), params_[static_cast<std::size_t>(idx)].cols()); };
    auto gv = [&](int idx) { return Eigen::Map<Vec>(grads[static_cast<std::size_t>(idx)].data.data(), static_cast<Eigen::Index>(params_[static_cast<std::size_t>(idx)].size())); };

    CMapM dY(dlogits.data(), N, cfg_.K);
    gm(lay_.head).noalias() += c_.F.transpose() * dY;
    Mat dF = dY * cmap(lay_.head).transpose();
    if (cfg_.joint_L > 0 && !djoint.empty()) {
      const int L = cfg_.joint_L;
      const Eigen::Index C = static_cast<Eigen::Index>(cfg_.joint_width());
      if (djoint.size() != static_cast<std::size_t>(N / L) * static_cast<std::size_t>(C)) {
        throw InvalidInput("model: djoint shape does not match the last forward");
      }
      CMapM dJ(djoint.data(), N / L, C);
      CMapM Fr(c_.F.data(), N / L, L * d);
      gm(lay_.joint).noalias() += Fr.transpose() * dJ;
      MapM(dF.data(), N / L, L * d).noalias() += dJ * cmap(lay_.joint).transpose();
    }
    Mat dX(N, d);
    rms_backward(c_.Xf, c_.rf, lay_.gf, dF, dX, gv(lay_.gf));

    Mat dC = Mat::Zero(B, d);
    for (int l = cfg_.layers - 1; l >= 0; --l) {
      const auto& bc = c_.blocks[static_cast<std::size_t>(l)];
      const auto& li = lay_.blocks[static_cast<std::size_t>(l)];
      // Feed-forward.
      gm(li.w2).noalias() += bc.Hact.transpose() * dX;
      gv(li.b2) += dX.colwise().sum();
      Mat dH = dX * cmap(li.w2).transpose();
      {
        const auto x = bc.Hpre.array();
        const auto th = bc.Hth.array();
        dH.array() *= T(0.5) * (T(1) + th) +
                      T(0.5) * x * (T(1) - th.square()) * T(detail::kGeluC) * (T(1) + T(3 * 0.044715) * x.square());
      }
      gm(li.w1).noalias() += bc.N2.transpose() * dH;
      gv(li.b1) += dH.colwise().sum();
      const Mat dN2 = dH * cmap(li.w1).transpose();
      Mat dX1 = dX;
      Mat tmp(N, d);
      rms_backward(bc.X1, bc.r2, li.g2, dN2, tmp, gv(li.g2));
      dX1 += tmp;
      // Attention.
      gm(li.wo).noalias() += bc.Ctx.transpose() * dX1;
      const Mat dCtx = dX1 * cmap(li.wo).transpose();
      Mat dQ(N, d), dK(N, d), dV(N, d);
      attention_backward(bc, dCtx, dQ, dK, dV);
      gm(li.wq).noalias() += bc.N1.transpose() * dQ;
      gm(li.wk).noalias() += bc.N1.transpose() * dK;
      gm(li.wv).noalias() += bc.N1.transpose() * dV;
      Mat dN1 = dQ * cmap(li.wq).transpose();
      dN1.noalias() += dK * cmap(li.wk).transpose();
      dN1.noalias() += dV * cmap(li.wv).transpose();
      rms_backward(bc.U, bc.r1, li.g1, dN1, tmp, gv(li.g1));
      dX = dX1 + tmp;
      for (int i = 0; i < N; ++i) dC.row(i / S) += dX.row(i);
    }

    auto dE = gm(lay_.node);
    auto dP = gm(lay_.pos);
    for (int i = 0; i < N; ++i) {
      dE.row(c_.ids[static_cast<std::size_t>(i)]) += dX.row(i);
      dP.row(i % S) += dX.row(i);
    }
    gv(lay_.tb2) += dC.colwise().sum();
    gm(lay_.tw2).noalias() += c_.ts.transpose() * dC;
    Mat dA = dC * cmap(lay_.tw2).transpose();
    dA.array() *= c_.ta.unaryExpr([](T v) {
                     const T s = detail::sigmoid(v);
                     return s * (T(1) + v * (T(1) - s));
                   }).array();
    gm(lay_.tw1).noalias() += c_.temb.transpose() * dA;
    gv(lay_.tb1) += dA.colwise().sum();
    return grads;
  }

 private:
  struct BlockIdx {
    int g1, wq, wk, wv, wo, g2, w1, b1, w2, b2;
  };
  struct Layout {
    int node = -1, pos = -1, tw1 = -1, tb1 = -1, tw2 = -1, tb2 = -1, gf = -1, head = -1, joint = -1;
    std::vector<BlockIdx> blocks;
  };
  struct BlockCache {
    Mat U, N1, Q, K, V, Ctx, X1, N2, Hpre, Hth, Hact;
    Vec r1, r2;
    std::vector<Mat> P;  // (b, head) attention probabilities
  };
  struct Cache {
    int B = 0, S = 0;
    std::vector<NodeId> ids;
    Mat temb, ta, ts, cond, Xf, F;
    Vec rf;
    std::vector<BlockCache> blocks;
  };

  int add(const std::string& name, std::vector<int> dims) {
    std::size_t n = 1;
    for (int v : dims) n *= static_cast<std::size_t>(v);
    params_.push_back({name, std::move(dims), std::vector<T>(n, T(0))});
    return static_cast<int>(params_.size()) - 1;
  }

  void layout() {
    const int d = cfg_.d;
    lay_.node = add("emb.node", {cfg_.node_vocab, d});
    lay_.pos = add("emb.pos", {cfg_.S, d});
    lay_.tw1 = add("time.w1", {d, d});
    lay_.tb1 = add("time.b1", {d});
    lay_.tw2 = add("time.w2", {d, d});
    lay_.tb2 = add("time.b2", {d});
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = "blk" + std::to_string(l) + ".";
      BlockIdx b{};
      b.g1 = add(p + "ln1.g", {d});
      b.wq = add(p + "attn.wq", {d, d});
      b.wk = add(p + "attn.wk", {d, d});
      b.wv = add(p + "attn.wv", {d, d});
      b.wo = add(p + "attn.wo", {d, d});
      b.g2 = add(p + "ln2.g", {d});
      b.w1 = add(p + "mlp.w1", {d, 4 * d});
      b.b1 = add(p + "mlp.b1", {4 * d});
      b.w2 = add(p + "mlp.w2", {4 * d, d});
      b.b2 = add(p + "mlp.b2", {d});
      lay_.blocks.push_back(b);
    }
    lay_.gf = add("final.ln.g", {d});
    lay_.head = add("head.w", {d, cfg_.K});
    if (cfg_.joint_L > 0) lay_.joint = add("joint.w", {cfg_.joint_L * d, static_cast<int>(cfg_.joint_width())});
  }

  CMapM cmap(int idx) const {
    const auto& p = params_[static_cast<std::size_t>(idx)];
    return CMapM(p.data.data(), p.rows(), p.cols());
  }
  Eigen::Map<const Vec> cvec(int idx) const {
    const auto& p = params_[static_cast<std::size_t>(idx)];
    return Eigen::Map<const Vec>(p.data.data(), static_cast<Eigen::Index>(p.size()));
  }

  static constexpr double kNormEps = 1e-5;

  void rms_forward(const Mat& x, int gidx, Vec& r, Mat& y) const {
    const auto g = cvec(gidx);
    const Eigen::Index n = x.rows();
    r.resize(n);
    y.resize(n, x.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      r(i) = std::sqrt(x.row(i).squaredNorm() / static_cast<T>(x.cols()) + static_cast<T>(kNormEps));
      y.row(i) = x.row(i).cwiseProduct(g) / r(i);
    }
  }

  template <class GV>
  void rms_backward(const Mat& x, const Vec& r, int gidx, const Mat& dy, Mat& dx, GV&& dg) const {
    const auto g = cvec(gidx);
    const Eigen::Index n = x.rows();
    const T dim = static_cast<T>(x.cols());
    dx.resize(n, x.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const T ri = r(i);
      dg += dy.row(i).cwiseProduct(x.row(i)) / ri;
      const Vec gdy = dy.row(i).cwiseProduct(g);
      const T dot = gdy.dot(x.row(i));
      dx.row(i) = gdy / ri - x.row(i) * (dot / (dim * ri * ri * ri));
    }
  }

  void attention_forward(BlockCache& bc) const {
    const int B = c_.B, S = c_.S, H = cfg_.heads, dh = cfg_.d / H;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    bc.P.assign(static_cast<std::size_t>(B * H), Mat());
    bc.Ctx.resize(B * S, cfg_.d);
    parallel_for(B * H, [&](int job) {
      const int b = job / H, h = job % H;
      auto q = bc.Q.block(b * S, h * dh, S, dh);
      auto k = bc.K.block(b * S, h * dh, S, dh);
      auto v = bc.V.block(b * S, h * dh, S, dh);
      Mat& p = bc.P[static_cast<std::size_t>(job)];
      p.noalias() = (q * k.transpose()) * scale;
      const Eigen::Matrix<T, Eigen::Dynamic, 1> mx = p.rowwise().maxCoeff();
      p = (p.colwise() - mx).array().exp().matrix();
      const Eigen::Matrix<T, Eigen::Dynamic, 1> inv = p.rowwise().sum().cwiseInverse();
      p = inv.asDiagonal() * p;
      bc.Ctx.block(b * S, h * dh, S, dh).noalias() = p * v;
    });
  }

  void attention_backward(const BlockCache& bc, const Mat& dCtx, Mat& dQ, Mat& dK, Mat& dV) const {
    const int B = c_.B, S = c_.S, H = cfg_.heads, dh = cfg_.d / H;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    parallel_for(B * H, [&](int job) {
      const int b = job / H, h = job % H;
      auto q = bc.Q.block(b * S, h * dh, S, dh);
      auto k = bc.K.block(b * S, h * dh, S, dh);
      auto v = bc.V.block(b * S, h * dh, S, dh);
      auto dc = dCtx.block(b * S, h * dh, S, dh);
      const Mat& p = bc.P[static_cast<std::size_t>(job)];
      dV.block(b * S, h * dh, S, dh).noalias() = p.transpose() * dc;
      Mat dp = dc * v.transpose();
      const Eigen::Matrix<T, Eigen::Dynamic, 1> dot = dp.cwiseProduct(p).rowwise().sum();
      dp = p.cwiseProduct(dp.colwise() - dot);
      dQ.block(b * S, h * dh, S, dh).noalias() = (dp * k) * scale;
      dK.block(b * S, h * dh, S, dh).noalias() = (dp.transpose() * q) * scale;
    });
  }

  DenoiserConfig cfg_;
  std::vector<Tensor<T>> params_;
  Layout lay_;
  Cache c_;
};

}  // namespace tdlm
