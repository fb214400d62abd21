#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "tdlm/error.hpp"
#include "tdlm/model.hpp"
#include "tdlm/optim.hpp"

namespace tdlm {

namespace detail {

inline void write_f32_le(std::ostream& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
  out.write(reinterpret_cast<const char*>(&u), 4);
}

inline float read_f32_le(std::istream& in) {
  std::uint32_t u;
  in.read(reinterpret_cast<char*>(&u), 4);
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

inline void write_f64_le(std::ostream& out, double f) {
  std::uint64_t u;
  std::memcpy(&u, &f, 8);
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap64(u);
  out.write(reinterpret_cast<const char*>(&u), 8);
}

inline double read_f64_le(std::istream& in) {
  std::uint64_t u;
  in.read(reinterpret_cast<char*>(&u), 8);
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap64(u);
  double f;
  std::memcpy(&f, &u, 8);
  return f;
}

// Double models are stored as f64 so resumed 64-bit runs stay bitwise exact.
template <class T>
constexpr bool wide_storage = std::is_same_v<T, double>;

template <class T>
std::string header_line(long long step) {
  return "TDLM-CKPT v1 step=" + std::to_string(step) + (wide_storage<T> ? " dtype=f64" : "");
}

template <class T, class U>
void write_tensor(std::ostream& out, const std::string& name, const std::vector<int>& dims, const std::vector<U>& data) {
  out << name << ' ' << dims.size();
  for (int v : dims) out << ' ' << v;
  out << '\n';
  for (U v : data) {
    if constexpr (wide_storage<T>) {
      write_f64_le(out, static_cast<double>(v));
    } else {
      write_f32_le(out, static_cast<float>(v));
    }
  }
}

struct RawTensor {
  std::string name;
  std::vector<int> dims;
  std::vector<double> data;
};

inline std::vector<RawTensor> read_tensor_file(const std::string& path, long long& step) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("TDLM-CKPT v1 step=", 0) != 0) {
    throw ParseError(path + ": bad checkpoint header", 1);
  }
  bool wide = false;
  {
    std::istringstream hs(line.substr(18));
    std::string extra;
    if (!(hs >> step)) throw ParseError(path + ": bad step in header", 1);
    while (hs >> extra) {
      if (extra == "dtype=f64") wide = true;
      else if (extra != "dtype=f32") throw ParseError(path + ": unknown header field " + extra, 1);
    }
  }
  std::vector<RawTensor> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    RawTensor t;
    int rank = -1;
    if (!(ls >> t.name >> rank) || rank < 0 || rank > 8) throw ParseError(path + ": bad tensor line '" + line + "'", lineno);
    std::size_t n = 1;
    for (int r = 0; r < rank; ++r) {
      int v;
      if (!(ls >> v) || v < 0) throw ParseError(path + ": bad tensor dims for " + t.name, lineno);
      t.dims.push_back(v);
      n *= static_cast<std::size_t>(v);
    }
    t.data.resize(n);
    for (auto& f : t.data) f = wide ? read_f64_le(in) : read_f32_le(in);
    if (!in) throw ParseError(path + ": truncated data for " + t.name, lineno);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace detail

inline std::vector<int> config_vector(const DenoiserConfig& c) {
  return {c.d, c.layers, c.heads, c.S, c.node_vocab, c.K, c.joint_L};
}

// True when the file stores f64 tensors.
inline bool checkpoint_is_wide(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("TDLM-CKPT v1 step=", 0) != 0) throw ParseError(path + ": bad checkpoint header", 1);
  return line.find("dtype=f64") != std::string::npos;
}

template <class T>
void save_checkpoint(const Denoiser<T>& model, long long step, const std::string& path) {
  {
    std::ofstream out(path + ".tmp", std::ios::binary);
    if (!out) throw InvalidInput("cannot write " + path);
    out << detail::header_line<T>(step) << '\n';
    const auto cv = config_vector(model.config());
    detail::write_tensor<T>(out, "meta.config", {static_cast<int>(cv.size())}, cv);
    for (const auto& p : model.params()) detail::write_tensor<T>(out, p.name, p.dims, p.data);
    if (!out) throw InvalidInput("write failed for " + path);
  }
  std::rename((path + ".tmp").c_str(), path.c_str());
}

template <class T>
Denoiser<T> load_checkpoint(const std::string& path, long long* step_out = nullptr) {
  long long step = 0;
  const auto raw = detail::read_tensor_file(path, step);
  if (raw.empty() || raw.front().name != "meta.config" || raw.front().data.size() != 7) {
    throw ParseError(path + ": missing meta.config", 2);
  }
  const auto& m = raw.front().data;
  DenoiserConfig cfg;
  cfg.d = static_cast<int>(m[0]);
  cfg.layers = static_cast<int>(m[1]);
  cfg.heads = static_cast<int>(m[2]);
  cfg.S = static_cast<int>(m[3]);
  cfg.node_vocab = static_cast<int>(m[4]);
  cfg.K = static_cast<int>(m[5]);
  cfg.joint_L = static_cast<int>(m[6]);
  Denoiser<T> model(cfg);
  if (raw.size() != model.params().size() + 1) throw InvalidInput(path + ": tensor count does not match the config");
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    auto& p = model.params()[i];
    const auto& r = raw[i + 1];
    if (r.name != p.name || r.dims != p.dims) throw InvalidInput(path + ": unexpected tensor " + r.name);
    for (std::size_t j = 0; j < r.data.size(); ++j) p.data[j] = static_cast<T>(r.data[j]);
  }
  if (step_out) *step_out = step;
  return model;
}

template <class T>
void save_optimizer(const AdamState<T>& s, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + path);
  out << detail::header_line<T>(s.step) << '\n';
  for (const auto& t : s.m) detail::write_tensor<T>(out, "adam.m." + t.name, t.dims, t.data);
  for (const auto& t : s.v) detail::write_tensor<T>(out, "adam.v." + t.name, t.dims, t.data);
}

template <class T>
AdamState<T> load_optimizer(const std::string& path, const std::vector<Tensor<T>>& params) {
  long long step = 0;
  const auto raw = detail::read_tensor_file(path, step);
  auto s = make_adam_state(params);
  s.step = step;
  if (raw.size() != 2 * params.size()) throw InvalidInput(path + ": optimizer state does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& rm = raw[i];
    const auto& rv = raw[i + params.size()];
    if (rm.name != "adam.m." + params[i].name || rv.name != "adam.v." + params[i].name || rm.dims != params[i].dims) {
      throw InvalidInput(path + ": unexpected tensor " + rm.name);
    }
    for (std::size_t j = 0; j < rm.data.size(); ++j) {
      s.m[i].data[j] = static_cast<T>(rm.data[j]);
      s.v[i].data[j] = static_cast<T>(rv.data[j]);
    }
  }
  return s;
}

}  // namespace tdlm
