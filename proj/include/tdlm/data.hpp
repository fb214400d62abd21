#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "tdlm/error.hpp"
#include "tdlm/tree.hpp"

namespace tdlm {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Bytes 0..255 map to themselves; 256 is padding.
struct ByteTokenizer {
  static constexpr int kVocab = 257;
  static constexpr TokenId kPad = 256;

  int vocab_size() const { return kVocab; }
  TokenId pad() const { return kPad; }

  std::vector<TokenId> encode(const std::string& text) const {
    std::vector<TokenId> out(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) out[i] = static_cast<unsigned char>(text[i]);
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    out.reserve(ids.size());
    for (TokenId t : ids) {
      if (t < 0 || t > kPad) throw InvalidInput("byte tokenizer: id " + std::to_string(t) + " out of range");
      if (t != kPad) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
  }
};

// Whitespace-separated words and single punctuation marks. The n - 2 most
// frequent pieces get ids; then <unk> and <pad>.
class WordTokenizer {
 public:
  static std::vector<std::string> split(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    };
    for (char ch : text) {
      const auto c = static_cast<unsigned char>(ch);
      if (std::isspace(c)) {
        flush();
      } else if (std::isalnum(c) || c >= 128 || c == '\'') {
        cur.push_back(ch);
      } else {
        flush();
        out.emplace_back(1, ch);
      }
    }
    flush();
    return out;
  }

  static WordTokenizer fit(const std::string& text, int vocab) {
    if (vocab < 3) throw InvalidConfig("word tokenizer: vocab must be >= 3");
    std::unordered_map<std::string, long long> freq;
    for (auto& w : split(text)) ++freq[w];
    std::vector<std::pair<std::string, long long>> items(freq.begin(), freq.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    WordTokenizer t;
    const std::size_t keep = std::min(items.size(), static_cast<std::size_t>(vocab - 2));
    for (std::size_t i = 0; i < keep; ++i) t.add(items[i].first);
    t.unk_ = static_cast<TokenId>(t.words_.size());
    t.pad_ = t.unk_ + 1;
    return t;
  }

  int vocab_size() const { return pad_ + 1; }
  TokenId pad() const { return pad_; }
  TokenId unk() const { return unk_; }

  std::vector<TokenId> encode(const std::string& text) const {
    std::vector<TokenId> out;
    for (const auto& w : split(text)) {
      const auto it = index_.find(w);
      out.push_back(it == index_.end() ? unk_ : it->second);
    }
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId t : ids) {
      if (t < 0 || t > pad_) throw InvalidInput("word tokenizer: id " + std::to_string(t) + " out of range");
      if (t == pad_) continue;
      if (!out.empty()) out.push_back(' ');
      out += t == unk_ ? std::string("<unk>") : words_[static_cast<std::size_t>(t)];
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot write " + path);
    out << "TDLM-WORDS v1 n=" << vocab_size() << '\n';
    for (const auto& w : words_) out << w << '\n';
  }

  static WordTokenizer load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot read " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("TDLM-WORDS v1 n=", 0) != 0) throw ParseError(path + ": bad header", 1);
    const std::string declared = line.substr(16);
    WordTokenizer t;
    while (std::getline(in, line)) t.add(line);
    t.unk_ = static_cast<TokenId>(t.words_.size());
    t.pad_ = t.unk_ + 1;
    if (declared != std::to_string(t.vocab_size())) throw ParseError(path + ": word count does not match the header", 1);
    return t;
  }

 private:
  void add(const std::string& w) {
    index_.emplace(w, static_cast<TokenId>(words_.size()));
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId unk_ = 0;
  TokenId pad_ = 1;
};

// Fixed-length chunks; validation is the last ceil(split * n) chunks and the
// training order is a seeded shuffle.
struct Dataset {
  int S = 0;
  TokenId pad = 0;
  std::vector<TokenId> train;  // n_train * S
  std::vector<TokenId> val;    // n_val * S
  std::vector<int> order;      // shuffled training chunk ids

  int train_chunks() const { return static_cast<int>(train.size() / static_cast<std::size_t>(S)); }
  int val_chunks() const { return static_cast<int>(val.size() / static_cast<std::size_t>(S)); }
  std::span<const TokenId> train_chunk(int i) const {
    return {train.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(S), static_cast<std::size_t>(S)};
  }
};

inline Dataset ingest(std::span<const TokenId> tokens, int S, double split, std::uint64_t seed, TokenId pad) {
  if (tokens.empty()) throw InvalidInput("ingest: empty corpus");
  if (S < 1) throw InvalidConfig("ingest: S must be positive");
  if (!(split > 0 && split < 1)) throw InvalidConfig("ingest: split must lie in (0, 1)");
  const std::size_t n = (tokens.size() + static_cast<std::size_t>(S) - 1) / static_cast<std::size_t>(S);
  if (n < 2) throw InvalidInput("ingest: corpus shorter than two chunks");
  std::vector<TokenId> all(n * static_cast<std::size_t>(S), pad);
  std::copy(tokens.begin(), tokens.end(), all.begin());
  const std::size_t n_val = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(split * static_cast<double>(n))), 1, n - 1);
  Dataset d;
  d.S = S;
  d.pad = pad;
  const auto cut = all.begin() + static_cast<std::ptrdiff_t>((n - n_val) * static_cast<std::size_t>(S));
  d.train.assign(all.begin(), cut);
  d.val.assign(cut, all.end());
  d.order.resize(n - n_val);
  std::iota(d.order.begin(), d.order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(d.order.begin(), d.order.end(), rng);
  return d;
}

}  // namespace tdlm
