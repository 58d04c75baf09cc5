#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vtlm/error.hpp"
#include "vtlm/rng.hpp"

namespace vtlm {

using TokenId = std::int32_t;

enum Special : TokenId { kPad = 0, kMask = 1, kBos = 2, kEos = 3, kUnk = 4, kSep = 5 };
inline constexpr TokenId kNumReserved = 6;
inline constexpr std::string_view kEndOfWord = "</w>";

/// Language/segment ids fed to the language embedding.
enum class Lang : std::int32_t { L1 = 0, L2 = 1, VIS = 2 };
inline constexpr int kNumLangs = 3;

inline std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && s[i] == ' ') ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ') ++j;
    if (j > i) out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

/// Token <-> id bijection. Ids 0..5 are reserved for the special tokens.
class Vocab {
 public:
  Vocab() : Vocab(std::vector<std::string>{}) {}

  explicit Vocab(const std::vector<std::string>& regular) {
    for (const char* s : {"[PAD]", "[MASK]", "[BOS]", "[EOS]", "[UNK]", "[SEP]"}) push(s);
    for (const auto& t : regular) {
      if (index_.count(t)) throw DataError("duplicate vocabulary entry '" + t + "'");
      push(t);
    }
  }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  TokenId size() const { return static_cast<TokenId>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::string fingerprint() const {
    std::uint64_t h = fnv1a("vocab");
    for (const auto& t : tokens_) h = fnv1a(t + "\n", h);
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path);
    std::vector<std::string> all;
    std::string line;
    while (std::getline(in, line)) all.push_back(line);
    if (all.size() < static_cast<std::size_t>(kNumReserved)) throw SchemaError(path + ": vocabulary lacks reserved tokens");
    return Vocab(std::vector<std::string>(all.begin() + kNumReserved, all.end()));
  }

 private:
  void push(const std::string& t) {
    index_.emplace(t, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(t);
  }
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

using SymbolPair = std::pair<std::string, std::string>;

/// Ordered BPE merges; earlier merges take precedence when segmenting.
class MergeTable {
 public:
  MergeTable() = default;
  explicit MergeTable(std::vector<SymbolPair> merges) : merges_(std::move(merges)) {
    for (std::size_t i = 0; i < merges_.size(); ++i) rank_.emplace(key(merges_[i]), static_cast<int>(i));
  }

  const std::vector<SymbolPair>& merges() const { return merges_; }
  std::size_t size() const { return merges_.size(); }

  /// Segments one word into symbols, the last carrying the end-of-word marker.
  std::vector<std::string> segment(const std::string& word) const {
    auto cached = cache_.find(word);
    if (cached != cache_.end()) return cached->second;
    std::vector<std::string> sym = initial_symbols(word);
    for (;;) {
      int best = -1;
      std::size_t at = 0;
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
        auto it = rank_.find(sym[i] + '\x1f' + sym[i + 1]);
        if (it != rank_.end() && (best < 0 || it->second < best)) {
          best = it->second;
          at = i;
        }
      }
      if (best < 0) break;
      sym[at] += sym[at + 1];
      sym.erase(sym.begin() + static_cast<std::ptrdiff_t>(at) + 1);
    }
    cache_.emplace(word, sym);
    return sym;
  }

  static std::vector<std::string> initial_symbols(const std::string& word) {
    std::vector<std::string> sym;
    for (char c : word) sym.emplace_back(1, c);
    if (!sym.empty()) sym.back() += kEndOfWord;
    return sym;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    for (const auto& [a, b] : merges_) out << a << ' ' << b << '\n';
  }

  static MergeTable load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path);
    std::vector<SymbolPair> merges;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      const auto sp = line.find(' ');
      if (sp == std::string::npos || sp == 0 || sp + 1 == line.size()) throw ParseError("malformed merge '" + line + "'", n);
      merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    return MergeTable(std::move(merges));
  }

 private:
  static std::string key(const SymbolPair& p) { return p.first + '\x1f' + p.second; }
  std::vector<SymbolPair> merges_;
  std::unordered_map<std::string, int> rank_;
  mutable std::unordered_map<std::string, std::vector<std::string>> cache_;
};

/// Learns up to `num_merges` merges by repeatedly joining the most frequent
/// adjacent symbol pair. Ties go to the lexicographically smallest pair.
/// Stops early when no pair is left.
inline MergeTable learn_bpe(const std::vector<std::string>& sentences, int num_merges) {
  if (num_merges <= 0) throw UsageError("learn_bpe: num_merges must be positive");
  if (sentences.empty()) throw UsageError("learn_bpe: empty corpus");
  std::map<std::string, long> freq;
  for (const auto& s : sentences) {
    for (auto& w : split_words(s)) ++freq[w];
  }
  std::vector<std::pair<std::vector<std::string>, long>> words;
  for (const auto& [w, c] : freq) words.emplace_back(MergeTable::initial_symbols(w), c);

  std::vector<SymbolPair> merges;
  for (int step = 0; step < num_merges; ++step) {
    std::map<SymbolPair, long> pairs;
    for (const auto& [sym, c] : words) {
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) pairs[{sym[i], sym[i + 1]}] += c;
    }
    if (pairs.empty()) break;
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it) {
      if (it->second > best->second) best = it;  // map order keeps the smallest pair on ties
    }
    const SymbolPair chosen = best->first;
    merges.push_back(chosen);
    for (auto& [sym, _] : words) {
      std::vector<std::string> next;
      next.reserve(sym.size());
      for (std::size_t i = 0; i < sym.size(); ++i) {
        if (i + 1 < sym.size() && sym[i] == chosen.first && sym[i + 1] == chosen.second) {
          next.push_back(sym[i] + sym[i + 1]);
          ++i;
        } else {
          next.push_back(sym[i]);
        }
      }
      sym = std::move(next);
    }
  }
  return MergeTable(std::move(merges));
}

/// Vocabulary over the BPE inventory: every base symbol seen in the corpus
/// (with and without the end-of-word marker), then merged symbols in merge
/// order.
inline Vocab build_vocab(const MergeTable& merges, const std::vector<std::string>& sentences) {
  std::set<std::string> base;
  for (const auto& s : sentences) {
    for (const auto& w : split_words(s)) {
      for (char c : w) {
        base.insert(std::string(1, c));
        base.insert(std::string(1, c) + std::string(kEndOfWord));
      }
    }
  }
  std::vector<std::string> tokens(base.begin(), base.end());
  std::set<std::string> seen(base.begin(), base.end());
  for (const auto& [a, b] : merges.merges()) {
    if (seen.insert(a + b).second) tokens.push_back(a + b);
  }
  return Vocab(tokens);
}

/// BPE segmentation plus vocabulary lookup.
class Tokenizer {
 public:
  Tokenizer(MergeTable merges, Vocab vocab) : merges_(std::move(merges)), vocab_(std::move(vocab)) {}

  const Vocab& vocab() const { return vocab_; }
  const MergeTable& merges() const { return merges_; }

  std::vector<TokenId> encode(const std::string& sentence) const { return encode_words(split_words(sentence)).first; }

  /// Token ids plus, for each word, the index of its first token
  /// (with one trailing entry equal to the token count).
  std::pair<std::vector<TokenId>, std::vector<int>> encode_words(const std::vector<std::string>& words) const {
    std::vector<TokenId> ids;
    std::vector<int> starts;
    for (const auto& w : words) {
      starts.push_back(static_cast<int>(ids.size()));
      for (const auto& s : merges_.segment(w)) ids.push_back(vocab_.id(s));
    }
    starts.push_back(static_cast<int>(ids.size()));
    return {std::move(ids), std::move(starts)};
  }

  /// Inverse of encode for in-vocabulary text. Special tokens other than
  /// [MASK]/[UNK] are dropped.
  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id == kPad || id == kBos || id == kEos || id == kSep) continue;
      if (id == kMask || id == kUnk) {
        out += vocab_.token(id);
        out += ' ';
        continue;
      }
      out += vocab_.token(id);
    }
    std::string text;
    std::size_t i = 0;
    while (i < out.size()) {
      if (out.compare(i, kEndOfWord.size(), kEndOfWord) == 0) {
        text += ' ';
        i += kEndOfWord.size();
      } else {
        text += out[i++];
      }
    }
    while (!text.empty() && text.back() == ' ') text.pop_back();
    std::string squeezed;
    for (char c : text) {
      if (c == ' ' && !squeezed.empty() && squeezed.back() == ' ') continue;
      squeezed += c;
    }
    return squeezed;
  }

 private:
  MergeTable merges_;
  Vocab vocab_;
};

}  // namespace vtlm
