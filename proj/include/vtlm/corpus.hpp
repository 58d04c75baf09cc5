#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "vtlm/bpe.hpp"
#include "vtlm/error.hpp"
#include "vtlm/rng.hpp"

namespace vtlm {

struct RegionFeature {
  std::vector<float> feat;
  std::array<float, 4> bbox{};  // x1, y1, x2, y2 in [0, 1]
  std::int32_t label = 0;

  bool operator==(const RegionFeature&) const = default;
};

/// Gold span of a groundable noun; `stream` 0 = source, 1 = target.
/// Spans are word offsets in TripletRecord and token offsets in
/// TripletExample; `end` is exclusive.
struct EntitySpan {
  int stream = 0;
  int start = 0;
  int end = 0;

  bool operator==(const EntitySpan&) const = default;
};

/// One line of a triplet file: text pair plus regions.
struct TripletRecord {
  std::string id;
  std::string src;
  std::string tgt;
  std::vector<RegionFeature> regions;
  std::vector<EntitySpan> entities;

  bool operator==(const TripletRecord&) const = default;
};

struct CorpusHeader {
  int version = 1;
  int feat_dim = 0;
  int regions = 0;
  int label_vocab = 0;

  bool operator==(const CorpusHeader&) const = default;
};

/// Tokenised training unit.
struct TripletExample {
  std::string id;
  std::vector<TokenId> src;
  std::vector<TokenId> tgt;
  std::vector<RegionFeature> regions;
  std::vector<EntitySpan> entity_spans;
};

struct GenConfig {
  int examples = 22000;
  int num_labels = 40;
  int num_attributes = 12;
  int regions = 8;
  int feat_dim = 64;
  double sigma = 0.5;
  int min_objects = 2;
  int max_objects = 4;

  void validate() const {
    if (examples < 1) throw ConfigError("examples must be >= 1");
    if (feat_dim < 1) throw ConfigError("feat_dim must be >= 1");
    if (min_objects < 1 || max_objects < min_objects) throw ConfigError("need 1 <= min_objects <= max_objects");
    if (regions < max_objects) {
      throw ConfigError("regions (" + std::to_string(regions) + ") smaller than max objects per caption (" +
                        std::to_string(max_objects) + ")");
    }
    if (sigma < 0) throw ConfigError("sigma must be >= 0");
  }
};

/// Generated corpus together with the generator's hidden state that the
/// grounding checks need.
struct SyntheticCorpus {
  CorpusHeader header;
  std::vector<TripletRecord> records;
  std::vector<std::vector<float>> centers;  // one per label
  std::vector<std::string> label_words;     // source-language object word per label
  /// For each record, the region slot grounding each source entity, in order.
  std::vector<std::vector<int>> entity_slots;
};

namespace lexicon {

inline const std::vector<std::string>& objects() {
  static const std::vector<std::string> words = {
      "dog",   "cat",    "horse", "bird",  "car",   "bus",    "bike",  "boat",  "tree",   "house",
      "man",   "woman",  "child", "ball",  "kite",  "hat",    "chair", "table", "cup",    "book",
      "lamp",  "phone",  "clock", "bench", "fence", "flag",   "tent",  "truck", "train",  "plane",
      "shoe",  "bag",    "box",   "drum",  "apple", "cake",   "fish",  "cow",   "sheep",  "guitar",
      "goat",  "duck",   "vase",  "bowl",  "sofa",  "wagon",  "tower", "bridge"};
  return words;
}

inline const std::vector<std::string>& attributes() {
  static const std::vector<std::string> words = {"red",   "blue",   "green",  "yellow", "black", "white",
                                                 "brown", "pink",   "orange", "purple", "gray",  "golden",
                                                 "small", "large",  "old",    "young"};
  return words;
}

inline const std::vector<std::string>& connectors() {
  static const std::vector<std::string> words = {"and", "with", "near"};
  return words;
}

inline const std::string& article() {
  static const std::string a = "a";
  return a;
}

/// Fixed bijective source -> target word mapping (reversed spelling plus a
/// suffix), standing in for a second language.
inline std::string translate_word(const std::string& w) { return std::string(w.rbegin(), w.rend()) + "en"; }

}  // namespace lexicon

namespace detail {

inline float round4(double v) { return static_cast<float>(std::round(v * 1e4) / 1e4); }

inline std::array<float, 4> slot_bbox(int slot, int regions) {
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(regions))));
  const int rows = (regions + cols - 1) / cols;
  const double w = 1.0 / cols;
  const double h = 1.0 / rows;
  const int cx = slot % cols;
  const int cy = slot / cols;
  return {round4(cx * w + 0.1 * w), round4(cy * h + 0.1 * h), round4((cx + 1) * w - 0.1 * w),
          round4((cy + 1) * h - 0.1 * h)};
}

}  // namespace detail

/// Seeded three-way parallel corpus.
///
/// Each caption mentions 2-4 (attribute, object) phrases joined by
/// connectors and always ends with an object word. The target side maps
/// every word through lexicon::translate_word, puts the attribute before the
/// article inside each phrase and reverses the order of all but the last
/// phrase. Regions 0..k-1 ground the mentioned objects in source order; the
/// remaining slots are distractors with uniformly drawn labels. Features are
/// the label's cluster centre plus N(0, sigma^2) noise, rounded to 1e-4.
inline SyntheticCorpus generate_synthetic(const GenConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto& objects = lexicon::objects();
  const auto& attrs = lexicon::attributes();
  if (cfg.num_labels < 1 || cfg.num_labels > static_cast<int>(objects.size())) {
    throw ConfigError("num_labels must be in [1, " + std::to_string(objects.size()) + "]");
  }
  if (cfg.num_attributes < 1 || cfg.num_attributes > static_cast<int>(attrs.size())) {
    throw ConfigError("num_attributes must be in [1, " + std::to_string(attrs.size()) + "]");
  }

  SyntheticCorpus out;
  out.header = {1, cfg.feat_dim, cfg.regions, cfg.num_labels};
  out.label_words.assign(objects.begin(), objects.begin() + cfg.num_labels);

  {
    std::set<std::string> l1;
    std::set<std::string> l2;
    std::vector<std::string> all(out.label_words);
    all.insert(all.end(), attrs.begin(), attrs.begin() + cfg.num_attributes);
    all.insert(all.end(), lexicon::connectors().begin(), lexicon::connectors().end());
    all.push_back(lexicon::article());
    for (const auto& w : all) {
      l1.insert(w);
      l2.insert(lexicon::translate_word(w));
    }
    for (const auto& w : l2) {
      if (l1.count(w)) throw ConfigError("lexicon collision on '" + w + "'");
    }
  }

  Pcg32 center_rng = Pcg32::for_consumer(seed, "generator.centers");
  out.centers.resize(static_cast<std::size_t>(cfg.num_labels));
  for (auto& c : out.centers) {
    c.resize(static_cast<std::size_t>(cfg.feat_dim));
    for (auto& x : c) x = detail::round4(center_rng.normal());
  }

  Pcg32 caption_rng = Pcg32::for_consumer(seed, "generator.captions");
  Pcg32 feature_rng = Pcg32::for_consumer(seed, "generator.features");
  const auto& conn = lexicon::connectors();
  out.records.reserve(static_cast<std::size_t>(cfg.examples));
  out.entity_slots.reserve(static_cast<std::size_t>(cfg.examples));
  for (int e = 0; e < cfg.examples; ++e) {
    const int k = cfg.min_objects + static_cast<int>(caption_rng.below(static_cast<std::uint32_t>(cfg.max_objects - cfg.min_objects + 1)));
    std::vector<int> obj(static_cast<std::size_t>(k));
    std::vector<int> att(static_cast<std::size_t>(k));
    std::vector<int> links(static_cast<std::size_t>(k - 1));
    for (int i = 0; i < k; ++i) {
      obj[static_cast<std::size_t>(i)] = static_cast<int>(caption_rng.below(static_cast<std::uint32_t>(cfg.num_labels)));
      att[static_cast<std::size_t>(i)] = static_cast<int>(caption_rng.below(static_cast<std::uint32_t>(cfg.num_attributes)));
    }
    for (auto& l : links) l = static_cast<int>(caption_rng.below(static_cast<std::uint32_t>(conn.size())));

    TripletRecord rec;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "syn-%06d", e);
    rec.id = idbuf;

    std::vector<std::string> src;
    for (int i = 0; i < k; ++i) {
      if (i > 0) src.push_back(conn[static_cast<std::size_t>(links[static_cast<std::size_t>(i - 1)])]);
      src.push_back(lexicon::article());
      src.push_back(attrs[static_cast<std::size_t>(att[static_cast<std::size_t>(i)])]);
      const int at = static_cast<int>(src.size());
      src.push_back(out.label_words[static_cast<std::size_t>(obj[static_cast<std::size_t>(i)])]);
      rec.entities.push_back({0, at, at + 1});
    }

    std::vector<int> order;
    for (int i = k - 2; i >= 0; --i) order.push_back(i);
    order.push_back(k - 1);
    std::vector<std::string> tgt;
    std::vector<EntitySpan> tgt_entities;
    for (std::size_t p = 0; p < order.size(); ++p) {
      const auto i = static_cast<std::size_t>(order[p]);
      if (p > 0) tgt.push_back(lexicon::translate_word(conn[static_cast<std::size_t>(links[p - 1])]));
      tgt.push_back(lexicon::translate_word(attrs[static_cast<std::size_t>(att[i])]));
      tgt.push_back(lexicon::translate_word(lexicon::article()));
      const int at = static_cast<int>(tgt.size());
      tgt.push_back(lexicon::translate_word(out.label_words[static_cast<std::size_t>(obj[i])]));
      tgt_entities.push_back({1, at, at + 1});
    }
    rec.entities.insert(rec.entities.end(), tgt_entities.begin(), tgt_entities.end());

    auto join = [](const std::vector<std::string>& ws) {
      std::string s;
      for (std::size_t i = 0; i < ws.size(); ++i) s += (i ? " " : "") + ws[i];
      return s;
    };
    rec.src = join(src);
    rec.tgt = join(tgt);

    std::vector<int> slots;
    for (int s = 0; s < cfg.regions; ++s) {
      RegionFeature r;
      r.label = s < k ? obj[static_cast<std::size_t>(s)]
                      : static_cast<int>(feature_rng.below(static_cast<std::uint32_t>(cfg.num_labels)));
      r.bbox = detail::slot_bbox(s, cfg.regions);
      const auto& c = out.centers[static_cast<std::size_t>(r.label)];
      r.feat.resize(c.size());
      for (std::size_t d = 0; d < c.size(); ++d) {
        const double noise = feature_rng.normal();
        r.feat[d] = cfg.sigma == 0.0 ? c[d] : detail::round4(c[d] + cfg.sigma * noise);
      }
      rec.regions.push_back(std::move(r));
      if (s < k) slots.push_back(s);
    }
    out.records.push_back(std::move(rec));
    out.entity_slots.push_back(std::move(slots));
  }
  return out;
}

/// Fraction of records whose last source entity is recovered by classifying
/// its grounding region with the nearest cluster centre.
inline double nearest_centroid_accuracy(const SyntheticCorpus& corpus) {
  std::size_t hits = 0;
  for (std::size_t e = 0; e < corpus.records.size(); ++e) {
    const auto& rec = corpus.records[e];
    const auto& feat = rec.regions[static_cast<std::size_t>(corpus.entity_slots[e].back())].feat;
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < corpus.centers.size(); ++l) {
      double dist = 0;
      for (std::size_t d = 0; d < feat.size(); ++d) dist += std::pow(feat[d] - corpus.centers[l][d], 2);
      if (dist < best_d) {
        best_d = dist;
        best = l;
      }
    }
    const auto words = split_words(rec.src);
    hits += corpus.label_words[best] == words.back() ? 1 : 0;
  }
  return corpus.records.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(corpus.records.size());
}

// ---------------------------------------------------------------------------
// Triplet files: a JSON header line {version, D, o, label_vocab}, then one
// JSON record per line.

namespace detail {

inline void append_float(std::string& out, float v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

inline std::string quote(const std::string& s) { return nlohmann::json(s).dump(); }

}  // namespace detail

inline std::string header_line(const CorpusHeader& h) {
  return "{\"version\":" + std::to_string(h.version) + ",\"D\":" + std::to_string(h.feat_dim) +
         ",\"o\":" + std::to_string(h.regions) + ",\"label_vocab\":" + std::to_string(h.label_vocab) + "}";
}

inline std::string record_line(const TripletRecord& r) {
  std::string s = "{\"id\":" + detail::quote(r.id) + ",\"src\":" + detail::quote(r.src) + ",\"tgt\":" + detail::quote(r.tgt) +
                  ",\"regions\":[";
  for (std::size_t i = 0; i < r.regions.size(); ++i) {
    const auto& g = r.regions[i];
    if (i) s += ',';
    s += "{\"label\":" + std::to_string(g.label) + ",\"bbox\":[";
    for (std::size_t j = 0; j < 4; ++j) {
      if (j) s += ',';
      detail::append_float(s, g.bbox[j]);
    }
    s += "],\"feat\":[";
    for (std::size_t j = 0; j < g.feat.size(); ++j) {
      if (j) s += ',';
      detail::append_float(s, g.feat[j]);
    }
    s += "]}";
  }
  s += "],\"entities\":[";
  for (std::size_t i = 0; i < r.entities.size(); ++i) {
    const auto& e = r.entities[i];
    if (i) s += ',';
    s += "{\"stream\":" + std::to_string(e.stream) + ",\"start\":" + std::to_string(e.start) + ",\"end\":" + std::to_string(e.end) + "}";
  }
  return s + "]}";
}

inline void write_triplets(const std::string& path, const CorpusHeader& header, const std::vector<TripletRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << header_line(header) << '\n';
  for (const auto& r : records) out << record_line(r) << '\n';
  if (!out) throw DataError("write failed for " + path);
}

struct TripletFile {
  CorpusHeader header;
  std::vector<TripletRecord> records;
};

inline TripletRecord parse_record(const std::string& line, std::size_t line_no, const CorpusHeader& h) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed record: ") + e.what(), line_no);
  }
  TripletRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.src = j.at("src").get<std::string>();
    r.tgt = j.at("tgt").get<std::string>();
    for (const auto& g : j.at("regions")) {
      RegionFeature f;
      f.label = g.at("label").get<std::int32_t>();
      const auto& bb = g.at("bbox");
      if (bb.size() != 4) throw SchemaError("line " + std::to_string(line_no) + ": bbox needs 4 values");
      for (std::size_t i = 0; i < 4; ++i) f.bbox[i] = bb[i].get<float>();
      f.feat = g.at("feat").get<std::vector<float>>();
      r.regions.push_back(std::move(f));
    }
    for (const auto& e : j.at("entities")) {
      r.entities.push_back({e.at("stream").get<int>(), e.at("start").get<int>(), e.at("end").get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad field: ") + e.what(), line_no);
  }
  if (split_words(r.src).empty() || split_words(r.tgt).empty()) throw ParseError("empty sentence", line_no);
  if (static_cast<int>(r.regions.size()) != h.regions) {
    throw SchemaError("line " + std::to_string(line_no) + ": " + std::to_string(r.regions.size()) + " regions, header says " +
                      std::to_string(h.regions));
  }
  for (const auto& f : r.regions) {
    if (static_cast<int>(f.feat.size()) != h.feat_dim) {
      throw SchemaError("line " + std::to_string(line_no) + ": feature dim " + std::to_string(f.feat.size()) +
                        " does not match header D=" + std::to_string(h.feat_dim));
    }
    if (f.label < 0 || f.label >= h.label_vocab) throw SchemaError("line " + std::to_string(line_no) + ": label out of range");
    if (!(f.bbox[0] < f.bbox[2] && f.bbox[1] < f.bbox[3])) throw SchemaError("line " + std::to_string(line_no) + ": degenerate bbox");
    for (float v : f.feat) {
      if (!std::isfinite(v)) throw SchemaError("line " + std::to_string(line_no) + ": non-finite feature");
    }
  }
  return r;
}

inline TripletFile load_triplets(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  TripletFile file;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  bool have_header = false;
  while (pos < content.size()) {
    const auto nl = content.find('\n', pos);
    ++line_no;
    if (nl == std::string::npos) throw ParseError("truncated record (missing newline)", line_no);
    const std::string line = content.substr(pos, nl - pos);
    pos = nl + 1;
    if (!have_header) {
      try {
        const auto j = nlohmann::json::parse(line);
        file.header = {j.at("version").get<int>(), j.at("D").get<int>(), j.at("o").get<int>(), j.at("label_vocab").get<int>()};
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad header: ") + e.what(), line_no);
      }
      if (file.header.version != 1) throw SchemaError("unsupported triplet file version " + std::to_string(file.header.version));
      have_header = true;
      continue;
    }
    file.records.push_back(parse_record(line, line_no, file.header));
  }
  if (!have_header) throw ParseError("missing header", 1);
  return file;
}

/// Tokenises a record; word-level entity spans become token spans.
inline TripletExample tokenize(const TripletRecord& rec, const Tokenizer& tok) {
  TripletExample ex;
  ex.id = rec.id;
  auto [src, src_starts] = tok.encode_words(split_words(rec.src));
  auto [tgt, tgt_starts] = tok.encode_words(split_words(rec.tgt));
  ex.src = std::move(src);
  ex.tgt = std::move(tgt);
  ex.regions = rec.regions;
  for (const auto& e : rec.entities) {
    const auto& starts = e.stream == 0 ? src_starts : tgt_starts;
    if (e.start < 0 || e.end <= e.start || e.end >= static_cast<int>(starts.size())) {
      throw SchemaError(rec.id + ": entity span out of range");
    }
    ex.entity_spans.push_back({e.stream, starts[static_cast<std::size_t>(e.start)], starts[static_cast<std::size_t>(e.end)]});
  }
  return ex;
}

inline std::vector<TripletExample> tokenize_all(const std::vector<TripletRecord>& recs, const Tokenizer& tok) {
  std::vector<TripletExample> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(tokenize(r, tok));
  return out;
}

}  // namespace vtlm
