#pragma once

#include <nlohmann/json.hpp>

#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "vtlm/bleu.hpp"
#include "vtlm/corpus.hpp"
#include "vtlm/encoder.hpp"
#include "vtlm/seq2seq.hpp"

namespace vtlm {

/// Flat metric record written by every probe.
struct ProbeReport {
  std::string probe;
  std::string system;
  std::vector<std::pair<std::string, double>> metrics;  // NaN = not available
  long samples = 0;
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();

  double metric(const std::string& name) const {
    for (const auto& [k, v] : metrics) {
      if (k == name) return v;
    }
    throw UsageError("report has no metric '" + name + "'");
  }

  nlohmann::json to_json() const {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [k, v] : metrics) m[k] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json("N/A");
    nlohmann::json j = {{"probe", probe}, {"system", system}, {"metrics", m}, {"samples", samples}, {"seed", seed}};
    if (!extra.empty()) j["extra"] = extra;
    return j;
  }

  std::string csv_header() const {
    std::string h = "probe,system,samples,seed";
    for (const auto& [k, _] : metrics) h += "," + k;
    return h;
  }

  std::string csv_row() const {
    std::string r = probe + "," + system + "," + std::to_string(samples) + "," + std::to_string(seed);
    for (const auto& [_, v] : metrics) {
      r += ',';
      if (std::isfinite(v)) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6g", v);
        r += buf;
      } else {
        r += "N/A";
      }
    }
    return r;
  }
};

/// Seeded uniformly random cyclic permutation (Sattolo), hence a derangement
/// for n >= 2.
inline std::vector<std::size_t> derangement(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  Pcg32 rng = Pcg32::for_consumer(seed, "shuffle");
  for (std::size_t i = n; i-- > 1;) {
    const auto j = rng.below(static_cast<std::uint32_t>(i));
    std::swap(p[i], p[j]);
  }
  return p;
}

inline bool is_punctuation(const std::string& surface) {
  bool any = false;
  for (char c : surface) {
    if (std::isalnum(static_cast<unsigned char>(c))) return false;
    any = true;
  }
  return any;
}

// ---------------------------------------------------------------------------
// Last-word masked prediction

enum class LastWordCondition { EN, DE, BOTH };

inline const char* to_string(LastWordCondition c) {
  switch (c) {
    case LastWordCondition::EN:
      return "en";
    case LastWordCondition::DE:
      return "de";
    case LastWordCondition::BOTH:
      return "both";
  }
  return "?";
}

struct LastWordResult {
  double accuracy = std::numeric_limits<double>::quiet_NaN();  // percent; NaN when nothing was masked
  long masked = 0;
  long correct = 0;
  long skipped = 0;  // examples with a one-token designated sentence
};

/// Masks the final non-punctuation token of the source (EN), target (DE) or
/// both captions with [MASK] and scores argmax MLM predictions. When
/// `shuffled`, each example's regions come from another example through a
/// seeded derangement. TLM models never see regions, so shuffling is inert
/// for them by construction.
template <class T>
LastWordResult last_word_probe(const VtlmModel<T>& model, const std::vector<TripletExample>& test, const Vocab& vocab,
                               LastWordCondition cond, bool shuffled, std::uint64_t seed, int batch_size = 64) {
  auto surface = [&](TokenId id) {
    std::string s = vocab.token(id);
    if (s.size() >= kEndOfWord.size() && s.compare(s.size() - kEndOfWord.size(), kEndOfWord.size(), kEndOfWord) == 0) {
      s.resize(s.size() - kEndOfWord.size());
    }
    return s;
  };
  std::vector<TripletExample> probe_set = test;
  if (shuffled && test.size() >= 2) {
    const auto perm = derangement(test.size(), seed);
    for (std::size_t i = 0; i < test.size(); ++i) probe_set[i].regions = test[perm[i]].regions;
  }
  LastWordResult res;
  NoGradGuard ng;
  ForwardContext<T> ctx;
  for (std::size_t i = 0; i < probe_set.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<const TripletExample*> ex;
    for (std::size_t j = i; j < std::min(probe_set.size(), i + static_cast<std::size_t>(batch_size)); ++j) ex.push_back(&probe_set[j]);
    auto mb = make_clean_batch(ex, model.objective);
    std::vector<Index> rows;
    std::vector<TokenId> gold;
    for (Index b = 0; b < mb.batch; ++b) {
      // Last maskable row per language segment.
      Index last_l1 = -1;
      Index last_l2 = -1;
      int len_l1 = 0;
      int len_l2 = 0;
      for (Index t = 0; t < mb.seq_len; ++t) {
        const auto r = static_cast<std::size_t>(b * mb.seq_len + t);
        if (mb.pad[r] || mb.region_slot[r] >= 0 || is_reserved(mb.token_ids[r])) continue;
        const bool l1 = mb.langs[r] == Lang::L1;
        (l1 ? len_l1 : len_l2) += 1;
        if (is_punctuation(surface(mb.token_ids[r]))) continue;
        (l1 ? last_l1 : last_l2) = static_cast<Index>(r);
      }
      const bool want_l1 = cond != LastWordCondition::DE;
      const bool want_l2 = cond != LastWordCondition::EN;
      if ((want_l1 && (len_l1 <= 1 || last_l1 < 0)) || (want_l2 && (len_l2 <= 1 || last_l2 < 0))) {
        ++res.skipped;
        continue;
      }
      for (Index r : {want_l1 ? last_l1 : Index{-1}, want_l2 ? last_l2 : Index{-1}}) {
        if (r < 0) continue;
        gold.push_back(mb.token_ids[static_cast<std::size_t>(r)]);
        mb.token_ids[static_cast<std::size_t>(r)] = kMask;
        rows.push_back(r);
      }
    }
    if (rows.empty()) continue;
    const auto states = model.forward(mb, ctx);
    const auto pred = argmax_rows(mlm_logits(states, rows, model.params));
    for (std::size_t k = 0; k < rows.size(); ++k) res.correct += pred[k] == gold[k] ? 1 : 0;
    res.masked += static_cast<long>(rows.size());
  }
  if (res.masked > 0) res.accuracy = 100.0 * static_cast<double>(res.correct) / static_cast<double>(res.masked);
  return res;
}

// ---------------------------------------------------------------------------
// Translation and the entity probe

enum class EntityAction { None, Mask, Remove };

inline const char* to_string(EntityAction a) {
  switch (a) {
    case EntityAction::None:
      return "none";
    case EntityAction::Mask:
      return "mask";
    case EntityAction::Remove:
      return "remove";
  }
  return "?";
}

/// Applies the entity corruption to the source side. MASK keeps the length,
/// REMOVE deletes the span tokens. Returns false when the example has no
/// source entities (and leaves it untouched).
inline bool corrupt_entities(TripletExample& ex, EntityAction action) {
  std::vector<std::uint8_t> hit(ex.src.size(), 0);
  bool any = false;
  for (const auto& s : ex.entity_spans) {
    if (s.stream != 0) continue;
    for (int i = s.start; i < s.end && i < static_cast<int>(hit.size()); ++i) {
      hit[static_cast<std::size_t>(i)] = 1;
      any = true;
    }
  }
  if (!any || action == EntityAction::None) return any;
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < ex.src.size(); ++i) {
    if (!hit[i]) {
      out.push_back(ex.src[i]);
    } else if (action == EntityAction::Mask) {
      out.push_back(kMask);
    }
  }
  ex.src = std::move(out);
  ex.entity_spans.clear();
  return true;
}

template <class T>
std::vector<std::string> translate_all(const MtModel<T>& model, const std::vector<TripletExample>& src, const Tokenizer& tok,
                                       const BeamOptions& opt) {
  std::vector<std::string> out;
  out.reserve(src.size());
  for (const auto& ex : src) out.push_back(tok.decode(translate(model, ex, opt)));
  return out;
}

struct EntityResult {
  BleuResult bleu;
  long corrupted = 0;
  long passthrough = 0;  // examples without entities
  std::vector<std::string> hypotheses;
};

/// Translates corrupted sources and scores them against the unmodified
/// references. Action None gives plain test BLEU.
template <class T>
EntityResult entity_probe(const MtModel<T>& model, const std::vector<TripletExample>& test, const Tokenizer& tok, EntityAction action,
                          const BeamOptions& opt) {
  EntityResult res;
  std::vector<TripletExample> src = test;
  for (auto& ex : src) {
    if (corrupt_entities(ex, action)) {
      ++res.corrupted;
    } else {
      ++res.passthrough;
    }
  }
  if (action == EntityAction::None) res.corrupted = 0;
  res.hypotheses = translate_all(model, src, tok, opt);
  std::vector<std::string> refs;
  for (const auto& ex : test) refs.push_back(tok.decode(ex.tgt));
  res.bleu = corpus_bleu(res.hypotheses, refs);
  return res;
}

// ---------------------------------------------------------------------------
// Cross-attention mass

struct AttentionMass {
  /// Per decoder layer, averaged over heads, non-pad target positions and
  /// examples.
  std::vector<double> visual;
  std::vector<double> text;
  std::vector<double> pad;
  long positions = 0;

  double mean_visual() const {
    return visual.empty() ? 0.0 : std::accumulate(visual.begin(), visual.end(), 0.0) / static_cast<double>(visual.size());
  }
};

/// Share of decoder cross-attention probability on the encoder's region
/// states, teacher-forced on the references. Every non-pad target input
/// position counts, including the one that predicts [EOS]. With
/// `block_visual` the region keys are masked out of cross-attention.
template <class T>
AttentionMass attention_mass(const MtModel<T>& model, const std::vector<TripletExample>& test, bool block_visual = false,
                             int batch_size = 64) {
  if (model.task != MtTask::MMT) throw UsageError("attention mass needs an MMT model (NMT sources have no visual span)");
  const int layers = model.cfg.layers;
  const Index heads = model.cfg.heads;
  AttentionMass out;
  out.visual.assign(static_cast<std::size_t>(layers), 0.0);
  out.text.assign(static_cast<std::size_t>(layers), 0.0);
  out.pad.assign(static_cast<std::size_t>(layers), 0.0);
  double weight = 0;
  NoGradGuard ng;
  for (std::size_t i = 0; i < test.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<const TripletExample*> ex;
    std::vector<std::vector<TokenId>> tgts;
    for (std::size_t j = i; j < std::min(test.size(), i + static_cast<std::size_t>(batch_size)); ++j) {
      ex.push_back(&test[j]);
      tgts.push_back(test[j].tgt);
    }
    ForwardContext<T> enc_ctx;
    const auto memory = model.encode_source(ex, enc_ctx);
    const auto tb = make_target_batch(tgts);
    std::vector<std::vector<T>> log;
    ForwardContext<T> ctx;
    ctx.attention_log = &log;
    std::vector<std::uint8_t> block(memory.source.region_slot.size(), 0);
    for (std::size_t r = 0; r < block.size(); ++r) block[r] = memory.source.region_slot[r] >= 0 ? 1 : 0;
    model.decode(tb, memory, ctx, block_visual ? &block : nullptr);
    const Index tq = tb.len;
    const Index tk = memory.source.seq_len;
    for (int l = 0; l < layers; ++l) {
      const auto& probs = log[static_cast<std::size_t>(2 * l + 1)];  // self, cross per layer
      for (Index b = 0; b < tb.batch; ++b) {
        for (Index q = 0; q < tq; ++q) {
          if (tb.pad[static_cast<std::size_t>(b * tq + q)]) continue;
          for (Index h = 0; h < heads; ++h) {
            const T* row = probs.data() + ((b * heads + h) * tq + q) * tk;
            double vis = 0;
            double txt = 0;
            double pad = 0;
            for (Index k = 0; k < tk; ++k) {
              const auto r = static_cast<std::size_t>(b * tk + k);
              if (memory.source.pad[r]) {
                pad += row[k];
              } else if (memory.source.region_slot[r] >= 0) {
                vis += row[k];
              } else {
                txt += row[k];
              }
            }
            out.visual[static_cast<std::size_t>(l)] += vis;
            out.text[static_cast<std::size_t>(l)] += txt;
            out.pad[static_cast<std::size_t>(l)] += pad;
            if (l == 0) weight += 1;
          }
          if (l == 0) ++out.positions;
        }
      }
    }
  }
  if (weight > 0) {
    for (int l = 0; l < layers; ++l) {
      out.visual[static_cast<std::size_t>(l)] /= weight;
      out.text[static_cast<std::size_t>(l)] /= weight;
      out.pad[static_cast<std::size_t>(l)] /= weight;
    }
  }
  return out;
}

}  // namespace vtlm
