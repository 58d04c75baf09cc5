#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "vtlm/encoder.hpp"

namespace vtlm {

enum class MtTask { NMT, MMT };

inline const char* to_string(MtTask t) { return t == MtTask::NMT ? "nmt" : "mmt"; }

/// Source-side batch: [BOS] src [EOS] (+ the example's regions for MMT),
/// all regions intact.
inline MaskedBatch make_source_batch(std::span<const TripletExample* const> examples, MtTask task) {
  if (examples.empty()) throw UsageError("make_source_batch: empty batch");
  MaskedBatch mb;
  mb.mode = task == MtTask::MMT ? Objective::VTLM : Objective::TLM;
  mb.batch = static_cast<Index>(examples.size());
  for (const auto* ex : examples) {
    const Index len = static_cast<Index>(ex->src.size()) + 2 + (task == MtTask::MMT ? static_cast<Index>(ex->regions.size()) : 0);
    mb.seq_len = std::max(mb.seq_len, len);
    mb.lengths.push_back(static_cast<int>(len));
    mb.regions.push_back(task == MtTask::MMT ? ex->regions : std::vector<RegionFeature>{});
  }
  const Index rows = mb.rows();
  mb.token_ids.assign(static_cast<std::size_t>(rows), kPad);
  mb.positions.assign(static_cast<std::size_t>(rows), -1);
  mb.langs.assign(static_cast<std::size_t>(rows), Lang::L1);
  mb.pad.assign(static_cast<std::size_t>(rows), 1);
  mb.visual.assign(static_cast<std::size_t>(rows), {});
  mb.region_slot.assign(static_cast<std::size_t>(rows), -1);
  for (Index b = 0; b < mb.batch; ++b) {
    const auto& ex = *examples[static_cast<std::size_t>(b)];
    auto r = static_cast<std::size_t>(b * mb.seq_len);
    Index pos = 0;
    auto text = [&](TokenId t) {
      mb.token_ids[r] = t;
      mb.positions[r] = pos++;
      mb.pad[r] = 0;
      ++r;
    };
    text(kBos);
    for (TokenId t : ex.src) text(t);
    text(kEos);
    if (task == MtTask::MMT) {
      for (std::size_t s = 0; s < ex.regions.size(); ++s) {
        mb.langs[r] = Lang::VIS;
        mb.region_slot[r] = static_cast<int>(s);
        mb.pad[r] = 0;
        ++r;
      }
    }
  }
  return mb;
}

/// Teacher-forcing view of target prefixes: inputs [BOS] y_1..y_n and
/// labels y_1..y_n [EOS], padded to a common length.
struct TargetBatch {
  Index batch = 0;
  Index len = 0;
  std::vector<TokenId> inputs;
  std::vector<TokenId> labels;  // kPad where padded
  std::vector<std::uint8_t> pad;
};

inline TargetBatch make_target_batch(const std::vector<std::vector<TokenId>>& targets, bool append_eos = true) {
  TargetBatch tb;
  tb.batch = static_cast<Index>(targets.size());
  for (const auto& t : targets) tb.len = std::max<Index>(tb.len, static_cast<Index>(t.size()) + 1);
  tb.inputs.assign(static_cast<std::size_t>(tb.batch * tb.len), kPad);
  tb.labels.assign(tb.inputs.size(), kPad);
  tb.pad.assign(tb.inputs.size(), 1);
  for (Index b = 0; b < tb.batch; ++b) {
    const auto& t = targets[static_cast<std::size_t>(b)];
    const auto base = static_cast<std::size_t>(b * tb.len);
    tb.inputs[base] = kBos;
    tb.pad[base] = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      tb.inputs[base + i + 1] = t[i];
      tb.pad[base + i + 1] = 0;
      tb.labels[base + i] = t[i];
    }
    tb.labels[base + t.size()] = append_eos ? kEos : kPad;
  }
  return tb;
}

/// Decoder stack with per-layer cross-attention; the output projection is
/// tied to the decoder token embedding.
template <class T>
ParamStore<T> init_decoder_params(const EncoderConfig& cfg, Pcg32& rng) {
  ParamStore<T> ps;
  const Index d = cfg.d_model;
  ps.add("token_emb", normal_init<T>({cfg.vocab_size, d}, kInitStd, rng));
  ps.add("pos_emb", normal_init<T>({cfg.max_positions, d}, kInitStd, rng));
  ps.add("lang_emb", normal_init<T>({kNumLangs, d}, kInitStd, rng));
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    detail::add_attention(ps, p + ".attn", d, rng);
    detail::add_norm(ps, p + ".ln1", d);
    detail::add_attention(ps, p + ".cross", d, rng);
    detail::add_norm(ps, p + ".ln_cross", d);
    detail::add_linear(ps, p + ".ffn.in", d, cfg.ffn, rng);
    detail::add_linear(ps, p + ".ffn.out", cfg.ffn, d, rng);
    detail::add_norm(ps, p + ".ln2", d);
  }
  ps.add("out_bias", Tensor<T>::zeros({cfg.vocab_size}, true));
  return ps;
}

/// Pre-trained parameters split into an encoder and a decoder.
///
/// The encoder keeps the pre-trained stack, embeddings and region
/// projections. The decoder copies embeddings, self-attention, feed-forward
/// and norms layer by layer; cross-attention (and its norm) is a copy of the
/// same layer's self-attention when `copy_cross_attn`, fresh otherwise. The
/// MLM output bias becomes the decoder output bias.
template <class T>
std::pair<ParamStore<T>, ParamStore<T>> transfer_weights(const ParamStore<T>& pretrained, const EncoderConfig& cfg, bool copy_cross_attn,
                                                         Pcg32& rng) {
  int layers = 0;
  while (pretrained.contains("layer" + std::to_string(layers) + ".attn.q.w")) ++layers;
  if (layers != cfg.layers) {
    throw TransferError("pre-trained model has " + std::to_string(layers) + " layers, decoder needs " + std::to_string(cfg.layers));
  }
  const auto& tok = pretrained.at("token_emb");
  if (tok.dim(0) != cfg.vocab_size || tok.dim(1) != cfg.d_model) {
    throw TransferError("token embedding " + shape_str(tok.shape()) + " does not match the configured vocabulary/model size");
  }
  if (pretrained.at("feat_proj.w").dim(0) != cfg.feat_dim) {
    throw TransferError("pre-trained feature dim " + std::to_string(pretrained.at("feat_proj.w").dim(0)) + " vs corpus D=" +
                        std::to_string(cfg.feat_dim));
  }
  ParamStore<T> enc;
  for (const auto& [name, t] : pretrained) {
    if (name.rfind("mlm_head", 0) == 0 || name.rfind("mrc_head", 0) == 0) continue;
    enc.add(name, t.clone());
  }
  ParamStore<T> dec = init_decoder_params<T>(cfg, rng);
  for (const char* n : {"token_emb", "pos_emb", "lang_emb"}) dec.set(n, pretrained.at(n).clone());
  dec.set("out_bias", pretrained.at("mlm_head.bias").clone());
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    pretrained.copy_prefixed(p + ".attn.", p + ".attn.", dec);
    pretrained.copy_prefixed(p + ".ln1.", p + ".ln1.", dec);
    pretrained.copy_prefixed(p + ".ffn.", p + ".ffn.", dec);
    pretrained.copy_prefixed(p + ".ln2.", p + ".ln2.", dec);
    if (copy_cross_attn) {
      pretrained.copy_prefixed(p + ".attn.", p + ".cross.", dec);
      pretrained.copy_prefixed(p + ".ln1.", p + ".ln_cross.", dec);
    }
  }
  return {std::move(enc), std::move(dec)};
}

/// Encoder-decoder translation model.
template <class T>
struct MtModel {
  EncoderConfig cfg;
  MtTask task = MtTask::NMT;
  ParamStore<T> enc;
  ParamStore<T> dec;

  static MtModel scratch(const EncoderConfig& cfg, MtTask task, std::uint64_t seed) {
    Pcg32 rng = Pcg32::for_consumer(seed, "init");
    auto full = init_encoder_params<T>(cfg, rng);
    ParamStore<T> enc;
    for (const auto& [name, t] : full) {
      if (name.rfind("mlm_head", 0) == 0 || name.rfind("mrc_head", 0) == 0) continue;
      enc.add(name, t);
    }
    return {cfg, task, std::move(enc), init_decoder_params<T>(cfg, rng)};
  }

  static MtModel from_pretrained(const ParamStore<T>& pretrained, const EncoderConfig& cfg, MtTask task, bool copy_cross_attn,
                                 std::uint64_t seed) {
    Pcg32 rng = Pcg32::for_consumer(seed, "init");
    auto [enc, dec] = transfer_weights(pretrained, cfg, copy_cross_attn, rng);
    return {cfg, task, std::move(enc), std::move(dec)};
  }

  /// All parameters under "enc." / "dec." prefixes (aliasing storage).
  ParamStore<T> joined() const {
    ParamStore<T> all;
    for (const auto& [n, t] : enc) all.add("enc." + n, t);
    for (const auto& [n, t] : dec) all.add("dec." + n, t);
    return all;
  }

  struct Encoded {
    Tensor<T> states;
    MaskedBatch source;
  };

  Encoded encode_source(std::span<const TripletExample* const> examples, ForwardContext<T>& ctx) const {
    auto mb = make_source_batch(examples, task);
    auto states = vtlm::encode(embed(mb, enc, ctx), mb, enc, cfg.layers, cfg.heads, ctx);
    return {std::move(states), std::move(mb)};
  }

  /// Causal decoder over `tb.inputs` attending to `memory`; returns logits
  /// [batch * len, vocab]. `memory_batch_of` maps each target row-block to
  /// a source example (identity when empty). `block_keys` optionally masks
  /// extra encoder positions out of cross-attention.
  Tensor<T> decode(const TargetBatch& tb, const Encoded& memory, ForwardContext<T>& ctx,
                   const std::vector<std::uint8_t>* block_keys = nullptr) const {
    if (memory.source.batch != tb.batch) throw ShapeError("decode: source and target batch sizes differ");
    std::vector<Index> pos(tb.inputs.size());
    std::vector<Index> tok(tb.inputs.size());
    std::vector<Index> lang(tb.inputs.size(), static_cast<Index>(Lang::L2));
    for (std::size_t i = 0; i < pos.size(); ++i) {
      pos[i] = static_cast<Index>(i % static_cast<std::size_t>(tb.len));
      if (pos[i] >= cfg.max_positions) throw IndexError("target position exceeds max_positions");
      tok[i] = tb.inputs[i];
    }
    Tensor<T> x = add(add(gather_rows(dec.at("token_emb"), tok), gather_rows(dec.at("pos_emb"), pos)), gather_rows(dec.at("lang_emb"), lang));
    x = ctx.drop(x);
    AttentionSpec self;
    self.batch = tb.batch;
    self.q_len = tb.len;
    self.k_len = tb.len;
    self.heads = cfg.heads;
    self.causal = true;
    self.key_mask = tb.pad;
    AttentionSpec cross;
    cross.batch = tb.batch;
    cross.q_len = tb.len;
    cross.k_len = memory.source.seq_len;
    cross.heads = cfg.heads;
    cross.key_mask = memory.source.pad;
    if (block_keys) {
      for (std::size_t i = 0; i < cross.key_mask.size(); ++i) cross.key_mask[i] |= (*block_keys)[i];
    }
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = "layer" + std::to_string(l);
      const auto a = detail::multi_head(dec, p + ".attn", x, x, self, ctx);
      x = detail::apply_norm(dec, p + ".ln1", add(x, ctx.drop(a)));
      const auto c = detail::multi_head(dec, p + ".cross", x, memory.states, cross, ctx);
      x = detail::apply_norm(dec, p + ".ln_cross", add(x, ctx.drop(c)));
      const auto f = detail::feed_forward(dec, p + ".ffn", x, ctx);
      x = detail::apply_norm(dec, p + ".ln2", add(x, ctx.drop(f)));
    }
    return add_bias(matmul_bt(x, dec.at("token_emb")), dec.at("out_bias"));
  }

  struct MtLoss {
    Tensor<T> loss;
    double nll_sum = 0;
    Index tokens = 0;
  };

  /// Mean token cross-entropy of the references under teacher forcing.
  MtLoss loss(std::span<const TripletExample* const> examples, ForwardContext<T>& ctx) const {
    std::vector<std::vector<TokenId>> tgts;
    for (const auto* ex : examples) tgts.push_back(ex->tgt);
    const auto tb = make_target_batch(tgts);
    const auto memory = encode_source(examples, ctx);
    const auto logits = decode(tb, memory, ctx);
    std::vector<Index> rows;
    std::vector<Index> labels;
    for (std::size_t i = 0; i < tb.labels.size(); ++i) {
      if (tb.pad[i]) continue;
      rows.push_back(static_cast<Index>(i));
      labels.push_back(tb.labels[i]);
    }
    MtLoss out;
    out.loss = cross_entropy(gather_rows(logits, rows), labels);
    out.tokens = static_cast<Index>(labels.size());
    out.nll_sum = static_cast<double>(out.loss.item()) * static_cast<double>(out.tokens);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Decoding

struct Hypothesis {
  std::vector<TokenId> tokens;  // generated tokens, [EOS] included when finished by it
  double log_prob = 0;
  bool finished = false;
};

struct BeamOptions {
  int beam = 8;
  int max_len = 64;
  /// Final ranking uses log_prob / len^alpha; 1 = mean log-probability.
  double alpha = 1.0;
};

/// Log-probabilities of the next token for each prefix (prefixes exclude BOS).
using NextTokenFn = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<TokenId>>&)>;

inline double ranking_score(const Hypothesis& h, double alpha) {
  const double len = std::max<std::size_t>(h.tokens.size(), 1);
  return alpha == 0 ? h.log_prob : h.log_prob / std::pow(len, alpha);
}

/// Beam search. Each step keeps the `beam` best expansions over all live
/// hypotheses (ties broken by lower token id, then earlier hypothesis);
/// expansions ending in [EOS] retire to the finished pool. Search stops once
/// `beam` hypotheses have finished or none are live; at max_len live
/// hypotheses are force-finished. Returns finished hypotheses best first.
inline std::vector<Hypothesis> beam_search(const NextTokenFn& next, const BeamOptions& opt) {
  if (opt.beam < 1) throw UsageError("beam must be >= 1");
  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> done;
  for (int t = 0; t < opt.max_len && !live.empty() && static_cast<int>(done.size()) < opt.beam; ++t) {
    std::vector<std::vector<TokenId>> prefixes;
    for (const auto& h : live) prefixes.push_back(h.tokens);
    const auto logp = next(prefixes);
    std::vector<std::tuple<double, TokenId, std::size_t>> cand;
    for (std::size_t h = 0; h < live.size(); ++h) {
      for (std::size_t v = 0; v < logp[h].size(); ++v) {
        cand.emplace_back(live[h].log_prob + logp[h][v], static_cast<TokenId>(v), h);
      }
    }
    const auto keep = std::min<std::size_t>(static_cast<std::size_t>(opt.beam), cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(), [](const auto& a, const auto& b) {
      if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
      if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) < std::get<1>(b);
      return std::get<2>(a) < std::get<2>(b);
    });
    std::vector<Hypothesis> next_live;
    for (std::size_t i = 0; i < keep; ++i) {
      const auto& [score, tok, h] = cand[i];
      Hypothesis nh{live[h].tokens, score, false};
      nh.tokens.push_back(tok);
      if (tok == kEos) {
        nh.finished = true;
        done.push_back(std::move(nh));
      } else {
        next_live.push_back(std::move(nh));
      }
    }
    live = std::move(next_live);
  }
  if (done.empty() || static_cast<int>(done.size()) < opt.beam) {
    for (auto& h : live) {
      h.finished = true;
      done.push_back(std::move(h));
    }
  }
  std::stable_sort(done.begin(), done.end(), [&](const Hypothesis& a, const Hypothesis& b) {
    return ranking_score(a, opt.alpha) > ranking_score(b, opt.alpha);
  });
  return done;
}

/// Argmax decoding (lowest token id on ties) until [EOS] or max_len.
inline Hypothesis greedy_search(const NextTokenFn& next, int max_len) {
  Hypothesis h;
  for (int t = 0; t < max_len; ++t) {
    const auto logp = next({h.tokens})[0];
    const auto best = static_cast<TokenId>(std::max_element(logp.begin(), logp.end()) - logp.begin());
    h.log_prob += logp[static_cast<std::size_t>(best)];
    h.tokens.push_back(best);
    if (best == kEos) break;
  }
  h.finished = true;
  return h;
}

/// Next-token function for one source sentence under a trained model.
template <class T>
NextTokenFn next_token_fn(const MtModel<T>& model, const TripletExample& src) {
  auto memory = std::make_shared<typename MtModel<T>::Encoded>();
  {
    NoGradGuard ng;
    ForwardContext<T> ctx;
    const TripletExample* one[] = {&src};
    *memory = model.encode_source(one, ctx);
  }
  return [&model, memory](const std::vector<std::vector<TokenId>>& prefixes) {
    NoGradGuard ng;
    ForwardContext<T> ctx;
    const auto n = static_cast<Index>(prefixes.size());
    typename MtModel<T>::Encoded rep;
    const Index sl = memory->source.seq_len;
    const Index d = memory->states.dim(-1);
    std::vector<T> states;
    states.reserve(static_cast<std::size_t>(n * sl * d));
    for (Index i = 0; i < n; ++i) states.insert(states.end(), memory->states.values().begin(), memory->states.values().end());
    rep.states = Tensor<T>({n * sl, d}, std::move(states));
    rep.source.batch = n;
    rep.source.seq_len = sl;
    for (Index i = 0; i < n; ++i) rep.source.pad.insert(rep.source.pad.end(), memory->source.pad.begin(), memory->source.pad.end());
    const auto tb = make_target_batch(prefixes, false);
    const auto logits = model.decode(tb, rep, ctx);
    const Index vocab = logits.dim(-1);
    std::vector<std::vector<double>> out(prefixes.size());
    for (std::size_t i = 0; i < prefixes.size(); ++i) {
      const Index row = static_cast<Index>(i) * tb.len + static_cast<Index>(prefixes[i].size());
      const T* lg = logits.values().data() + row * vocab;
      const double mx = *std::max_element(lg, lg + vocab);
      double z = 0;
      for (Index v = 0; v < vocab; ++v) z += std::exp(lg[v] - mx);
      const double lse = mx + std::log(z);
      out[i].resize(static_cast<std::size_t>(vocab));
      for (Index v = 0; v < vocab; ++v) out[i][static_cast<std::size_t>(v)] = lg[v] - lse;
    }
    return out;
  };
}

template <class T>
std::vector<TokenId> strip_eos(std::vector<TokenId> tokens) {
  if (!tokens.empty() && tokens.back() == kEos) tokens.pop_back();
  return tokens;
}

template <class T>
std::vector<TokenId> translate(const MtModel<T>& model, const TripletExample& src, const BeamOptions& opt) {
  BeamOptions o = opt;
  o.max_len = std::min(o.max_len, model.cfg.max_positions - 1);
  return strip_eos<T>(beam_search(next_token_fn(model, src), o).front().tokens);
}

}  // namespace vtlm
