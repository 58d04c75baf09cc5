#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vtlm/bpe.hpp"
#include "vtlm/error.hpp"
#include "vtlm/masking.hpp"
#include "vtlm/ops.hpp"
#include "vtlm/params.hpp"

namespace vtlm {

struct EncoderConfig {
  int d_model = 64;
  int ffn = 256;
  int layers = 2;
  int heads = 4;
  double dropout = 0.1;
  int max_positions = 64;
  int vocab_size = 0;
  int label_vocab = 40;
  int feat_dim = 64;

  void validate() const {
    if (d_model <= 0 || ffn <= 0 || layers <= 0 || heads <= 0) throw ConfigError("model dimensions must be positive");
    if (d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
    if (vocab_size <= kNumReserved) throw ConfigError("vocab_size must exceed the reserved ids");
    if (label_vocab <= 0 || feat_dim <= 0 || max_positions <= 0) throw ConfigError("label_vocab, feat_dim and max_positions must be positive");
    if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must be in [0, 1)");
  }

  bool operator==(const EncoderConfig&) const = default;
};

inline constexpr double kInitStd = 0.02;

/// Per-call forward state: dropout and optional attention capture.
template <class T>
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  Pcg32* rng = nullptr;
  /// When set, receives one probability buffer per attention call in call order.
  std::vector<std::vector<T>>* attention_log = nullptr;

  Tensor<T> drop(const Tensor<T>& x) const {
    if (!training || dropout <= 0 || rng == nullptr) return x;
    return vtlm::dropout(x, dropout, *rng, true);
  }
};

namespace detail {

template <class T>
void add_linear(ParamStore<T>& ps, const std::string& name, Index in, Index out, Pcg32& rng) {
  ps.add(name + ".w", normal_init<T>({in, out}, kInitStd, rng));
  ps.add(name + ".b", Tensor<T>::zeros({out}, true));
}

template <class T>
void add_norm(ParamStore<T>& ps, const std::string& name, Index dim) {
  ps.add(name + ".gain", Tensor<T>::full({dim}, T(1), true));
  ps.add(name + ".bias", Tensor<T>::zeros({dim}, true));
}

template <class T>
void add_attention(ParamStore<T>& ps, const std::string& name, Index d, Pcg32& rng) {
  for (const char* p : {".q", ".k", ".v", ".o"}) add_linear(ps, name + p, d, d, rng);
}

template <class T>
Tensor<T> apply_linear(const ParamStore<T>& ps, const std::string& name, const Tensor<T>& x) {
  return linear(x, ps.at(name + ".w"), ps.at(name + ".b"));
}

template <class T>
Tensor<T> apply_norm(const ParamStore<T>& ps, const std::string& name, const Tensor<T>& x) {
  return layer_norm(x, ps.at(name + ".gain"), ps.at(name + ".bias"));
}

template <class T>
Tensor<T> multi_head(const ParamStore<T>& ps, const std::string& name, const Tensor<T>& xq, const Tensor<T>& xkv,
                     const AttentionSpec& spec, ForwardContext<T>& ctx) {
  const auto q = apply_linear(ps, name + ".q", xq);
  const auto k = apply_linear(ps, name + ".k", xkv);
  const auto v = apply_linear(ps, name + ".v", xkv);
  std::vector<T> probs;
  const auto a = attention(q, k, v, spec, ctx.attention_log ? &probs : nullptr);
  if (ctx.attention_log) ctx.attention_log->push_back(std::move(probs));
  return apply_linear(ps, name + ".o", a);
}

template <class T>
Tensor<T> feed_forward(const ParamStore<T>& ps, const std::string& name, const Tensor<T>& x, ForwardContext<T>& ctx) {
  return apply_linear(ps, name + ".out", ctx.drop(gelu(apply_linear(ps, name + ".in", x))));
}

}  // namespace detail

/// Encoder stack, embeddings, region projections and both prediction heads.
template <class T>
ParamStore<T> init_encoder_params(const EncoderConfig& cfg, Pcg32& rng) {
  cfg.validate();
  ParamStore<T> ps;
  const Index d = cfg.d_model;
  ps.add("token_emb", normal_init<T>({cfg.vocab_size, d}, kInitStd, rng));
  ps.add("pos_emb", normal_init<T>({cfg.max_positions, d}, kInitStd, rng));
  ps.add("lang_emb", normal_init<T>({kNumLangs, d}, kInitStd, rng));
  detail::add_linear(ps, "feat_proj", cfg.feat_dim, d, rng);
  detail::add_linear(ps, "bbox_proj", 4, d, rng);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    detail::add_attention(ps, p + ".attn", d, rng);
    detail::add_norm(ps, p + ".ln1", d);
    detail::add_linear(ps, p + ".ffn.in", d, cfg.ffn, rng);
    detail::add_linear(ps, p + ".ffn.out", cfg.ffn, d, rng);
    detail::add_norm(ps, p + ".ln2", d);
  }
  ps.add("mlm_head.bias", Tensor<T>::zeros({cfg.vocab_size}, true));
  detail::add_linear(ps, "mrc_head", d, cfg.label_vocab, rng);
  return ps;
}

/// Input embeddings for every row of the batch.
///
/// Text rows: token + position-in-segment + language. Visual rows: projected
/// feature + projected box (or the [MASK] token embedding, or a substitute
/// region's projections) + the VIS language embedding. Dropout is applied
/// once to the sum.
template <class T>
Tensor<T> embed(const MaskedBatch& mb, const ParamStore<T>& ps, ForwardContext<T>& ctx) {
  const Index rows = mb.rows();
  const auto& feat_w = ps.at("feat_proj.w");
  const Index feat_dim = feat_w.dim(0);
  std::vector<Index> token_rows;
  std::vector<T> feats;
  std::vector<T> boxes;
  std::vector<Index> order(static_cast<std::size_t>(rows));
  Index n_regions = 0;
  auto push_region = [&](const RegionFeature& r) {
    if (static_cast<Index>(r.feat.size()) != feat_dim) {
      throw ShapeError("region feature dim " + std::to_string(r.feat.size()) + " does not match feat_proj input " + std::to_string(feat_dim));
    }
    feats.insert(feats.end(), r.feat.begin(), r.feat.end());
    boxes.insert(boxes.end(), r.bbox.begin(), r.bbox.end());
    return n_regions++;
  };
  std::vector<std::pair<std::size_t, Index>> region_refs;  // row -> region index
  for (Index r = 0; r < rows; ++r) {
    const auto ri = static_cast<std::size_t>(r);
    const int slot = mb.region_slot[ri];
    if (slot < 0 || mb.pad[ri]) {
      order[ri] = static_cast<Index>(token_rows.size());
      token_rows.push_back(mb.token_ids[ri]);
      continue;
    }
    const auto& dir = mb.visual[ri];
    const Index b = r / mb.seq_len;
    switch (dir.kind) {
      case VisualDirective::Kind::MaskEmbed:
        order[ri] = static_cast<Index>(token_rows.size());
        token_rows.push_back(kMask);
        break;
      case VisualDirective::Kind::Original:
        region_refs.emplace_back(ri, push_region(mb.regions[static_cast<std::size_t>(b)][static_cast<std::size_t>(slot)]));
        break;
      case VisualDirective::Kind::Substitute:
        region_refs.emplace_back(ri, push_region(mb.regions[static_cast<std::size_t>(dir.example)][static_cast<std::size_t>(dir.slot)]));
        break;
    }
  }
  const auto n_tok = static_cast<Index>(token_rows.size());
  Tensor<T> content;
  const auto tok = n_tok > 0 ? gather_rows(ps.at("token_emb"), token_rows) : Tensor<T>();
  if (n_regions > 0) {
    const Tensor<T> f({n_regions, feat_dim}, std::move(feats));
    const Tensor<T> bx({n_regions, 4}, std::move(boxes));
    const auto reg = add(detail::apply_linear(ps, "feat_proj", f), detail::apply_linear(ps, "bbox_proj", bx));
    for (const auto& [row, idx] : region_refs) order[row] = n_tok + idx;
    content = gather_rows(n_tok > 0 ? concat_rows<T>({tok, reg}) : reg, order);
  } else {
    content = tok;
  }
  std::vector<Index> langs(static_cast<std::size_t>(rows));
  for (std::size_t i = 0; i < langs.size(); ++i) langs[i] = static_cast<Index>(mb.langs[i]);
  const auto& pos_emb = ps.at("pos_emb");
  for (Index p : mb.positions) {
    if (p >= pos_emb.dim(0)) throw IndexError("position " + std::to_string(p) + " exceeds max_positions " + std::to_string(pos_emb.dim(0)));
  }
  const auto x = add(add(content, gather_rows(pos_emb, mb.positions)), gather_rows(ps.at("lang_emb"), langs));
  return ctx.drop(x);
}

/// Post-norm transformer layers with full bidirectional attention; padding
/// keys are excluded. `prefix` selects the parameter namespace.
template <class T>
Tensor<T> encode(const Tensor<T>& embedded, const MaskedBatch& mb, const ParamStore<T>& ps, int layers, int heads,
                 ForwardContext<T>& ctx) {
  AttentionSpec spec;
  spec.batch = mb.batch;
  spec.q_len = mb.seq_len;
  spec.k_len = mb.seq_len;
  spec.heads = heads;
  spec.key_mask = mb.pad;
  Tensor<T> x = embedded;
  for (int l = 0; l < layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    const auto a = detail::multi_head(ps, p + ".attn", x, x, spec, ctx);
    x = detail::apply_norm(ps, p + ".ln1", add(x, ctx.drop(a)));
    const auto f = detail::feed_forward(ps, p + ".ffn", x, ctx);
    x = detail::apply_norm(ps, p + ".ln2", add(x, ctx.drop(f)));
  }
  return x;
}

/// Tied output projection: states . token_emb^T + bias.
template <class T>
Tensor<T> mlm_logits(const Tensor<T>& states, std::span<const Index> rows, const ParamStore<T>& ps) {
  return add_bias(matmul_bt(gather_rows(states, rows), ps.at("token_emb")), ps.at("mlm_head.bias"));
}

template <class T>
Tensor<T> mrc_logits(const Tensor<T>& states, std::span<const Index> rows, const ParamStore<T>& ps) {
  return detail::apply_linear(ps, "mrc_head", gather_rows(states, rows));
}

template <class T>
struct VtlmLoss {
  Tensor<T> loss;  // mlm + mrc; undefined when both target maps are empty
  double mlm_loss = 0;
  double mrc_loss = 0;
  double mlm_acc = 0;
  double mrc_acc = 0;
  Index mlm_count = 0;
  Index mrc_count = 0;
  bool has_mlm() const { return mlm_count > 0; }
  bool has_mrc() const { return mrc_count > 0; }
};

/// Equal-weight sum of masked-token and masked-region cross-entropies. An
/// empty target map contributes no term.
template <class T>
VtlmLoss<T> vtlm_loss(const Tensor<T>& states, const MaskedBatch& mb, const ParamStore<T>& ps) {
  VtlmLoss<T> out;
  std::vector<Tensor<T>> terms;
  if (!mb.text_targets.empty()) {
    std::vector<Index> rows;
    std::vector<Index> tgt;
    for (const auto& [r, t] : mb.text_targets) {
      rows.push_back(r);
      tgt.push_back(t);
    }
    const auto logits = mlm_logits(states, rows, ps);
    auto l = cross_entropy(logits, tgt);
    const auto pred = argmax_rows(logits);
    Index hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == tgt[i] ? 1 : 0;
    out.mlm_loss = l.item();
    out.mlm_count = static_cast<Index>(tgt.size());
    out.mlm_acc = static_cast<double>(hits) / static_cast<double>(tgt.size());
    terms.push_back(std::move(l));
  }
  if (!mb.visual_targets.empty()) {
    std::vector<Index> rows;
    std::vector<Index> tgt;
    for (const auto& [r, t] : mb.visual_targets) {
      rows.push_back(r);
      tgt.push_back(t);
    }
    const auto logits = mrc_logits(states, rows, ps);
    auto l = cross_entropy(logits, tgt);
    const auto pred = argmax_rows(logits);
    Index hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == tgt[i] ? 1 : 0;
    out.mrc_loss = l.item();
    out.mrc_count = static_cast<Index>(tgt.size());
    out.mrc_acc = static_cast<double>(hits) / static_cast<double>(tgt.size());
    terms.push_back(std::move(l));
  }
  if (terms.size() == 2) {
    out.loss = add(terms[0], terms[1]);
  } else if (terms.size() == 1) {
    out.loss = terms[0];
  }
  return out;
}

/// Pre-training model: configuration plus parameters.
template <class T>
struct VtlmModel {
  EncoderConfig cfg;
  Objective objective = Objective::VTLM;
  ParamStore<T> params;

  static VtlmModel create(const EncoderConfig& cfg, Objective objective, std::uint64_t seed) {
    Pcg32 rng = Pcg32::for_consumer(seed, "init");
    return {cfg, objective, init_encoder_params<T>(cfg, rng)};
  }

  Tensor<T> forward(const MaskedBatch& mb, ForwardContext<T>& ctx) const {
    return encode(embed(mb, params, ctx), mb, params, cfg.layers, cfg.heads, ctx);
  }

  VtlmLoss<T> loss(const MaskedBatch& mb, ForwardContext<T>& ctx) const { return vtlm_loss(forward(mb, ctx), mb, params); }
};

}  // namespace vtlm
