#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "vtlm/bpe.hpp"
#include "vtlm/corpus.hpp"
#include "vtlm/error.hpp"
#include "vtlm/rng.hpp"
#include "vtlm/tensor.hpp"

namespace vtlm {

enum class Objective { TLM, VTLM };

/// Selection ratio and 80/10/10 action split for both streams.
struct MaskPolicy {
  double select_ratio = 0.15;
  double mask_frac = 0.80;
  double random_frac = 0.10;
  double keep_frac = 0.10;
  /// Corrupting ratio for regions. 0 keeps every region intact while still
  /// choosing prediction targets at visual_target_ratio.
  double visual_select_ratio = 0.15;
  double visual_target_ratio = 0.15;

  void validate() const {
    if (std::abs(mask_frac + random_frac + keep_frac - 1.0) > 1e-9) throw ConfigError("mask/random/keep fractions must sum to 1");
    for (double r : {select_ratio, visual_select_ratio, visual_target_ratio, mask_frac, random_frac, keep_frac}) {
      if (r < 0 || r > 1) throw ConfigError("masking ratios must lie in [0, 1]");
    }
  }
};

enum class MaskAction { Mask, Random, Keep };

inline MaskAction draw_action(const MaskPolicy& p, Pcg32& rng) {
  const double u = rng.uniform();
  if (u < p.mask_frac) return MaskAction::Mask;
  if (u < p.mask_frac + p.random_frac) return MaskAction::Random;
  return MaskAction::Keep;
}

inline bool is_reserved(TokenId id) { return id < kNumReserved; }

struct TextMaskResult {
  std::vector<TokenId> tokens;
  std::map<int, TokenId> targets;  // position -> original token
};

/// Selects round(ratio * eligible) non-reserved positions (at least one when
/// any are eligible and ratio > 0) and applies MASK / random / keep.
inline TextMaskResult mask_text(std::span<const TokenId> tokens, const MaskPolicy& policy, TokenId vocab_size, Pcg32& rng) {
  TextMaskResult out{{tokens.begin(), tokens.end()}, {}};
  std::vector<int> eligible;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!is_reserved(tokens[i])) eligible.push_back(static_cast<int>(i));
  }
  if (eligible.empty() || policy.select_ratio <= 0) return out;
  auto count = static_cast<std::size_t>(std::lround(policy.select_ratio * static_cast<double>(eligible.size())));
  count = std::clamp<std::size_t>(count, 1, eligible.size());
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + rng.below(static_cast<std::uint32_t>(eligible.size() - i));
    std::swap(eligible[i], eligible[j]);
  }
  const bool can_randomise = vocab_size > kNumReserved;
  for (std::size_t i = 0; i < count; ++i) {
    const int pos = eligible[i];
    out.targets[pos] = tokens[static_cast<std::size_t>(pos)];
    switch (draw_action(policy, rng)) {
      case MaskAction::Mask:
        out.tokens[static_cast<std::size_t>(pos)] = kMask;
        break;
      case MaskAction::Random:
        if (can_randomise) {
          out.tokens[static_cast<std::size_t>(pos)] =
              kNumReserved + static_cast<TokenId>(rng.below(static_cast<std::uint32_t>(vocab_size - kNumReserved)));
        }
        break;
      case MaskAction::Keep:
        break;
    }
  }
  return out;
}

/// How the embedder fills one visual slot.
struct VisualDirective {
  enum class Kind { Original, MaskEmbed, Substitute };
  Kind kind = Kind::Original;
  int example = -1;  // source of a substitute region
  int slot = -1;

  bool operator==(const VisualDirective&) const = default;
};

struct VisualMaskResult {
  std::vector<std::vector<VisualDirective>> directives;  // [example][slot]
  std::map<std::pair<int, int>, std::int32_t> targets;   // (example, slot) -> label
};

/// Region masking over a whole batch. The number of selected slots is the
/// batch total times the ratio, stochastically rounded, so the expected
/// selection rate is exact even for small region counts. Substitutes come
/// from other examples of the batch; with a single example a substitute
/// draw is re-drawn between mask and keep in proportion.
inline VisualMaskResult mask_visual(const std::vector<std::vector<RegionFeature>>& regions, const MaskPolicy& policy, Pcg32& rng) {
  VisualMaskResult out;
  std::vector<std::pair<int, int>> slots;
  for (std::size_t b = 0; b < regions.size(); ++b) {
    out.directives.emplace_back(regions[b].size());
    for (std::size_t s = 0; s < regions[b].size(); ++s) slots.emplace_back(static_cast<int>(b), static_cast<int>(s));
  }
  const bool corrupt = policy.visual_select_ratio > 0;
  const double ratio = corrupt ? policy.visual_select_ratio : policy.visual_target_ratio;
  if (slots.empty() || ratio <= 0) return out;
  const double expected = ratio * static_cast<double>(slots.size());
  auto count = static_cast<std::size_t>(std::floor(expected));
  if (rng.uniform() < expected - std::floor(expected)) ++count;
  count = std::clamp<std::size_t>(count, 1, slots.size());
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + rng.below(static_cast<std::uint32_t>(slots.size() - i));
    std::swap(slots[i], slots[j]);
  }
  const bool can_substitute = regions.size() >= 2;
  for (std::size_t i = 0; i < count; ++i) {
    const auto [b, s] = slots[i];
    out.targets[{b, s}] = regions[static_cast<std::size_t>(b)][static_cast<std::size_t>(s)].label;
    if (!corrupt) continue;
    auto& d = out.directives[static_cast<std::size_t>(b)][static_cast<std::size_t>(s)];
    MaskAction action = draw_action(policy, rng);
    if (action == MaskAction::Random && !can_substitute) {
      const double denom = policy.mask_frac + policy.keep_frac;
      action = denom > 0 && rng.uniform() * denom < policy.mask_frac ? MaskAction::Mask : MaskAction::Keep;
    }
    switch (action) {
      case MaskAction::Mask:
        d.kind = VisualDirective::Kind::MaskEmbed;
        break;
      case MaskAction::Random: {
        auto other = static_cast<int>(rng.below(static_cast<std::uint32_t>(regions.size() - 1)));
        if (other >= b) ++other;
        const auto& src = regions[static_cast<std::size_t>(other)];
        d = {VisualDirective::Kind::Substitute, other, static_cast<int>(rng.below(static_cast<std::uint32_t>(src.size())))};
        break;
      }
      case MaskAction::Keep:
        break;
    }
  }
  return out;
}

/// Flat layout of one example:
///   [BOS] src [EOS] [SEP] [BOS] tgt [EOS] [SEP] (v_1 .. v_o for VTLM)
/// Positions restart at 0 in each language segment; visual slots carry no
/// position (-1).
struct StreamLayout {
  std::vector<TokenId> tokens;  // kPad at visual slots
  std::vector<Index> positions;
  std::vector<Lang> langs;
  std::vector<int> region_slot;  // -1 for text
  int src_len = 0;               // possibly truncated
  int tgt_len = 0;
  int text_len() const { return static_cast<int>(tokens.size()) - num_regions(); }
  int num_regions() const {
    return static_cast<int>(std::count_if(region_slot.begin(), region_slot.end(), [](int s) { return s >= 0; }));
  }
  int src_offset() const { return 1; }
  int tgt_offset() const { return src_len + 4; }
};

inline constexpr int kStreamSpecials = 6;

/// Builds the layout, truncating text tails (longer segment first) when the
/// total would exceed `max_len`. Regions are never truncated.
inline StreamLayout build_stream(std::span<const TokenId> src, std::span<const TokenId> tgt, int num_regions, Objective mode,
                                 int max_len = 256) {
  const int o = mode == Objective::VTLM ? num_regions : 0;
  int m = static_cast<int>(src.size());
  int n = static_cast<int>(tgt.size());
  if (o + kStreamSpecials + 2 > max_len) throw ConfigError("max sequence length too small for the region count");
  while (m + n + kStreamSpecials + o > max_len) {
    if (m >= n) {
      --m;
    } else {
      --n;
    }
  }
  StreamLayout l;
  l.src_len = m;
  l.tgt_len = n;
  auto push = [&](TokenId t, Index pos, Lang lang, int slot) {
    l.tokens.push_back(t);
    l.positions.push_back(pos);
    l.langs.push_back(lang);
    l.region_slot.push_back(slot);
  };
  auto segment = [&](std::span<const TokenId> s, int len, Lang lang) {
    Index p = 0;
    push(kBos, p++, lang, -1);
    for (int i = 0; i < len; ++i) push(s[static_cast<std::size_t>(i)], p++, lang, -1);
    push(kEos, p++, lang, -1);
    push(kSep, p++, lang, -1);
  };
  segment(src, m, Lang::L1);
  segment(tgt, n, Lang::L2);
  for (int s = 0; s < o; ++s) push(kPad, -1, Lang::VIS, s);
  return l;
}

/// Corrupted model input x~ for a batch plus its prediction targets.
/// Rows are laid out [example * seq_len + position].
struct MaskedBatch {
  Index batch = 0;
  Index seq_len = 0;
  Objective mode = Objective::TLM;
  std::vector<TokenId> token_ids;  // text part of x~; kPad elsewhere
  std::vector<Index> positions;    // -1 for visual and padding rows
  std::vector<Lang> langs;
  std::vector<std::uint8_t> pad;   // 1 = padding row
  std::vector<int> lengths;
  /// Directive per row; meaningful for visual rows only.
  std::vector<VisualDirective> visual;
  std::vector<int> region_slot;  // -1 for non-visual rows
  /// Regions per example (copied so the batch is self-contained).
  std::vector<std::vector<RegionFeature>> regions;
  std::map<Index, TokenId> text_targets;       // row -> original token
  std::map<Index, std::int32_t> visual_targets;  // row -> region label

  Index rows() const { return batch * seq_len; }
};

/// Assembles a padded batch and applies both maskings with their own
/// (disjoint) generator streams.
inline MaskedBatch make_masked_batch(std::span<const TripletExample* const> examples, Objective mode, const MaskPolicy& policy,
                                     TokenId vocab_size, Pcg32& text_rng, Pcg32& visual_rng, int max_len = 256) {
  if (examples.empty()) throw UsageError("make_masked_batch: empty batch");
  MaskedBatch mb;
  mb.mode = mode;
  mb.batch = static_cast<Index>(examples.size());
  std::vector<StreamLayout> layouts;
  for (const auto* ex : examples) {
    layouts.push_back(build_stream(ex->src, ex->tgt, static_cast<int>(ex->regions.size()), mode, max_len));
    mb.lengths.push_back(static_cast<int>(layouts.back().tokens.size()));
    mb.seq_len = std::max<Index>(mb.seq_len, static_cast<Index>(layouts.back().tokens.size()));
    mb.regions.push_back(mode == Objective::VTLM ? ex->regions : std::vector<RegionFeature>{});
  }
  const Index rows = mb.rows();
  mb.token_ids.assign(static_cast<std::size_t>(rows), kPad);
  mb.positions.assign(static_cast<std::size_t>(rows), -1);
  mb.langs.assign(static_cast<std::size_t>(rows), Lang::L1);
  mb.pad.assign(static_cast<std::size_t>(rows), 1);
  mb.visual.assign(static_cast<std::size_t>(rows), {});
  mb.region_slot.assign(static_cast<std::size_t>(rows), -1);

  for (Index b = 0; b < mb.batch; ++b) {
    const auto& l = layouts[static_cast<std::size_t>(b)];
    const int text_len = l.text_len();
    const auto masked = mask_text(std::span<const TokenId>(l.tokens.data(), static_cast<std::size_t>(text_len)), policy, vocab_size, text_rng);
    for (std::size_t i = 0; i < l.tokens.size(); ++i) {
      const auto r = static_cast<std::size_t>(b * mb.seq_len) + i;
      mb.pad[r] = 0;
      mb.positions[r] = l.positions[i];
      mb.langs[r] = l.langs[i];
      mb.region_slot[r] = l.region_slot[i];
      mb.token_ids[r] = static_cast<int>(i) < text_len ? masked.tokens[i] : kPad;
    }
    for (const auto& [pos, tok] : masked.targets) mb.text_targets[b * mb.seq_len + pos] = tok;
  }

  if (mode == Objective::VTLM) {
    const auto vis = mask_visual(mb.regions, policy, visual_rng);
    for (Index b = 0; b < mb.batch; ++b) {
      const auto& l = layouts[static_cast<std::size_t>(b)];
      const Index base = b * mb.seq_len + l.text_len();
      for (std::size_t s = 0; s < vis.directives[static_cast<std::size_t>(b)].size(); ++s) {
        mb.visual[static_cast<std::size_t>(base) + s] = vis.directives[static_cast<std::size_t>(b)][s];
      }
    }
    for (const auto& [key, label] : vis.targets) {
      const auto& l = layouts[static_cast<std::size_t>(key.first)];
      mb.visual_targets[key.first * mb.seq_len + l.text_len() + key.second] = label;
    }
  }
  return mb;
}

/// Batch with no corruption and no targets; probes edit it directly.
inline MaskedBatch make_clean_batch(std::span<const TripletExample* const> examples, Objective mode, int max_len = 256) {
  MaskPolicy none;
  none.select_ratio = 0;
  none.visual_select_ratio = 0;
  none.visual_target_ratio = 0;
  Pcg32 a;
  Pcg32 b;
  return make_masked_batch(examples, mode, none, kNumReserved + 1, a, b, max_len);
}

}  // namespace vtlm
