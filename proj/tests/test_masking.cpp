#include <gtest/gtest.h>

#include "test_util.hpp"
#include "vtlm/masking.hpp"

using namespace vtlm;

TEST(Layout, StreamOrderAndLengths) {
  const std::vector<TokenId> src{10, 11, 12};
  const std::vector<TokenId> tgt{20, 21};
  const auto v = build_stream(src, tgt, 8, Objective::VTLM);
  EXPECT_EQ(v.tokens.size(), 19U);
  EXPECT_EQ(v.num_regions(), 8);
  EXPECT_EQ(v.text_len(), 11);
  const std::vector<TokenId> text(v.tokens.begin(), v.tokens.begin() + 11);
  EXPECT_EQ(text, (std::vector<TokenId>{kBos, 10, 11, 12, kEos, kSep, kBos, 20, 21, kEos, kSep}));
  EXPECT_EQ(v.positions[0], 0);
  EXPECT_EQ(v.positions[6], 0);  // positions restart per segment
  EXPECT_EQ(v.positions[11], -1);
  EXPECT_EQ(v.langs[7], Lang::L2);
  EXPECT_EQ(v.langs[18], Lang::VIS);
  EXPECT_EQ(v.tgt_offset(), 7);

  const auto t = build_stream(src, tgt, 8, Objective::TLM);
  EXPECT_EQ(t.tokens.size(), 11U);
  EXPECT_EQ(t.num_regions(), 0);
}

TEST(Layout, TruncatesLongerSegmentFirst) {
  const std::vector<TokenId> src(10, 7);
  const std::vector<TokenId> tgt(4, 8);
  const auto l = build_stream(src, tgt, 2, Objective::VTLM, 16);
  EXPECT_EQ(l.tokens.size(), 16U);
  EXPECT_EQ(l.src_len, 4);
  EXPECT_EQ(l.tgt_len, 4);
  EXPECT_THROW(build_stream(src, tgt, 9, Objective::VTLM, 16), ConfigError);
}

TEST(TextMasking, SelectionRateAndActionSplit) {
  MaskPolicy p;
  Pcg32 rng = Pcg32::for_consumer(11, "masking.text");
  std::vector<TokenId> seq(100);
  for (std::size_t i = 0; i < seq.size(); ++i) seq[i] = static_cast<TokenId>(kNumReserved + i);
  long eligible = 0;
  long selected = 0;
  long masked = 0;
  long random = 0;
  long kept = 0;
  for (int it = 0; it < 2000; ++it) {
    const auto r = mask_text(seq, p, 1000, rng);
    eligible += static_cast<long>(seq.size());
    selected += static_cast<long>(r.targets.size());
    for (const auto& [pos, orig] : r.targets) {
      const TokenId now = r.tokens[static_cast<std::size_t>(pos)];
      if (now == kMask) {
        ++masked;
      } else if (now == orig) {
        ++kept;
      } else {
        ++random;
      }
    }
  }
  ASSERT_GE(eligible, 100000);
  EXPECT_NEAR(static_cast<double>(selected) / eligible, 0.15, 0.005);
  // A random draw can land on the original token (1/994), which counts as kept here.
  EXPECT_NEAR(static_cast<double>(masked) / selected, 0.80, 0.005);
  EXPECT_NEAR(static_cast<double>(random) / selected, 0.10, 0.005);
  EXPECT_NEAR(static_cast<double>(kept) / selected, 0.10, 0.005);
}

TEST(TextMasking, NeverSelectsReservedTokens) {
  MaskPolicy p;
  p.select_ratio = 1.0;
  Pcg32 rng(1, 1);
  const std::vector<TokenId> seq{kBos, 10, kEos, kSep, 11, kPad};
  const auto r = mask_text(seq, p, 50, rng);
  EXPECT_EQ(r.targets.size(), 2U);
  EXPECT_TRUE(r.targets.count(1));
  EXPECT_TRUE(r.targets.count(4));
}

TEST(TextMasking, RandomReplacementsAvoidReservedIds) {
  MaskPolicy p;
  p.select_ratio = 1.0;
  p.mask_frac = 0;
  p.random_frac = 1;
  p.keep_frac = 0;
  Pcg32 rng(2, 2);
  const std::vector<TokenId> seq(1000, 10);
  const auto r = mask_text(seq, p, 20, rng);
  for (TokenId t : r.tokens) {
    EXPECT_GE(t, kNumReserved);
    EXPECT_LT(t, 20);
  }
}

TEST(VisualMasking, SelectionRateOverBatches) {
  MaskPolicy p;
  Pcg32 rng = Pcg32::for_consumer(12, "masking.visual");
  const std::vector<std::vector<RegionFeature>> regions(64, std::vector<RegionFeature>(8));
  long slots = 0;
  long selected = 0;
  long masked = 0;
  long substituted = 0;
  for (int it = 0; it < 250; ++it) {
    const auto r = mask_visual(regions, p, rng);
    slots += 64 * 8;
    selected += static_cast<long>(r.targets.size());
    for (const auto& [key, _] : r.targets) {
      const auto kind = r.directives[static_cast<std::size_t>(key.first)][static_cast<std::size_t>(key.second)].kind;
      masked += kind == VisualDirective::Kind::MaskEmbed ? 1 : 0;
      substituted += kind == VisualDirective::Kind::Substitute ? 1 : 0;
    }
  }
  ASSERT_GE(slots, 100000);
  EXPECT_NEAR(static_cast<double>(selected) / slots, 0.15, 0.005);
  EXPECT_NEAR(static_cast<double>(masked) / selected, 0.80, 0.01);
  EXPECT_NEAR(static_cast<double>(substituted) / selected, 0.10, 0.01);
}

TEST(VisualMasking, SubstitutesComeFromOtherExamples) {
  MaskPolicy p;
  p.visual_select_ratio = 1.0;
  p.mask_frac = 0;
  p.random_frac = 1;
  p.keep_frac = 0;
  Pcg32 rng(3, 3);
  const std::vector<std::vector<RegionFeature>> regions(3, std::vector<RegionFeature>(4));
  const auto r = mask_visual(regions, p, rng);
  for (std::size_t b = 0; b < 3; ++b) {
    for (const auto& d : r.directives[b]) {
      EXPECT_EQ(d.kind, VisualDirective::Kind::Substitute);
      EXPECT_NE(d.example, static_cast<int>(b));
    }
  }
}

TEST(VisualMasking, ZeroRatioKeepsRegionsButStillPicksTargets) {
  MaskPolicy p;
  p.visual_select_ratio = 0;
  Pcg32 rng(4, 4);
  const std::vector<std::vector<RegionFeature>> regions(64, std::vector<RegionFeature>(8));
  const auto r = mask_visual(regions, p, rng);
  EXPECT_FALSE(r.targets.empty());
  for (const auto& row : r.directives) {
    for (const auto& d : row) EXPECT_EQ(d.kind, VisualDirective::Kind::Original);
  }
}

TEST(MaskedBatch, TlmIgnoresRegions) {
  const auto t = vtlm::testing::tiny_corpus(8);
  std::vector<const TripletExample*> ex;
  for (const auto& e : t.examples) ex.push_back(&e);
  MaskPolicy p;
  Pcg32 a(1, 1);
  Pcg32 b(2, 2);
  const auto mb = make_masked_batch(ex, Objective::TLM, p, t.tok.vocab().size(), a, b);
  EXPECT_TRUE(mb.visual_targets.empty());
  for (const auto& r : mb.regions) EXPECT_TRUE(r.empty());
  for (int s : mb.region_slot) EXPECT_EQ(s, -1);
  EXPECT_FALSE(mb.text_targets.empty());
}

TEST(MaskedBatch, PaddingAndDeterminism) {
  const auto t = vtlm::testing::tiny_corpus(8);
  std::vector<const TripletExample*> ex;
  for (const auto& e : t.examples) ex.push_back(&e);
  MaskPolicy p;
  auto build = [&] {
    Pcg32 a = Pcg32::for_step(1, "masking.text", 3);
    Pcg32 b = Pcg32::for_step(1, "masking.visual", 3);
    return make_masked_batch(ex, Objective::VTLM, p, t.tok.vocab().size(), a, b);
  };
  const auto m1 = build();
  const auto m2 = build();
  EXPECT_EQ(m1.token_ids, m2.token_ids);
  EXPECT_EQ(m1.text_targets, m2.text_targets);
  EXPECT_EQ(m1.visual_targets, m2.visual_targets);
  for (Index b = 0; b < m1.batch; ++b) {
    for (Index i = 0; i < m1.seq_len; ++i) {
      const bool is_pad = i >= m1.lengths[static_cast<std::size_t>(b)];
      EXPECT_EQ(m1.pad[static_cast<std::size_t>(b * m1.seq_len + i)], is_pad ? 1 : 0);
    }
  }
  for (const auto& [row, label] : m1.visual_targets) {
    EXPECT_GE(m1.region_slot[static_cast<std::size_t>(row)], 0);
    const auto b = static_cast<std::size_t>(row / m1.seq_len);
    EXPECT_EQ(label, m1.regions[b][static_cast<std::size_t>(m1.region_slot[static_cast<std::size_t>(row)])].label);
  }
}

TEST(MaskPolicy, ValidatesFractions) {
  MaskPolicy p;
  p.keep_frac = 0.2;
  EXPECT_THROW(p.validate(), ConfigError);
  MaskPolicy q;
  q.select_ratio = 1.5;
  EXPECT_THROW(q.validate(), ConfigError);
}
