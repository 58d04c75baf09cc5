#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "test_util.hpp"
#include "vtlm/encoder.hpp"
#include "vtlm/optim.hpp"

using namespace vtlm;

namespace {

EncoderConfig tiny_cfg(int vocab, int feat_dim = 16) {
  EncoderConfig c;
  c.d_model = 16;
  c.ffn = 32;
  c.layers = 2;
  c.heads = 2;
  c.dropout = 0;
  c.vocab_size = vocab;
  c.feat_dim = feat_dim;
  return c;
}

std::vector<const TripletExample*> ptrs(const std::vector<TripletExample>& v, std::size_t n) {
  std::vector<const TripletExample*> out;
  for (std::size_t i = 0; i < std::min(n, v.size()); ++i) out.push_back(&v[i]);
  return out;
}

MaskedBatch masked(const std::vector<const TripletExample*>& ex, Objective obj, int vocab, std::uint64_t step = 1) {
  Pcg32 a = Pcg32::for_step(1, "masking.text", step);
  Pcg32 b = Pcg32::for_step(1, "masking.visual", step);
  MaskPolicy p;
  p.select_ratio = 0.3;
  p.visual_select_ratio = 0.3;
  return make_masked_batch(ex, obj, p, vocab, a, b);
}

}  // namespace

TEST(Encoder, EndToEndGradientsMatchFiniteDifferences) {
  const auto t = vtlm::testing::tiny_corpus(8);
  const int vocab = t.tok.vocab().size();
  auto model = VtlmModel<double>::create(tiny_cfg(vocab), Objective::VTLM, 5);
  const auto ex = ptrs(t.examples, 4);
  const auto mb = masked(ex, Objective::VTLM, vocab);
  ASSERT_FALSE(mb.text_targets.empty());
  ASSERT_FALSE(mb.visual_targets.empty());
  auto loss = [&] {
    ForwardContext<double> ctx;
    return model.loss(mb, ctx).loss;
  };
  const std::vector<std::string> names{"token_emb",         "pos_emb",           "lang_emb",     "feat_proj.w", "bbox_proj.w",
                                       "layer0.attn.q.w",   "layer0.attn.k.w",   "layer0.ln1.gain", "layer1.ffn.in.w",
                                       "layer1.attn.v.w",   "layer1.ln2.bias",   "mrc_head.w",   "mlm_head.bias"};
  const auto checks = vtlm::testing::check_param_gradients(model.params, loss, names, 3, 1e-3, 17);
  ASSERT_GE(checks.size(), 20U);
  for (const auto& c : checks) EXPECT_LT(c.rel_error, 1e-4) << c.param << "[" << c.index << "] " << c.analytic << " vs " << c.numeric;
}

TEST(Encoder, PaddingDoesNotChangeStates) {
  const auto t = vtlm::testing::tiny_corpus(16);
  const int vocab = t.tok.vocab().size();
  const auto model = VtlmModel<double>::create(tiny_cfg(vocab), Objective::VTLM, 6);
  // Pick the shortest and longest examples so one is padded.
  std::size_t shortest = 0;
  std::size_t longest = 0;
  for (std::size_t i = 0; i < t.examples.size(); ++i) {
    const auto len = t.examples[i].src.size() + t.examples[i].tgt.size();
    if (len < t.examples[shortest].src.size() + t.examples[shortest].tgt.size()) shortest = i;
    if (len > t.examples[longest].src.size() + t.examples[longest].tgt.size()) longest = i;
  }
  ASSERT_NE(shortest, longest);
  const TripletExample* alone[] = {&t.examples[shortest]};
  const TripletExample* pair[] = {&t.examples[longest], &t.examples[shortest]};
  const auto mb1 = make_clean_batch(alone, Objective::VTLM);
  const auto mb2 = make_clean_batch(pair, Objective::VTLM);
  ASSERT_GT(mb2.seq_len, mb1.seq_len);
  ForwardContext<double> ctx;
  const auto s1 = model.forward(mb1, ctx);
  const auto s2 = model.forward(mb2, ctx);
  const Index d = s1.dim(-1);
  for (Index i = 0; i < mb1.seq_len; ++i) {
    for (Index k = 0; k < d; ++k) {
      EXPECT_NEAR(s1.at(i * d + k), s2.at((mb2.seq_len + i) * d + k), 1e-10);
    }
  }
}

TEST(Encoder, TlmIgnoresRegionFeatures) {
  auto t = vtlm::testing::tiny_corpus(4);
  const int vocab = t.tok.vocab().size();
  const auto model = VtlmModel<double>::create(tiny_cfg(vocab), Objective::TLM, 7);
  const auto ex = ptrs(t.examples, 4);
  ForwardContext<double> ctx;
  const double before = model.loss(masked(ex, Objective::TLM, vocab), ctx).loss.item();
  for (auto& e : t.examples) {
    for (auto& r : e.regions) std::fill(r.feat.begin(), r.feat.end(), 9.0F);
  }
  const double after = model.loss(masked(ex, Objective::TLM, vocab), ctx).loss.item();
  EXPECT_EQ(before, after);
}

TEST(Encoder, MaskedRegionUsesMaskEmbedding) {
  const auto t = vtlm::testing::tiny_corpus(2);
  const int vocab = t.tok.vocab().size();
  const auto model = VtlmModel<double>::create(tiny_cfg(vocab), Objective::VTLM, 8);
  const TripletExample* one[] = {&t.examples[0]};
  auto mb = make_clean_batch(one, Objective::VTLM);
  const Index row = mb.lengths[0] - 1;  // last region slot
  mb.visual[static_cast<std::size_t>(row)].kind = VisualDirective::Kind::MaskEmbed;
  ForwardContext<double> ctx;
  const auto e = embed(mb, model.params, ctx);
  const Index d = e.dim(-1);
  const auto& tok = model.params.at("token_emb");
  const auto& lang = model.params.at("lang_emb");
  for (Index k = 0; k < d; ++k) {
    EXPECT_NEAR(e.at(row * d + k), tok.at(kMask * d + k) + lang.at(static_cast<Index>(Lang::VIS) * d + k), 1e-12);
  }
}

TEST(Encoder, RegionFeatureDimensionIsChecked) {
  const auto t = vtlm::testing::tiny_corpus(2);
  const auto model = VtlmModel<double>::create(tiny_cfg(t.tok.vocab().size(), 32), Objective::VTLM, 9);
  const TripletExample* one[] = {&t.examples[0]};
  const auto mb = make_clean_batch(one, Objective::VTLM);
  ForwardContext<double> ctx;
  EXPECT_THROW(model.forward(mb, ctx), ShapeError);
}

TEST(Encoder, ConfigValidation) {
  auto c = tiny_cfg(100);
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_cfg(3);
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Encoder, OverfitsASmallBatch) {
  const auto t = vtlm::testing::tiny_corpus(8);
  const int vocab = t.tok.vocab().size();
  auto cfg = tiny_cfg(vocab);
  cfg.d_model = 32;
  cfg.ffn = 64;
  auto model = VtlmModel<float>::create(cfg, Objective::VTLM, 10);
  const auto ex = ptrs(t.examples, 8);
  const auto mb = masked(ex, Objective::VTLM, vocab);
  Adam<float> adam;
  ForwardContext<float> ctx;
  const double first = model.loss(mb, ctx).loss.item();
  double last = first;
  for (int i = 0; i < 150; ++i) {
    model.params.zero_grad();
    auto l = model.loss(mb, ctx);
    last = l.loss.item();
    l.loss.backward();
    adam.step(model.params, 3e-3);
  }
  EXPECT_LT(last, 0.1 * first);
}
