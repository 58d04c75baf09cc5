#include <gtest/gtest.h>

#include <map>

#include "gradcheck.hpp"
#include "test_util.hpp"
#include "vtlm/optim.hpp"
#include "vtlm/seq2seq.hpp"

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

}  // namespace

TEST(Transfer, CopiesSelfAttentionIntoCrossAttention) {
  const auto t = vtlm::testing::tiny_corpus(2);
  const auto cfg = tiny_cfg(t.tok.vocab().size());
  const auto pre = VtlmModel<float>::create(cfg, Objective::VTLM, 1);
  const auto copy = MtModel<float>::from_pretrained(pre.params, cfg, MtTask::MMT, true, 2);
  const auto fresh = MtModel<float>::from_pretrained(pre.params, cfg, MtTask::MMT, false, 2);
  for (const char* part : {".q.w", ".k.b", ".o.w"}) {
    const std::string self = std::string("layer1.attn") + part;
    const std::string cross = std::string("layer1.cross") + part;
    EXPECT_EQ(copy.dec.at(cross).values(), pre.params.at(self).values());
    EXPECT_EQ(copy.dec.at(self).values(), pre.params.at(self).values());
  }
  EXPECT_NE(fresh.dec.at("layer1.cross.q.w").values(), pre.params.at("layer1.attn.q.w").values());
  EXPECT_EQ(copy.dec.at("layer0.ln_cross.gain").values(), pre.params.at("layer0.ln1.gain").values());
  EXPECT_EQ(copy.dec.at("out_bias").values(), pre.params.at("mlm_head.bias").values());
  EXPECT_EQ(copy.enc.at("feat_proj.w").values(), pre.params.at("feat_proj.w").values());
  EXPECT_FALSE(copy.enc.contains("mlm_head.bias"));
  EXPECT_FALSE(copy.enc.contains("mrc_head.w"));
  // Transferred tensors are copies, not aliases.
  auto alias_probe = copy.enc.at("token_emb");
  alias_probe.at(0) += 1.0F;
  EXPECT_NE(alias_probe.at(0), pre.params.at("token_emb").at(0));
}

TEST(Transfer, RejectsIncompatibleShapes) {
  const auto t = vtlm::testing::tiny_corpus(2);
  const auto cfg = tiny_cfg(t.tok.vocab().size());
  const auto pre = VtlmModel<float>::create(cfg, Objective::VTLM, 1);
  auto other_d = cfg;
  other_d.feat_dim = 32;
  EXPECT_THROW(MtModel<float>::from_pretrained(pre.params, other_d, MtTask::MMT, true, 2), TransferError);
  auto other_layers = cfg;
  other_layers.layers = 3;
  EXPECT_THROW(MtModel<float>::from_pretrained(pre.params, other_layers, MtTask::MMT, true, 2), TransferError);
  auto other_vocab = cfg;
  other_vocab.vocab_size += 1;
  EXPECT_THROW(MtModel<float>::from_pretrained(pre.params, other_vocab, MtTask::NMT, true, 2), TransferError);
}

TEST(SourceBatch, MmtAppendsRegionsNmtDoesNot) {
  const auto t = vtlm::testing::tiny_corpus(2);
  const auto ex = ptrs(t.examples, 1);
  const auto n = make_source_batch(ex, MtTask::NMT);
  const auto m = make_source_batch(ex, MtTask::MMT);
  EXPECT_EQ(n.seq_len, static_cast<Index>(t.examples[0].src.size()) + 2);
  EXPECT_EQ(m.seq_len, n.seq_len + static_cast<Index>(t.examples[0].regions.size()));
  EXPECT_EQ(m.langs.back(), Lang::VIS);
}

TEST(Decoder, IsCausal) {
  const auto t = vtlm::testing::tiny_corpus(2);
  const auto cfg = tiny_cfg(t.tok.vocab().size());
  const auto model = MtModel<double>::scratch(cfg, MtTask::MMT, 3);
  const auto ex = ptrs(t.examples, 1);
  ForwardContext<double> ctx;
  const auto memory = model.encode_source(ex, ctx);
  auto y1 = t.examples[0].tgt;
  auto y2 = y1;
  y2.back() = y2.back() == 10 ? 11 : 10;
  const auto l1 = model.decode(make_target_batch({y1}), memory, ctx);
  const auto l2 = model.decode(make_target_batch({y2}), memory, ctx);
  const Index v = l1.dim(-1);
  const Index changed_input = static_cast<Index>(y1.size());  // inputs are [BOS] y, so y.back() sits at index |y|
  for (Index r = 0; r < changed_input; ++r) {
    for (Index k = 0; k < v; ++k) EXPECT_EQ(l1.at(r * v + k), l2.at(r * v + k));
  }
  bool differs = false;
  for (Index k = 0; k < v; ++k) differs = differs || l1.at(changed_input * v + k) != l2.at(changed_input * v + k);
  EXPECT_TRUE(differs);
}

TEST(Decoder, TranslationLossGradients) {
  const auto t = vtlm::testing::tiny_corpus(4);
  const auto cfg = tiny_cfg(t.tok.vocab().size());
  auto model = MtModel<double>::scratch(cfg, MtTask::MMT, 4);
  auto joined = model.joined();
  const auto ex = ptrs(t.examples, 3);
  auto loss = [&] {
    ForwardContext<double> ctx;
    return model.loss(ex, ctx).loss;
  };
  const std::vector<std::string> names{"enc.token_emb", "enc.feat_proj.w", "enc.layer1.attn.k.w", "dec.layer0.cross.q.w",
                                       "dec.layer1.cross.v.w", "dec.layer0.attn.k.w", "dec.out_bias", "dec.layer1.ln_cross.gain"};
  const auto checks = vtlm::testing::check_param_gradients(joined, loss, names, 4, 1e-3, 5);
  ASSERT_GE(checks.size(), 20U);
  for (const auto& c : checks) EXPECT_LT(c.rel_error, 1e-4) << c.param << "[" << c.index << "]";
}

TEST(Beam, FindsBruteForceOptimumOnToyModel) {
  // Markov model over tokens {EOS=3, 6, 7}: probabilities depend on the last token.
  std::map<TokenId, std::vector<double>> table{
      {-1, {0, 0, 0, 0.05, 0, 0, 0.55, 0.40}},
      {6, {0, 0, 0, 0.10, 0, 0, 0.10, 0.80}},
      {7, {0, 0, 0, 0.90, 0, 0, 0.05, 0.05}},
  };
  NextTokenFn next = [&](const std::vector<std::vector<TokenId>>& prefixes) {
    std::vector<std::vector<double>> out;
    for (const auto& p : prefixes) {
      // Junk tokens kept by a wide beam can only end the sentence.
      const auto it = table.find(p.empty() ? -1 : p.back());
      const auto row = it != table.end() ? it->second : std::vector<double>{0, 0, 0, 1, 0, 0, 0, 0};
      std::vector<double> lp;
      for (double x : row) lp.push_back(x > 0 ? std::log(x) : -1e9);
      out.push_back(lp);
    }
    return out;
  };
  // Brute force over sequences of length <= 4 ending in EOS, ranked by mean log-prob.
  std::vector<TokenId> best;
  double best_score = -1e18;
  std::function<void(std::vector<TokenId>, double)> rec = [&](std::vector<TokenId> seq, double lp) {
    for (TokenId tkn : {TokenId(3), TokenId(6), TokenId(7)}) {
      const auto& row = table.at(seq.empty() ? -1 : seq.back());
      auto s = seq;
      s.push_back(tkn);
      const double l = lp + std::log(row[static_cast<std::size_t>(tkn)]);
      if (tkn == 3) {
        const double score = l / static_cast<double>(s.size());
        if (score > best_score) {
          best_score = score;
          best = s;
        }
      } else if (s.size() < 4) {
        rec(s, l);
      }
    }
  };
  rec({}, 0.0);
  const auto hyps = beam_search(next, {8, 4, 1.0});
  EXPECT_EQ(hyps.front().tokens, best);
  EXPECT_NEAR(ranking_score(hyps.front(), 1.0), best_score, 1e-12);
  // Greedy follows 6 -> 7 -> EOS, which here is also the optimum.
  EXPECT_EQ(greedy_search(next, 4).tokens, (std::vector<TokenId>{6, 7, 3}));
}

TEST(Beam, BeamOneEqualsGreedyOnModel) {
  const auto t = vtlm::testing::tiny_corpus(20);
  const auto cfg = tiny_cfg(t.tok.vocab().size());
  const auto model = MtModel<float>::scratch(cfg, MtTask::MMT, 5);
  for (std::size_t i = 0; i < 20; ++i) {
    const auto next = next_token_fn(model, t.examples[i]);
    const auto beam = beam_search(next, {1, 12, 1.0}).front();
    const auto greedy = greedy_search(next, 12);
    EXPECT_EQ(beam.tokens, greedy.tokens);
    EXPECT_NEAR(beam.log_prob, greedy.log_prob, 1e-9);
  }
}

TEST(Beam, ForceFinishesAtMaxLength) {
  NextTokenFn never_eos = [](const std::vector<std::vector<TokenId>>& prefixes) {
    return std::vector<std::vector<double>>(prefixes.size(), {-50, -50, -50, -50, -50, -50, -0.1, -3});
  };
  const auto h = beam_search(never_eos, {3, 5, 1.0});
  EXPECT_EQ(h.front().tokens.size(), 5U);
  EXPECT_TRUE(h.front().finished);
  EXPECT_THROW(beam_search(never_eos, {0, 5, 1.0}), UsageError);
}

TEST(Translation, OverfitPerplexityDecreasesEarly) {
  const auto t = vtlm::testing::tiny_corpus(100);
  auto cfg = tiny_cfg(t.tok.vocab().size());
  cfg.d_model = 32;
  cfg.ffn = 64;
  auto model = MtModel<float>::scratch(cfg, MtTask::NMT, 6);
  auto params = model.joined();
  const auto ex = ptrs(t.examples, 100);
  Adam<float> adam;
  double prev = 1e30;
  for (int step = 0; step < 10; ++step) {
    ForwardContext<float> ctx;
    params.zero_grad();
    auto l = model.loss(ex, ctx);
    const double ppl = std::exp(l.nll_sum / static_cast<double>(l.tokens));
    EXPECT_LT(ppl, prev) << "step " << step;
    prev = ppl;
    l.loss.backward();
    adam.step(params, 1e-3);
  }
}

TEST(Translation, TranslateStripsEos) {
  const auto t = vtlm::testing::tiny_corpus(2);
  const auto model = MtModel<float>::scratch(tiny_cfg(t.tok.vocab().size()), MtTask::MMT, 7);
  const auto out = translate(model, t.examples[0], {2, 6, 1.0});
  EXPECT_LE(out.size(), 6U);
  for (TokenId id : out) EXPECT_NE(id, kEos);
}
