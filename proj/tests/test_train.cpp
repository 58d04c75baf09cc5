#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "test_util.hpp"
#include "vtlm/trainer.hpp"

using namespace vtlm;

namespace {

EncoderConfig tiny_cfg(int vocab) {
  EncoderConfig c;
  c.d_model = 16;
  c.ffn = 32;
  c.layers = 1;
  c.heads = 2;
  c.dropout = 0.1;
  c.vocab_size = vocab;
  c.feat_dim = 16;
  return c;
}

TrainConfig quick(long steps, long eval_interval) {
  auto c = TrainConfig::defaults(Phase::Pretrain);
  c.lr = 1e-3;
  c.batch_size = 8;
  c.max_steps = steps;
  c.eval_interval = eval_interval;
  c.log_interval = 1;
  c.seed = 3;
  return c;
}

std::string read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// Oracle values: tests/oracles/ops_oracle.py

TEST(Schedule, ScratchWarmupThenInverseSqrt) {
  const auto s = ScheduleConfig::defaults(Phase::Scratch);
  EXPECT_EQ(lr_at(4000, s), 1e-4);
  EXPECT_NEAR(lr_at(16000, s), 5e-5, 1e-12);
  EXPECT_NEAR(lr_at(2000, s), 5.005e-5, 1e-15);
  EXPECT_NEAR(lr_at(1, s), 1.24975e-07, 1e-18);
  EXPECT_NEAR(lr_at(4001, s), 9.998750234326183e-05, 1e-15);
  // Continuity at the warmup boundary: both sides approach 1e-4.
  EXPECT_NEAR(lr_at(4000, s) - lr_at(4001, s), 1.25e-8, 1e-10);
  EXPECT_THROW(lr_at(0, s), UsageError);
}

TEST(Schedule, PretrainAndFinetuneAreConstant) {
  EXPECT_EQ(lr_at(1, ScheduleConfig::defaults(Phase::Pretrain)), 1e-4);
  EXPECT_EQ(lr_at(100000, ScheduleConfig::defaults(Phase::Pretrain)), 1e-4);
  EXPECT_EQ(lr_at(7, ScheduleConfig::defaults(Phase::Finetune)), 1e-5);
  EXPECT_EQ(phase_from_string("scratch"), Phase::Scratch);
  EXPECT_THROW(phase_from_string("bogus"), ConfigError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamStore<double> ps;
  ps.add("w", Tensor<double>::full({1}, 1.0));
  ps.at("w").node()->ensure_grad()[0] = 2.0;
  Adam<double> adam(AdamConfig{0.9, 0.999, 1e-8, 0});
  ASSERT_TRUE(adam.step(ps, 0.1));
  EXPECT_NEAR(ps.at("w").at(0), 0.9000000005, 1e-12);
  EXPECT_EQ(adam.steps(), 1);
}

TEST(Adam, ClipsGlobalNormAndSkipsNonFinite) {
  ParamStore<double> ps;
  ps.add("a", Tensor<double>::zeros({2}));
  ps.at("a").node()->ensure_grad() = {30.0, 40.0};
  Adam<double> adam(AdamConfig{0.9, 0.999, 1e-8, 5.0});
  adam.step(ps, 0.1);
  EXPECT_DOUBLE_EQ(adam.last_grad_norm(), 50.0);
  EXPECT_EQ(adam.clipped(), 1);
  EXPECT_NEAR(adam.first_moments().at("a")[0], 0.1 * 3.0, 1e-12);  // clipped gradient is (3, 4)
  ps.at("a").node()->grad = {std::nan(""), 1.0};
  const auto before = ps.at("a").values();
  EXPECT_FALSE(adam.step(ps, 0.1));
  EXPECT_EQ(adam.skipped(), 1);
  EXPECT_EQ(ps.at("a").values(), before);
}

TEST(Adam, LeavesParametersWithoutGradientUntouched) {
  ParamStore<double> ps;
  ps.add("used", Tensor<double>::zeros({1}));
  ps.add("unused", Tensor<double>::full({1}, 3.0));
  ps.at("used").node()->ensure_grad()[0] = 1.0;
  Adam<double> adam;
  adam.step(ps, 0.1);
  EXPECT_EQ(ps.at("unused").at(0), 3.0);
  EXPECT_FALSE(adam.first_moments().count("unused"));
}

TEST(Checkpoint, BitwiseRoundTripWithOptimizer) {
  const auto dir = vtlm::testing::scratch_dir("ckpt");
  const auto t = vtlm::testing::tiny_corpus(4);
  auto model = VtlmModel<float>::create(tiny_cfg(t.tok.vocab().size()), Objective::VTLM, 1);
  Adam<float> adam;
  for (auto& [_, p] : model.params) {
    auto& g = p.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(i % 7) - 3.0F;
  }
  adam.step(model.params, 1e-3);
  Checkpoint ck;
  ck.header = {{"note", "x"}};
  add_params(ck, "param/", model.params);
  add_optimizer(ck, adam, model.params);
  save_checkpoint(dir + "/a.ckpt", ck);
  const auto back = load_checkpoint(dir + "/a.ckpt");
  EXPECT_TRUE(back == ck);
  EXPECT_TRUE(extract_params(back, "param/") == model.params);
  EXPECT_TRUE(extract_optimizer(back) == adam);
  save_checkpoint(dir + "/b.ckpt", back);
  EXPECT_EQ(read_all(dir + "/a.ckpt"), read_all(dir + "/b.ckpt"));
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto dir = vtlm::testing::scratch_dir("ckpt_bad");
  std::ofstream(dir + "/junk.ckpt") << "not a checkpoint at all";
  EXPECT_THROW(load_checkpoint(dir + "/junk.ckpt"), DataError);
  Checkpoint ck;
  ck.tensors.emplace_back("w", Tensor<float>::full({4}, 1.0F));
  save_checkpoint(dir + "/ok.ckpt", ck);
  const auto bytes = read_all(dir + "/ok.ckpt");
  std::ofstream(dir + "/short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  EXPECT_THROW(load_checkpoint(dir + "/short.ckpt"), DataError);
  std::ofstream(dir + "/long.ckpt", std::ios::binary) << bytes << "x";
  EXPECT_THROW(load_checkpoint(dir + "/long.ckpt"), DataError);
  EXPECT_THROW(extract_optimizer(ck), DataError);
  EXPECT_THROW(extract_params(ck, "param/"), DataError);
}

TEST(Trainer, EpochOrderIsAPermutationPerEpoch) {
  const auto a = detail::epoch_order(50, 1, 0);
  const auto b = detail::epoch_order(50, 1, 0);
  const auto c = detail::epoch_order(50, 1, 1);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Trainer, ResumeReproducesUninterruptedRun) {
  const auto t = vtlm::testing::tiny_corpus(40);
  const int vocab = t.tok.vocab().size();
  std::vector<TripletExample> train(t.examples.begin(), t.examples.begin() + 32);
  std::vector<TripletExample> valid(t.examples.begin() + 32, t.examples.end());
  const auto full_dir = vtlm::testing::scratch_dir("resume_full");
  const auto part_dir = vtlm::testing::scratch_dir("resume_part");

  auto m1 = VtlmModel<float>::create(tiny_cfg(vocab), Objective::VTLM, 2);
  PretrainTask task1(m1, train, valid, MaskPolicy{}, 3, 8);
  const auto full = vtlm::train(task1, quick(10, 5), {full_dir}, nlohmann::json::object());

  auto m2 = VtlmModel<float>::create(tiny_cfg(vocab), Objective::VTLM, 2);
  PretrainTask task2(m2, train, valid, MaskPolicy{}, 3, 8);
  vtlm::train(task2, quick(5, 5), {part_dir}, nlohmann::json::object());
  auto m3 = VtlmModel<float>::create(tiny_cfg(vocab), Objective::VTLM, 99);  // different init, overwritten on resume
  PretrainTask task3(m3, train, valid, MaskPolicy{}, 3, 8);
  const auto resumed = vtlm::train(task3, quick(10, 5), {part_dir}, nlohmann::json::object(), true);

  ASSERT_EQ(resumed.first_step, 6);
  ASSERT_EQ(resumed.losses.size(), 5U);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(resumed.losses[i], full.losses[5 + i]) << "step " << 6 + i;
  EXPECT_TRUE(m3.params == m1.params);
  EXPECT_EQ(read_all(full_dir + "/metrics.csv"), read_all(part_dir + "/metrics.csv"));
  EXPECT_TRUE(load_checkpoint(full_dir + "/last.ckpt") == load_checkpoint(part_dir + "/last.ckpt"));
}

TEST(Trainer, WritesMetricsAndSelectsBest) {
  const auto t = vtlm::testing::tiny_corpus(40);
  const int vocab = t.tok.vocab().size();
  std::vector<TripletExample> train(t.examples.begin(), t.examples.begin() + 32);
  std::vector<TripletExample> valid(t.examples.begin() + 32, t.examples.end());
  const auto dir = vtlm::testing::scratch_dir("metrics");
  auto m = VtlmModel<float>::create(tiny_cfg(vocab), Objective::VTLM, 2);
  PretrainTask task(m, train, valid, MaskPolicy{}, 3, 8);
  const auto r = vtlm::train(task, quick(6, 3), {dir}, {{"tag", "unit"}});
  EXPECT_EQ(r.steps, 6);
  EXPECT_GE(r.best_step, 3);
  std::istringstream csv(read_all(dir + "/metrics.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "step,phase,mlm_loss,mrc_loss,total,lr,val_acc,val_ppl");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 6);
  const auto best = load_checkpoint(dir + "/best.ckpt");
  EXPECT_EQ(best.header.at("tag"), "unit");
  EXPECT_EQ(best.header.at("model").at("kind"), "pretrain");
  EXPECT_EQ(best.header.at("train").at("step"), r.best_step);
  EXPECT_FALSE(best.header.contains("optimizer"));
  EXPECT_TRUE(load_checkpoint(dir + "/last.ckpt").header.contains("optimizer"));
  const auto loaded = load_pretrained(load_checkpoint(dir + "/last.ckpt"));
  EXPECT_TRUE(loaded.params == m.params);
  EXPECT_EQ(loaded.cfg, m.cfg);
}

TEST(Trainer, DivergenceRaises) {
  const auto t = vtlm::testing::tiny_corpus(20);
  const int vocab = t.tok.vocab().size();
  auto m = VtlmModel<float>::create(tiny_cfg(vocab), Objective::VTLM, 2);
  m.params.at("mlm_head.bias").at(7) = std::numeric_limits<float>::infinity();
  std::vector<TripletExample> train(t.examples.begin(), t.examples.begin() + 16);
  PretrainTask task(m, train, train, MaskPolicy{}, 3, 8);
  EXPECT_THROW(vtlm::train(task, quick(2, 2), {vtlm::testing::scratch_dir("diverge")}, nlohmann::json::object()), DivergenceError);
}

TEST(Trainer, ConfigValidation) {
  auto c = quick(5, 5);
  c.lr = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = quick(5, 5);
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(TrainConfig::defaults(Phase::Scratch).dropout, 0.4);
  EXPECT_EQ(TrainConfig::defaults(Phase::Finetune).lr, 1e-5);
}

TEST(Trainer, TranslationCheckpointRoundTrip) {
  const auto t = vtlm::testing::tiny_corpus(40);
  const int vocab = t.tok.vocab().size();
  std::vector<TripletExample> train(t.examples.begin(), t.examples.begin() + 32);
  std::vector<TripletExample> valid(t.examples.begin() + 32, t.examples.end());
  auto model = MtModel<float>::scratch(tiny_cfg(vocab), MtTask::MMT, 4);
  TranslationTask task(model, train, valid, 8);
  auto cfg = quick(4, 2);
  cfg.phase = Phase::Scratch;
  cfg.warmup_steps = 2;
  const auto dir = vtlm::testing::scratch_dir("mt_ckpt");
  const auto r = vtlm::train(task, cfg, {dir}, nlohmann::json::object());
  EXPECT_TRUE(std::isfinite(r.last.ppl));
  const auto back = load_translation(load_checkpoint(dir + "/last.ckpt"));
  EXPECT_EQ(back.task, MtTask::MMT);
  EXPECT_TRUE(back.enc == model.enc);
  EXPECT_TRUE(back.dec == model.dec);
}
