#include <gtest/gtest.h>

#include "test_util.hpp"
#include "vtlm/ops.hpp"

using namespace vtlm;
using vtlm::testing::max_grad_error;
using vtlm::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;

/// Fixed random weights so gradient checks see non-degenerate upstream
/// signals instead of the all-ones gradient of sum().
Tensor<double> weighted_sum(const Tensor<double>& y, std::uint64_t seed = 99) {
  auto w = random_tensor(y.shape(), seed);
  w.set_requires_grad(false);
  return sum(mul(y, w));
}

}  // namespace

// Oracle values: tests/oracles/ops_oracle.py

TEST(Ops, SoftmaxMatchesOracle) {
  Tensor<double> x({3}, {1.0, 2.0, 3.0});
  const auto p = softmax(x);
  EXPECT_NEAR(p.at(0), 0.09003057, 1e-8);
  EXPECT_NEAR(p.at(1), 0.24472847, 1e-8);
  EXPECT_NEAR(p.at(2), 0.66524096, 1e-8);
}

TEST(Ops, SoftmaxIsShiftInvariantForLargeInputs) {
  Tensor<float> x({3}, {1001.0F, 1002.0F, 1003.0F});
  const auto p = softmax(x);
  EXPECT_NEAR(p.at(2), 0.66524096, 1e-6);
}

TEST(Ops, CrossEntropyMatchesOracle) {
  Tensor<double> logits({1, 3}, {1.0, 2.0, 3.0});
  const std::vector<Index> t{2};
  EXPECT_NEAR(cross_entropy(logits, t).item(), 0.40760596444438046, 1e-12);
}

TEST(Ops, CrossEntropyValidatesTargets) {
  Tensor<double> logits({2, 3}, std::vector<double>(6, 0.0));
  const std::vector<Index> bad{0, 3};
  const std::vector<Index> short_list{0};
  EXPECT_THROW(cross_entropy(logits, bad), IndexError);
  EXPECT_THROW(cross_entropy(logits, short_list), ShapeError);
}

TEST(Ops, LayerNormMatchesOracle) {
  Tensor<double> x({1, 3}, {1.0, 2.0, 3.0});
  const auto y = layer_norm(x, Tensor<double>::full({3}, 1.0), Tensor<double>::zeros({3}));
  EXPECT_NEAR(y.at(0), -1.22473569, 1e-7);
  EXPECT_NEAR(y.at(1), 0.0, 1e-12);
  EXPECT_NEAR(y.at(2), 1.22473569, 1e-7);
}

TEST(Ops, GeluMatchesOracle) {
  Tensor<double> x({3}, {-1.0, 0.0, 0.5});
  const auto y = gelu(x);
  EXPECT_NEAR(y.at(0), -0.15865525, 1e-8);
  EXPECT_NEAR(y.at(1), 0.0, 1e-12);
  EXPECT_NEAR(y.at(2), 0.34573123, 1e-8);
}

TEST(Ops, MatmulShapesAndValues) {
  Tensor<double> a({2, 2}, {1, 2, 3, 4});
  Tensor<double> b({2, 2}, {5, 6, 7, 8});
  const auto c = matmul(a, b);
  EXPECT_EQ(c.values(), (std::vector<double>{19, 22, 43, 50}));
  const auto d = matmul_bt(a, b);
  EXPECT_EQ(d.values(), (std::vector<double>{17, 23, 39, 53}));
  EXPECT_THROW(matmul(a, Tensor<double>::zeros({3, 2})), ShapeError);
}

TEST(Ops, GatherRowsNegativeIndexGivesZeros) {
  Tensor<double> t({2, 2}, {1, 2, 3, 4});
  const std::vector<Index> idx{1, -1, 0};
  const auto g = gather_rows(t, idx);
  EXPECT_EQ(g.values(), (std::vector<double>{3, 4, 0, 0, 1, 2}));
}

TEST(OpsGrad, Elementwise) {
  auto a = random_tensor({3, 4}, 1);
  auto b = random_tensor({3, 4}, 2);
  EXPECT_LT(max_grad_error([&] { return weighted_sum(add(mul(a, b), sub(a, scale(b, 0.5)))); }, {a, b}), kGradTol);
}

TEST(OpsGrad, MatmulVariants) {
  auto a = random_tensor({3, 4}, 3);
  auto b = random_tensor({4, 5}, 4);
  auto c = random_tensor({5, 4}, 5);
  EXPECT_LT(max_grad_error([&] { return weighted_sum(matmul(a, b)); }, {a, b}), kGradTol);
  EXPECT_LT(max_grad_error([&] { return weighted_sum(matmul_bt(a, c)); }, {a, c}), kGradTol);
}

TEST(OpsGrad, LinearAndBias) {
  auto x = random_tensor({4, 3}, 6);
  auto w = random_tensor({3, 5}, 7);
  auto b = random_tensor({5}, 8);
  EXPECT_LT(max_grad_error([&] { return weighted_sum(linear(x, w, b)); }, {x, w, b}), kGradTol);
  EXPECT_LT(max_grad_error([&] { return weighted_sum(add_bias(x, random_tensor({3}, 9))); }, {x}), kGradTol);
}

TEST(OpsGrad, Gelu) {
  auto x = random_tensor({4, 6}, 9);
  EXPECT_LT(max_grad_error([&] { return weighted_sum(gelu(x)); }, {x}), kGradTol);
}

TEST(OpsGrad, LayerNorm) {
  auto x = random_tensor({3, 6}, 10);
  auto g = random_tensor({6}, 11);
  auto b = random_tensor({6}, 12);
  EXPECT_LT(max_grad_error([&] { return weighted_sum(layer_norm(x, g, b)); }, {x, g, b}), kGradTol);
}

TEST(OpsGrad, SoftmaxBothAxes) {
  auto x = random_tensor({3, 4}, 13);
  EXPECT_LT(max_grad_error([&] { return weighted_sum(softmax(x, -1)); }, {x}), kGradTol);
  EXPECT_LT(max_grad_error([&] { return weighted_sum(softmax(x, 0)); }, {x}), kGradTol);
}

TEST(OpsGrad, CrossEntropy) {
  auto x = random_tensor({4, 7}, 14);
  const std::vector<Index> t{0, 6, 3, 3};
  EXPECT_LT(max_grad_error([&] { return cross_entropy(x, t); }, {x}), kGradTol);
}

TEST(OpsGrad, GatherConcatReshapeMean) {
  auto t = random_tensor({5, 3}, 15);
  auto u = random_tensor({2, 3}, 16);
  const std::vector<Index> idx{4, 0, 4, -1, 2};
  EXPECT_LT(max_grad_error([&] { return weighted_sum(gather_rows(t, idx)); }, {t}), kGradTol);
  EXPECT_LT(max_grad_error([&] { return weighted_sum(reshape(concat_rows<double>({t, u}), {3, 7})); }, {t, u}), kGradTol);
  EXPECT_LT(max_grad_error([&] { return mean(mul(t, t)); }, {t}), kGradTol);
}

TEST(OpsGrad, AttentionWithMasks) {
  AttentionSpec spec;
  spec.batch = 2;
  spec.q_len = 3;
  spec.k_len = 4;
  spec.heads = 2;
  spec.key_mask = {0, 0, 0, 1, 0, 0, 1, 1};
  auto q = random_tensor({6, 4}, 17);
  auto k = random_tensor({8, 4}, 18);
  auto v = random_tensor({8, 4}, 19);
  EXPECT_LT(max_grad_error([&] { return weighted_sum(attention(q, k, v, spec)); }, {q, k, v}), kGradTol);
  AttentionSpec causal;
  causal.batch = 1;
  causal.q_len = 4;
  causal.k_len = 4;
  causal.heads = 2;
  causal.causal = true;
  auto x = random_tensor({4, 4}, 20);
  EXPECT_LT(max_grad_error([&] { return weighted_sum(attention(x, x, x, causal)); }, {x}), kGradTol);
}

TEST(Ops, AttentionRespectsMasks) {
  AttentionSpec spec;
  spec.batch = 1;
  spec.q_len = 3;
  spec.k_len = 3;
  spec.heads = 1;
  spec.causal = true;
  spec.key_mask = {0, 0, 1};
  auto q = random_tensor({3, 2}, 21);
  std::vector<double> probs;
  (void)attention(q, q, q, spec, &probs);
  // row 0 only sees key 0; key 2 is masked everywhere
  EXPECT_DOUBLE_EQ(probs[0], 1.0);
  EXPECT_DOUBLE_EQ(probs[1], 0.0);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(probs[static_cast<std::size_t>(i * 3 + 2)], 0.0);
  EXPECT_NEAR(probs[3] + probs[4], 1.0, 1e-12);
}

TEST(Ops, AttentionFullyMaskedRowIsZero) {
  AttentionSpec spec;
  spec.batch = 1;
  spec.q_len = 1;
  spec.k_len = 2;
  spec.key_mask = {1, 1};
  auto q = random_tensor({1, 2}, 22);
  auto kv = random_tensor({2, 2}, 23);
  const auto out = attention(q, kv, kv, spec);
  EXPECT_EQ(out.values(), (std::vector<double>{0.0, 0.0}));
}

TEST(Ops, DropoutStatistics) {
  Pcg32 rng = Pcg32::for_consumer(1, "dropout");
  const auto x = Tensor<double>::full({100000}, 1.0);
  const auto y = dropout(x, 0.1, rng, true);
  double zeros = 0;
  double total = 0;
  for (double v : y.values()) {
    zeros += v == 0.0 ? 1 : 0;
    total += v;
    if (v != 0.0) EXPECT_NEAR(v, 1.0 / 0.9, 1e-12);
  }
  EXPECT_NEAR(zeros / 100000, 0.1, 0.005);
  EXPECT_NEAR(total / 100000, 1.0, 0.01);
}

TEST(Ops, DropoutIsIdentityWhenEvaluating) {
  Pcg32 rng(1, 1);
  const auto x = random_tensor({4, 4}, 24);
  EXPECT_EQ(dropout(x, 0.5, rng, false).values(), x.values());
  EXPECT_EQ(dropout(x, 0.0, rng, true).values(), x.values());
  EXPECT_THROW(dropout(x, 1.0, rng, true), UsageError);
}

TEST(OpsGrad, DropoutUsesSameMask) {
  auto x = random_tensor({5, 5}, 25);
  // Rebuilding the op with a copy of the stream reproduces the mask.
  const Pcg32 start(7, 7);
  EXPECT_LT(max_grad_error(
                [&] {
                  Pcg32 rng = start;
                  return weighted_sum(dropout(x, 0.3, rng, true));
                },
                {x}),
            kGradTol);
}

TEST(Ops, ArgmaxPrefersLowestIndexOnTies) {
  Tensor<float> x({2, 3}, {1, 3, 3, 0, 0, 0});
  EXPECT_EQ(argmax_rows(x), (std::vector<Index>{1, 0}));
}
