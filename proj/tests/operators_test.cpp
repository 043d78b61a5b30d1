// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "dpp/operators.hpp"
#include "gradient_suite.hpp"

using namespace dpp;
using gradcheck::random_tensor;

namespace {

// Counted FLOPs for one proposal through an operator and, for G0/G1, the
// prediction heads.
std::uint64_t runtime_flops(OperatorKind k, const OperatorParams& p, const ModelDims& dims, Rng& rng) {
  Tape t(false);
  Var z = t.constant(random_tensor({1, dims.d}, rng));
  Var prev = t.constant(random_tensor({1, 4}, rng));
  const std::uint64_t before = t.flops();
  Var out = apply_operator(t, k, z, p, dims);
  if (k != OperatorKind::G2) predict(t, out, prev, p.heads);
  return t.flops() - before;
}

Tensor normalized_row(std::size_t d, Rng& rng) {
  Tensor x = random_tensor({1, d}, rng);
  double mean = 0.0, var = 0.0;
  for (double v : x.data) mean += v / d;
  for (double v : x.data) var += (v - mean) * (v - mean) / d;
  for (double& v : x.data) v = (v - mean) / std::sqrt(var);
  return x;
}

}  // namespace

TEST(Operators, G2IsBitIdenticalAndFree) {
  Rng rng(1);
  const ModelDims dims;
  OperatorParams p(dims, rng);
  for (int i = 0; i < 20; ++i) {
    const Tensor e = random_tensor({dims.d}, rng, -100.0, 100.0);
    EXPECT_EQ(apply_operator(OperatorKind::G2, e, p, dims).data, e.data);
  }
  EXPECT_EQ(runtime_flops(OperatorKind::G2, p, dims, rng), 0u);
  EXPECT_EQ(derive_cost_model(dims).c_g2, 0.0);
}

TEST(Operators, G1WithZeroFfnPassesNormalizedInputThrough) {
  Rng rng(2);
  const ModelDims dims;
  OperatorParams p(dims, rng);
  for (Parameter* q : {&p.g1.ffn.up.w, &p.g1.ffn.up.b, &p.g1.ffn.down.w, &p.g1.ffn.down.b})
    std::fill(q->value.data.begin(), q->value.data.end(), 0.0);
  const Tensor e = normalized_row(dims.d, rng);
  const Tensor out = apply_operator(OperatorKind::G1, e, p, dims);
  for (std::size_t i = 0; i < dims.d; ++i) EXPECT_NEAR(out.data[i], e.data[i], 1e-5);
}

TEST(Operators, G0ParametersDependOnTheEmbedding) {
  Rng rng(3);
  const ModelDims dims;
  OperatorParams p(dims, rng);
  for (int i = 0; i < 10; ++i) {
    const Tensor a = random_tensor({1, dims.d}, rng);
    const Tensor b = random_tensor({1, dims.d}, rng);
    Tape t(false);
    Var ga = p.g0.generator(t, t.constant(a));
    Var gb = p.g0.generator(t, t.constant(b));
    EXPECT_NE(ga.value().data, gb.value().data);
    EXPECT_NE(apply_operator(OperatorKind::G0, a, p, dims).data, apply_operator(OperatorKind::G0, b, p, dims).data);
  }
}

TEST(Operators, ShapeMismatchIsDimensionError) {
  Rng rng(4);
  const ModelDims dims;
  OperatorParams p(dims, rng);
  EXPECT_THROW(apply_operator(OperatorKind::G0, Tensor({dims.d + 1}), p, dims), DimensionError);
  ModelDims bad;
  bad.d = 1;
  EXPECT_THROW(derive_cost_model(bad), ConfigError);
}

TEST(Attention, SingleProposalIsResidualOfValueProjection) {
  Rng rng(5);
  const ModelDims dims;
  OperatorParams p(dims, rng);
  const Tensor x = random_tensor({1, dims.d}, rng);
  Tape t(false);
  Var xv = t.constant(x);
  AttentionOutput a = pairwise_attend(t, xv, p.attention);
  Var expected = add(xv, p.attention.o(t, p.attention.v(t, xv)));
  EXPECT_EQ(a.weights.item(), 1.0);
  EXPECT_EQ(a.out.value().data, expected.value().data);
}

TEST(Attention, IdenticalProposalsGetIdenticalOutputs) {
  Rng rng(6);
  const ModelDims dims;
  OperatorParams p(dims, rng);
  const Tensor row = random_tensor({1, dims.d}, rng);
  Tensor x({2, dims.d});
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < dims.d; ++c) x.at(r, c) = row.data[c];
  Tape t(false);
  const Tensor out = pairwise_attend(t, t.constant(x), p.attention).out.value();
  for (std::size_t c = 0; c < dims.d; ++c) EXPECT_EQ(out.at(0, c), out.at(1, c));
}

TEST(Attention, WeightsRowsSumToOneAndPermutationEquivariant) {
  Rng rng(7);
  const ModelDims dims;
  OperatorParams p(dims, rng);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 2 + rng.below(7);
    const Tensor x = random_tensor({n, dims.d}, rng);
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    Tensor xp({n, dims.d});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < dims.d; ++c) xp.at(r, c) = x.at(perm[r], c);

    Tape t(false);
    AttentionOutput a = pairwise_attend(t, t.constant(x), p.attention);
    AttentionOutput b = pairwise_attend(t, t.constant(xp), p.attention);
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < n; ++c) s += a.weights.value().at(r, c);
      EXPECT_NEAR(s, 1.0, 1e-12);
      for (std::size_t c = 0; c < dims.d; ++c)
        EXPECT_NEAR(b.out.value().at(r, c), a.out.value().at(perm[r], c), 1e-12);
    }
  }
}

TEST(CostModel, MatmulRule) {
  EXPECT_EQ(flops_of(LayerShape{LayerKind::Matmul, 1, 32, 64}), 4096.0);
}

TEST(CostModel, DefaultConstantsByHand) {
  // d=32, d_h=16, d_ff=64, 8 classes (+1), d_s=8.
  const double generator = 2 * 32 * 1024 + 1024;
  const double dynamic = 2 * 32 * 16 + 16 + 2 * 16 * 32 + 32 + 7 * 32;
  const double ffn_block = (2 * 32 * 64 + 64) + 64 + (2 * 64 * 32 + 32) + 32 + 7 * 32;
  const double heads = (2 * 32 * 9 + 9) + (2 * 32 * 4 + 4) + 4 + 4;
  const double selector = (2 * 32 * 8 + 8) + 8 + (2 * 8 * 8 + 8) + 8 + (2 * 8 * 3 + 3) + 5 * 3;
  const CostModel cm = derive_cost_model(ModelDims{});
  EXPECT_EQ(cm.c_g0, generator + dynamic + ffn_block + heads);
  EXPECT_EQ(cm.c_g0, 78341.0);
  EXPECT_EQ(cm.c_g1, ffn_block + heads);
  EXPECT_EQ(cm.c_selector, selector);
  EXPECT_LT(cm.c_selector, 0.02 * cm.c_g0);
}

TEST(CostModel, OrderingHoldsAcrossDims) {
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    ModelDims d;
    d.d = 2 + rng.below(64);
    d.d_h = 1 + rng.below(32);
    d.d_ff = 1 + rng.below(128);
    d.num_classes = 1 + rng.below(20);
    d.d_s = 1 + rng.below(16);
    const CostModel cm = derive_cost_model(d);
    EXPECT_GT(cm.c_g0, cm.c_g1);
    EXPECT_GT(cm.c_g1, cm.c_g2);
    EXPECT_EQ(cm.c_g2, 0.0);
  }
}

TEST(CostModel, AnalyticEqualsRuntimeCount) {
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    ModelDims d;
    d.d = 2 + rng.below(40);
    d.d_h = 1 + rng.below(12);
    d.d_ff = 1 + rng.below(50);
    d.num_classes = 1 + rng.below(10);
    d.d_s = 1 + rng.below(10);
    OperatorParams p(d, rng);
    SelectorParams s(d, rng);
    const CostModel cm = derive_cost_model(d);
    for (OperatorKind k : kOperators)
      EXPECT_EQ(static_cast<double>(runtime_flops(k, p, d, rng)), cm.of(k));
    Tape t(false);
    route_batch(t, t.constant(random_tensor({1, d.d}, rng)), s, SelectMode::Inference, 1.0);
    EXPECT_EQ(static_cast<double>(t.flops()), cm.c_selector);
  }
}

TEST(CostModel, AttentionSplitsIntoProposalAndPairTerms) {
  Rng rng(10);
  const ModelDims dims;
  OperatorParams p(dims, rng);
  const CostModel cm = derive_cost_model(dims);
  for (std::size_t n : {1u, 2u, 5u, 24u}) {
    Tape t(false);
    pairwise_attend(t, t.constant(random_tensor({n, dims.d}, rng)), p.attention);
    EXPECT_EQ(static_cast<double>(t.flops()), n * cm.c_attn + n * (n - 1) / 2.0 * cm.c_pair);
  }
}
