// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "dpp/boxgeo.hpp"
#include "dpp/rng.hpp"

using namespace dpp;

namespace {

Box random_box(Rng& rng) {
  const double x1 = rng.uniform(0.0, 0.9), y1 = rng.uniform(0.0, 0.9);
  return {x1, y1, rng.uniform(x1 + 0.01, 1.0), rng.uniform(y1 + 0.01, 1.0)};
}

Tensor random_cost(std::size_t m, std::size_t n, Rng& rng) {
  Tensor c({m, n});
  for (double& v : c.data) v = rng.uniform(-5.0, 5.0);
  return c;
}

// Exhaustive minimum over every injective assignment of the smaller side.
double brute_force_min(const Tensor& cost) {
  const std::size_t m = cost.rows(), n = cost.cols();
  const bool rows_small = m <= n;
  const std::size_t small = rows_small ? m : n, large = rows_small ? n : m;
  std::vector<int> perm(large);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < small; ++i)
      total += rows_small ? cost.at(i, perm[i]) : cost.at(perm[i], i);
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST(Iou, Examples) {
  const Box a{0.1, 0.2, 0.5, 0.6};
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, Box{0.6, 0.6, 0.9, 0.9}), 0.0);
  // [0,0,2,2] vs [1,1,3,3] scaled into the unit square by 1/4.
  EXPECT_NEAR(iou(Box{0, 0, 0.5, 0.5}, Box{0.25, 0.25, 0.75, 0.75}), 1.0 / 7.0, 1e-15);
  EXPECT_EQ(iou(Box{0.3, 0.3, 0.3, 0.3}, Box{0.3, 0.3, 0.3, 0.3}), 0.0);
}

TEST(Giou, Examples) {
  const Box a{0.1, 0.2, 0.5, 0.6};
  EXPECT_EQ(giou(a, a), 1.0);
  // [0,0,1,1] vs [2,0,3,1] scaled by 1/3: IoU 0, hull 3, union 2.
  EXPECT_NEAR(giou(Box{0, 0, 1.0 / 3, 1.0 / 3}, Box{2.0 / 3, 0, 1.0, 1.0 / 3}), -1.0 / 3.0, 1e-12);
}

TEST(Giou, NeverExceedsIouAndBothSymmetric) {
  Rng rng(101);
  for (int i = 0; i < 1000; ++i) {
    const Box a = random_box(rng), b = random_box(rng);
    EXPECT_LE(giou(a, b), iou(a, b) + 1e-15);
    EXPECT_GE(giou(a, b), -1.0);
    EXPECT_EQ(iou(a, b), iou(b, a));
    EXPECT_EQ(giou(a, b), giou(b, a));
    EXPECT_GE(iou(a, b), 0.0);
    EXPECT_LE(iou(a, b), 1.0);
  }
}

TEST(Iou, OneOnlyForEqualBoxes) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const Box a = random_box(rng);
    Box b = a;
    b.x_max = std::min(1.0, b.x_max + 1e-3);
    if (b.x_max == a.x_max) b.x_min -= 1e-3;
    EXPECT_LT(iou(a, b), 1.0);
  }
}

TEST(Hungarian, SingleCell) {
  const MatchResult r = hungarian(Tensor::matrix(1, 1, {2.5}));
  ASSERT_EQ(r.pairs.size(), 1u);
  EXPECT_EQ(r.pairs[0], std::make_pair(0, 0));
  EXPECT_EQ(r.total_cost, 2.5);
}

TEST(Hungarian, RecoversPermutation) {
  const std::vector<int> perm{3, 0, 4, 1, 2};
  Tensor c({5, 5}, 1.0);
  for (int i = 0; i < 5; ++i) c.at(i, perm[i]) = 0.0;
  const MatchResult r = hungarian(c);
  ASSERT_EQ(r.pairs.size(), 5u);
  for (auto [row, col] : r.pairs) EXPECT_EQ(col, perm[row]);
  EXPECT_EQ(r.total_cost, 0.0);
}

TEST(Hungarian, MatchesAllPermutationsFiveByFive) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor c = random_cost(5, 5, rng);
    const MatchResult r = hungarian(c);
    EXPECT_NEAR(r.total_cost, brute_force_min(c), 1e-9);
  }
}

TEST(Hungarian, MatchesBruteForceUpToSixBySix) {
  Rng rng(23);
  for (std::size_t m = 1; m <= 6; ++m) {
    for (std::size_t n = 1; n <= 6; ++n) {
      for (int trial = 0; trial < 4; ++trial) {
        const Tensor c = random_cost(m, n, rng);
        const MatchResult r = hungarian(c);
        SCOPED_TRACE(std::to_string(m) + "x" + std::to_string(n));
        EXPECT_EQ(r.pairs.size(), std::min(m, n));
        std::set<int> rows, cols;
        double total = 0.0;
        for (auto [row, col] : r.pairs) {
          EXPECT_TRUE(rows.insert(row).second);
          EXPECT_TRUE(cols.insert(col).second);
          total += c.at(row, col);
        }
        EXPECT_NEAR(r.total_cost, total, 1e-12);
        EXPECT_NEAR(r.total_cost, brute_force_min(c), 1e-9);
        EXPECT_EQ(r.unmatched_rows.size(), m - r.pairs.size());
        EXPECT_EQ(r.unmatched_cols.size(), n - r.pairs.size());
      }
    }
  }
}

TEST(Hungarian, RejectsNonFinite) {
  EXPECT_THROW(hungarian(Tensor::matrix(1, 2, {0.0, std::numeric_limits<double>::infinity()})), DomainError);
}

TEST(AveragePrecision, PerfectPredictions) {
  const std::vector<GroundTruth> truths{{{0.1, 0.1, 0.4, 0.4}, 0}, {{0.5, 0.5, 0.9, 0.8}, 1}};
  std::vector<Detection> preds;
  for (const auto& t : truths) preds.push_back({t.box, t.label, 1.0});
  const ApResult r = average_precision(preds, truths);
  ASSERT_EQ(r.ap.size(), 10u);
  for (double v : r.ap) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(r.mean, 1.0);
}

TEST(AveragePrecision, NoPredictionsAndNoTruths) {
  const std::vector<GroundTruth> truths{{{0.1, 0.1, 0.4, 0.4}, 0}};
  EXPECT_EQ(average_precision({}, truths).mean, 0.0);
  const std::vector<Detection> preds{{{0.1, 0.1, 0.4, 0.4}, 0, 0.9}};
  EXPECT_EQ(average_precision(preds, {}).mean, 0.0);
}

TEST(AveragePrecision, HandEnumeratedFixture) {
  // Ranked: TP (truth A), FP, TP (truth B). Precision 1, 1/2, 2/3 at recall
  // 1/2, 1/2, 1. Interpolated precision is 1 for the 51 recall levels
  // 0.00..0.50 and 2/3 for the 50 levels 0.51..1.00.
  const std::vector<GroundTruth> truths{{{0.0, 0.0, 0.2, 0.2}, 0}, {{0.6, 0.6, 0.9, 0.9}, 0}};
  const std::vector<Detection> preds{{{0.0, 0.0, 0.2, 0.2}, 0, 0.9},
                                     {{0.3, 0.0, 0.5, 0.2}, 0, 0.8},
                                     {{0.6, 0.6, 0.9, 0.9}, 0, 0.7}};
  const std::vector<double> thr{0.5};
  const ApResult r = average_precision(preds, truths, thr);
  EXPECT_NEAR(r.ap[0], (51.0 + 50.0 * 2.0 / 3.0) / 101.0, 1e-15);
}

TEST(AveragePrecision, InvariantToListOrder) {
  Rng rng(31);
  std::vector<GroundTruth> truths;
  for (int i = 0; i < 4; ++i) truths.push_back({random_box(rng), static_cast<int>(rng.below(2))});
  std::vector<Detection> preds;
  for (int i = 0; i < 9; ++i) preds.push_back({random_box(rng), static_cast<int>(rng.below(2)), rng.uniform()});
  preds.push_back({truths[0].box, truths[0].label, 0.5});
  preds.push_back({truths[1].box, truths[1].label, 0.5});
  const double base = average_precision(preds, truths).mean;
  for (int k = 0; k < 20; ++k) {
    for (std::size_t i = preds.size(); i > 1; --i) std::swap(preds[i - 1], preds[rng.below(i)]);
    EXPECT_EQ(average_precision(preds, truths).mean, base);
  }
}

TEST(AveragePrecision, RejectsScoresOutsideUnitInterval) {
  const std::vector<Detection> preds{{{0.1, 0.1, 0.2, 0.2}, 0, 1.5}};
  EXPECT_THROW(average_precision(preds, {}), DomainError);
}
