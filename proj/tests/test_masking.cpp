#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "imask/errors.hpp"
#include "imask/evaluation.hpp"
#include "imask/masking.hpp"
#include "imask/optim.hpp"
#include "oracles.hpp"

using namespace imask;

namespace {

// Every (side, k) combination the tests and defaults use.
std::vector<ActionSpace> configured_spaces() {
  std::vector<ActionSpace> out;
  for (std::size_t side : {8, 16, 32, 64})
    for (std::size_t k : {1, 2, 3, 4, 5}) out.push_back(ActionSpace::with_default_patch(side, k));
  out.emplace_back(32, 2, 16);
  out.emplace_back(32, 3, 16);
  out.emplace_back(32, 3, 12);
  return out;
}

}  // namespace

TEST(ActionSpace, CornerAndCenterAnchors) {
  const ActionSpace two(32, 2, 16);
  BinaryMask m = action_to_mask(two, 0);
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 32; ++c) EXPECT_EQ(m.at(r, c), r < 16 && c < 16);
  const ActionSpace three(32, 3, 16);
  EXPECT_EQ(three.anchor(4).row, 8u);
  EXPECT_EQ(three.anchor(4).col, 8u);
  EXPECT_EQ(three.size(), 9u);
}

TEST(ActionSpace, DefaultPatchSide) {
  EXPECT_EQ(ActionSpace::default_patch_side(32, 3), 16u);  // ceil(64 / 4)
  EXPECT_EQ(ActionSpace::default_patch_side(32, 4), 13u);  // ceil(64 / 5)
  EXPECT_EQ(ActionSpace::default_patch_side(32, 1), 32u);
}

TEST(ActionSpace, RejectsBadConfigurations) {
  EXPECT_THROW(ActionSpace(32, 0, 16), std::invalid_argument);
  EXPECT_THROW(ActionSpace(32, 3, 40), std::invalid_argument);
  EXPECT_THROW(ActionSpace(32, 2, 8), std::invalid_argument);  // leaves a gap
  EXPECT_THROW(ActionSpace(32, 3, 16).anchor(9), std::out_of_range);
}

TEST(MaskContract, EverySquareIsInsideAndTheGridCoversTheImage) {
  for (const ActionSpace& s : configured_spaces()) {
    const std::size_t side = s.image_side(), p = s.patch_side();
    std::vector<int> covered(side * side, 0);
    for (std::size_t a = 0; a < s.size(); ++a) {
      const BinaryMask m = action_to_mask(s, a);
      ASSERT_EQ(m.count(), p * p);
      const Anchor an = s.anchor(a);
      ASSERT_LE(an.row + p, side);
      ASSERT_LE(an.col + p, side);
      for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c) {
          const bool inside = r >= an.row && r < an.row + p && c >= an.col && c < an.col + p;
          ASSERT_EQ(m.at(r, c), inside);
          covered[r * side + c] += m.at(r, c);
        }
    }
    for (int c : covered) ASSERT_GT(c, 0) << "side " << side << " k " << s.k();
  }
}

TEST(ApplyMask, FillSupportAndIdentity) {
  Rng rng(1);
  Tensor x = oracle::random_tensor({2, 1, 8, 8}, rng, 0.1, 1.0);
  const Tensor orig = x.clone();
  const ActionSpace s(8, 1, 8);
  Tensor z = apply_mask(x, action_to_mask(s, 0), 0.0);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
  BinaryMask empty{8, std::vector<std::uint8_t>(64, 0)};
  Tensor same = apply_mask(x, empty, 0.0);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(same[i], x[i]);
  const ActionSpace three = ActionSpace::with_default_patch(8, 3);
  const BinaryMask m = action_to_mask(three, 5);
  Tensor y = apply_mask(x, m, 0.0);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 64; ++p) EXPECT_EQ(y[n * 64 + p] != x[n * 64 + p], m.bits[p] == 1);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x[i], orig[i]);
  EXPECT_THROW(apply_mask(Tensor(Shape{1, 1, 4, 4}), m, 0.0), DimensionError);
}

TEST(PredictionLoss, HandExampleAndMaskedSupport) {
  Tensor x(Shape{1, 1, 2, 2}, std::vector<double>{1, 3, 5, 7});
  Tensor xh(Shape{1, 1, 2, 2}, 0.0);
  BinaryMask top{2, {1, 1, 0, 0}};
  EXPECT_DOUBLE_EQ(prediction_loss(xh, x, top), 5.0);
  EXPECT_EQ(prediction_loss(x, x, top), 0.0);
  EXPECT_THROW(prediction_loss(xh, x, BinaryMask{2, {0, 0, 0, 0}}), std::invalid_argument);
}

TEST(PredictionLoss, InvariantToOffMaskPerturbations) {
  Rng rng(2);
  for (const ActionSpace& s : configured_spaces()) {
    if (s.image_side() > 32) continue;
    const std::size_t side = s.image_side();
    Tensor x = oracle::random_tensor({1, 1, side, side}, rng);
    Tensor xh = oracle::random_tensor({1, 1, side, side}, rng);
    for (std::size_t a = 0; a < s.size(); ++a) {
      const BinaryMask m = action_to_mask(s, a);
      const double base = prediction_loss(xh, x, m);
      Tensor xh2 = xh.clone();
      for (std::size_t p = 0; p < side * side; ++p)
        if (!m.bits[p]) xh2[p] += oracle::random_tensor({1}, rng)[0] * 10.0;
      ASSERT_EQ(prediction_loss(xh2, x, m), base);
    }
  }
}

TEST(SelectAction, GreedyArgmaxTiesAndInvariances) {
  Rng rng(3);
  const std::vector<double> s{1, 5, 3, 2};
  EXPECT_EQ(select_action(s, ActionSelection::greedy(), rng), 1u);
  EXPECT_EQ(select_action(std::vector<double>{2, 7, 7}, ActionSelection::greedy(), rng), 1u);
  std::vector<double> shifted, cubed;
  for (double v : s) {
    shifted.push_back(v - 100.0);
    cubed.push_back(std::exp(v) * v * v * v);  // strictly increasing for v > 0
  }
  EXPECT_EQ(select_action(shifted, ActionSelection::greedy(), rng), 1u);
  EXPECT_EQ(select_action(cubed, ActionSelection::greedy(), rng), 1u);
  EXPECT_THROW(select_action(std::vector<double>{1, std::nan("")}, ActionSelection::greedy(), rng),
               std::invalid_argument);
  EXPECT_THROW(select_action(s, ActionSelection::softmax(0.0), rng), std::invalid_argument);
}

TEST(SelectAction, SoftmaxOnEqualScoresIsUniform) {
  Rng rng(4);
  const std::vector<double> s(9, 0.25);
  std::vector<std::size_t> counts(9, 0);
  for (int i = 0; i < 100000; ++i) ++counts[select_action(s, ActionSelection::softmax(1.0), rng)];
  EXPECT_GT(chi_square_uniform_p(counts), 0.01);
}

TEST(SelectAction, SoftmaxMatchesItsDistribution) {
  Rng rng(5);
  const std::vector<double> s{0.0, 1.0, 2.0, -1.0};
  const auto p = action_probabilities(s, 0.7);
  double z = 0;
  for (double v : s) z += std::exp(v / 0.7);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(p[i], std::exp(s[i] / 0.7) / z, 1e-15);
  std::vector<std::size_t> counts(4, 0);
  for (int i = 0; i < 50000; ++i) ++counts[select_action(s, ActionSelection::softmax(0.7), rng)];
  EXPECT_GT(chi_square_gof_p(counts, p), 0.01);
  const auto u = action_probabilities(s, std::numeric_limits<double>::infinity());
  for (double v : u) EXPECT_EQ(v, 0.25);
}

TEST(MaskingLoss, ClosedForm) {
  EXPECT_EQ(masking_loss(0.5, 0.5), 0.0);
  EXPECT_NEAR(masking_loss(0.2, 0.5), 0.09, 1e-15);
  EXPECT_THROW(masking_loss(std::nan(""), 0.1), std::invalid_argument);
}

TEST(MaskingObjective, BatchMeanOfHalfSquaredErrors) {
  Tensor q(Shape{3, 4}, std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2});
  q.set_requires_grad(true);
  const EpisodeBatch eps{{0, 2, 0.5}, {1, 0, 0.0}, {2, 3, 1.0}};
  Tape tape;
  Tensor obj = masking_objective(tape, q, eps, 1.0);
  const double hand = (masking_loss(0.3, 0.5) + masking_loss(0.5, 0.0) + masking_loss(1.2, 1.0)) / 3.0;
  EXPECT_NEAR(obj.item(), hand, 1e-15);
  Tape tape2;
  EXPECT_NEAR(masking_objective(tape2, q, eps).item(), 0.5 * hand, 1e-15);
  EXPECT_THROW(masking_objective(tape2, q, EpisodeBatch{{0, 0, -1.0}}), std::invalid_argument);
}

TEST(MaskingObjective, OneStepOnTabularQIsTheBellmanUpdate) {
  // Tabular Q: one parameter per (state, action). A plain gradient step of
  // size alpha on the half-scaled loss of a single episode gives Q + alpha (R - Q).
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor table = oracle::random_param({1, 9}, rng, -1.0, 1.0);
    const std::size_t a = static_cast<std::size_t>(trial) % 9;
    const double reward = std::abs(oracle::random_tensor({1}, rng)[0]);
    const double alpha = 0.05 + 0.01 * trial;
    const double before = table[a];
    std::vector<Tensor> params{table};
    zero_grads(params);
    Tape tape;
    tape.backward(masking_objective(tape, table, EpisodeBatch{{0, a, reward}}));
    sgd_step(params, alpha);
    EXPECT_NEAR(table[a], before + alpha * (reward - before), 1e-12);
  }
}
