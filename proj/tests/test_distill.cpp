#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ambokd/distill.hpp"

using namespace ambokd;

namespace {

double ce(const Tensor& logits, std::vector<std::uint32_t> labels) {
  Tape t;
  return cross_entropy(t.constant(logits), labels).value()[0];
}

double kd(const Tensor& s, const Tensor& teacher, double tau) {
  Tape t;
  return kd_loss(t.constant(s), teacher, tau).value()[0];
}

Tensor random_logits(std::mt19937_64& rng, std::size_t n, std::size_t m, double scale) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor t({n, m});
  for (double& v : t.data()) v = d(rng);
  return t;
}

}  // namespace

TEST(CrossEntropy, HandValues) {
  EXPECT_NEAR(ce(Tensor::matrix(1, 2, {0, 0}), {0}), std::log(2.0), 1e-6);
  EXPECT_NEAR(ce(Tensor::matrix(1, 2, {0, 0}), {1}), std::log(2.0), 1e-6);
  EXPECT_LE(ce(Tensor::matrix(1, 2, {30, -30}), {0}), 1e-10);
  EXPECT_NEAR(ce(Tensor::matrix(1, 2, {1, 0}), {0}), 0.3133, 1e-4);
}

TEST(CrossEntropy, LabelOutOfRangeIsDataError) {
  Tape t;
  std::vector<std::uint32_t> labels{2};
  EXPECT_THROW(cross_entropy(t.constant(Tensor::matrix(1, 2, {0, 0})), labels), data_error);
  std::vector<std::uint32_t> short_labels;
  EXPECT_THROW(cross_entropy(t.constant(Tensor::matrix(1, 2, {0, 0})), short_labels),
               std::invalid_argument);
}

TEST(CrossEntropy, MatchesValueOnlyForm) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    const Tensor l = random_logits(rng, 5, 4, 3.0);
    std::vector<std::uint32_t> y{0, 1, 2, 3, 1};
    EXPECT_NEAR(ce(l, y), cross_entropy_value(l, y), 1e-12);
  }
}

TEST(KdLoss, IdenticalLogitsGiveZero) {
  std::mt19937_64 rng(4);
  const Tensor l = random_logits(rng, 3, 5, 2.0);
  EXPECT_LE(std::abs(kd(l, l, 4.0)), 1e-12);
}

TEST(KdLoss, UniformDistributionsGiveZero) {
  EXPECT_LE(kd(Tensor::matrix(1, 3, {2, 2, 2}), Tensor::matrix(1, 3, {-5, -5, -5}), 4.0), 1e-12);
}

TEST(KdLoss, HandValue) {
  // Teacher probabilities [0.75, 0.25] are logits [ln 3, 0].
  const double expected = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
  EXPECT_NEAR(kd(Tensor::matrix(1, 2, {0, 0}), Tensor::matrix(1, 2, {std::log(3.0), 0}), 1.0),
              expected, 1e-12);
  EXPECT_NEAR(expected, 0.1308, 1e-4);
}

TEST(KdLoss, ShapeMismatchAndTemperatureRejected) {
  Tape t;
  Var s = t.constant(Tensor({2, 3}));
  EXPECT_THROW(kd_loss(s, Tensor({2, 2}), 4.0), dimension_error);
  EXPECT_THROW(kd_loss(s, Tensor({2, 3}), 0.0), parameter_error);
}

TEST(KdLoss, NonnegativeAndTeacherShiftInvariant) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 500; ++i) {
    const Tensor s = random_logits(rng, 4, 3, 4.0);
    Tensor t = random_logits(rng, 4, 3, 4.0);
    const double base = kd(s, t, 4.0);
    EXPECT_GE(base, 0.0);
    for (double& v : t.data()) v += 17.5;
    EXPECT_NEAR(kd(s, t, 4.0), base, 1e-9);
  }
}

TEST(KdLoss, MatchesDirectKlDefinition) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 100; ++i) {
    const Tensor s = random_logits(rng, 3, 4, 3.0);
    const Tensor t = random_logits(rng, 3, 4, 3.0);
    const double tau = 0.5 + 0.5 * (i % 7);
    const Tensor p = softmax_values(s, tau), q = softmax_values(t, tau);
    double kl = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) kl += q[k] * std::log(q[k] / p[k]);
    EXPECT_NEAR(kd(s, t, tau), kl / 3.0, 1e-12);
  }
}

TEST(KdLoss, TeacherReceivesNoGradient) {
  Tape t;
  Var s = t.variable(Tensor::matrix(2, 2, {0.3, -0.2, 1.0, 0.5}));
  Var teacher = t.variable(Tensor::matrix(2, 2, {1.0, 0.0, -1.0, 2.0}));
  t.backward(kd_loss(s, teacher, 4.0));
  EXPECT_EQ(t.grad(teacher), Tensor({2, 2}));
  EXPECT_NE(t.grad(s), Tensor({2, 2}));
}

TEST(TotalLoss, HandValues) {
  EXPECT_DOUBLE_EQ(total_loss(0.7, 0.3, 0.2, 0.0, 0.0, 4.0), 0.7);
  EXPECT_NEAR(total_loss(1.0, 0.1, 0.2, 1.0, 1.0, 2.0), 2.2, 1e-12);
  EXPECT_NEAR(total_loss(0.5, 0.2, 0.4, 2.0, 0.5, 1.0), 1.1, 1e-12);
  EXPECT_THROW(total_loss(-0.1, 0.1, 0.1, 1, 1, 4), parameter_error);
  EXPECT_THROW(total_loss(0.1, 0.1, 0.1, 1, 1, 0), parameter_error);
}

TEST(TotalLoss, DerivativeInKdAIsAlphaTauSquared) {
  Tape t;
  Var ce_v = t.variable(Tensor::scalar(0.6));
  Var a = t.variable(Tensor::scalar(0.2));
  Var b = t.variable(Tensor::scalar(0.3));
  t.backward(total_loss(ce_v, a, b, 1.75, 0.5, 4.0));
  EXPECT_EQ(t.grad(a)[0], 1.75 * 16.0);
  EXPECT_EQ(t.grad(b)[0], 0.5 * 16.0);
  EXPECT_EQ(t.grad(ce_v)[0], 1.0);
}

TEST(CeOracle, HandValues) {
  std::vector<std::uint32_t> y{0};
  const Tensor g = ce_logit_gradient_oracle(Tensor::matrix(1, 2, {0, 0}), y);
  EXPECT_DOUBLE_EQ(g[0], -0.5);
  EXPECT_DOUBLE_EQ(g[1], 0.5);
  const Tensor h = ce_logit_gradient_oracle(Tensor::matrix(1, 2, {30, -30}), y);
  EXPECT_LE(std::abs(h[0]), 1e-10);
  EXPECT_LE(std::abs(h[1]), 1e-10);
}

TEST(CeOracle, TapeGradientMatchesOnRandomInstances) {
  std::mt19937_64 rng(10);
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 1 + i % 6, m = 2 + i % 5;
    const Tensor l = random_logits(rng, n, m, 3.0);
    std::vector<std::uint32_t> y(n);
    for (std::size_t r = 0; r < n; ++r) y[r] = static_cast<std::uint32_t>((r * 7 + i) % m);
    Tape t;
    Var x = t.variable(l);
    t.backward(cross_entropy(x, y));
    const Tensor oracle = ce_logit_gradient_oracle(l, y);
    for (std::size_t k = 0; k < l.size(); ++k) EXPECT_NEAR(t.grad(x)[k], oracle[k], 1e-10);
  }
}
