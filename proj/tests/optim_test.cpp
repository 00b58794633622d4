#include <gtest/gtest.h>

#include <cmath>

#include "guie/optim.hpp"
#include "guie/rng.hpp"

using namespace guie;

namespace {

TensorList<double> scalar(double v) { return {Matrix<double>::Constant(1, 1, v)}; }

AdamWState<double> fresh_state(const TensorList<double>& p, double wd) {
  AdamWConfig c;
  c.weight_decay = wd;
  return AdamWState<double>::for_params(p, c);
}

}  // namespace

// --- adamw ----------------------------------------------------------------------

TEST(AdamW, FirstStepIsUnitNormalized) {
  auto p = scalar(1.0);
  auto st = fresh_state(p, 0.0);
  adamw_step(p, scalar(2.0), st, 0.01);
  // m̂ / sqrt(v̂) = 1 on the first step, so the move is lr up to epsilon.
  EXPECT_NEAR(p[0](0, 0), 0.99, 1e-8);
  EXPECT_EQ(st.step_count, 1u);
}

TEST(AdamW, DecoupledDecayAddsLrLambdaW) {
  auto p = scalar(1.0);
  auto st = fresh_state(p, 0.1);
  adamw_step(p, scalar(2.0), st, 0.01);
  EXPECT_NEAR(p[0](0, 0), 0.989, 1e-8);
}

TEST(AdamW, ZeroGradientIsFixedPointWithoutDecay) {
  auto p = scalar(0.7);
  auto st = fresh_state(p, 0.0);
  adamw_step(p, scalar(3.0), st, 0.01);
  const double after_first = p[0](0, 0);
  const double m1 = st.m[0](0, 0), v1 = st.v[0](0, 0);
  adamw_step(p, scalar(0.0), st, 0.01);
  EXPECT_EQ(st.m[0](0, 0), 0.9 * m1);
  EXPECT_EQ(st.v[0](0, 0), 0.999 * v1);
  // Moments still carry the old gradient, so the parameter keeps moving.
  EXPECT_LT(p[0](0, 0), after_first);

  auto q = scalar(0.7);
  auto fresh = fresh_state(q, 0.0);
  adamw_step(q, scalar(0.0), fresh, 0.01);
  EXPECT_EQ(q[0](0, 0), 0.7);
  EXPECT_EQ(fresh.m[0](0, 0), 0.0);
}

TEST(AdamW, ZeroGradientDecaysGeometricallyExactly) {
  auto p = scalar(1.3);
  auto st = fresh_state(p, 0.1);
  const double lr = 0.05;
  double w = 1.3;
  for (int i = 0; i < 100; ++i) {
    adamw_step(p, scalar(0.0), st, lr);
    w = w * (1.0 - lr * 0.1);
    ASSERT_EQ(p[0](0, 0), w);
  }
}

TEST(AdamW, MovesAgainstGradientSign) {
  SplitMix64 rng(1);
  TensorList<double> p{Matrix<double>::Zero(3, 4)};
  Matrix<double> g(3, 4);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  auto st = fresh_state(p, 0.0);
  for (int s = 0; s < 5; ++s) adamw_step(p, TensorList<double>{g}, st, 0.01);
  for (Eigen::Index i = 0; i < g.size(); ++i) EXPECT_LT(p[0].data()[i] * g.data()[i], 0.0);
}

TEST(AdamW, NonFiniteGradientLeavesStateUntouched) {
  auto p = scalar(1.0);
  auto st = fresh_state(p, 0.1);
  adamw_step(p, scalar(1.0), st, 0.01);
  const auto p_before = p;
  const auto m_before = st.m;
  EXPECT_THROW(adamw_step(p, scalar(NAN), st, 0.01), OptimizerError);
  EXPECT_EQ(p, p_before);
  EXPECT_EQ(st.m, m_before);
  EXPECT_EQ(st.step_count, 1u);
  EXPECT_THROW(adamw_step(p, TensorList<double>{}, st, 0.01), DomainError);
}

// --- sam ------------------------------------------------------------------------

TEST(Sam, QuadraticInnerGradientEvaluatedAtPerturbedPoint) {
  auto p = scalar(1.0);
  auto st = fresh_state(p, 0.0);
  std::vector<double> seen;
  const GradientFn<double> grad = [&](const TensorList<double>& w) {
    seen.push_back(w[0](0, 0));
    return w;  // ∇(w²/2) = w
  };
  sam_step(p, grad, st, {0.1, 1e-12}, 0.01);
  ASSERT_EQ(seen.size(), 2u);
  EXPECT_EQ(seen[0], 1.0);
  EXPECT_NEAR(seen[1], 1.1, 1e-15);
  // AdamW consumed g = 1.1: first moment is 0.1 * 1.1.
  EXPECT_NEAR(st.m[0](0, 0), 0.11, 1e-15);
  // Step is taken from the original point, not the perturbed one.
  EXPECT_NEAR(p[0](0, 0), 0.99, 1e-8);
}

TEST(Sam, ZeroGradientFallsBackToPlainAdamW) {
  auto p = TensorList<double>{Matrix<double>::Constant(2, 2, 0.5)};
  auto q = p;
  auto s1 = fresh_state(p, 0.1), s2 = fresh_state(q, 0.1);
  int calls = 0;
  const GradientFn<double> zero = [&](const TensorList<double>& w) {
    ++calls;
    return zeros_like(w);
  };
  const auto info = sam_step(p, zero, s1, {}, 0.01);
  adamw_step(q, zeros_like(q), s2, 0.01);
  EXPECT_TRUE(info.fallback);
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(p, q);
  EXPECT_EQ(s1.m, s2.m);
}

TEST(Sam, PerturbationNormIsRho) {
  SplitMix64 rng(2);
  for (int t = 0; t < 100; ++t) {
    TensorList<double> g{Matrix<double>(3, 5), Matrix<double>(1, 7)};
    for (auto& m : g)
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * std::pow(10.0, rng.below(7) - 3.0);
    const double rho = 0.01 + rng.uniform();
    EXPECT_NEAR(global_norm(sam_perturbation(g, rho)), rho, 1e-9);
  }
}

TEST(Sam, FailingGradientLeavesStateUntouched) {
  auto p = scalar(1.0);
  auto st = fresh_state(p, 0.1);
  int calls = 0;
  const GradientFn<double> flaky = [&](const TensorList<double>& w) -> TensorList<double> {
    if (++calls == 2) throw std::runtime_error("boom");
    return w;
  };
  EXPECT_THROW(sam_step(p, flaky, st, {}, 0.01), std::runtime_error);
  EXPECT_EQ(p[0](0, 0), 1.0);
  EXPECT_EQ(st.step_count, 0u);
}

TEST(Sam, ConvergesOnQuadratic) {
  auto p = scalar(1.0);
  auto st = fresh_state(p, 0.0);
  const GradientFn<double> grad = [](const TensorList<double>& w) { return w; };
  for (int i = 0; i < 200; ++i) sam_step(p, grad, st, {0.05, 1e-12}, 0.1);
  EXPECT_LT(std::abs(p[0](0, 0)), 1e-2);
}

// --- schedule ---------------------------------------------------------------------

TEST(Schedule, PaperEndpoints) {
  const ScheduleSpec s;  // 1e-2, 1e-4, 3, 1000
  EXPECT_NEAR(lr_at(0, s), 1e-4, 1e-12);
  EXPECT_NEAR(lr_at(3, s), 1e-2, 1e-12);
  EXPECT_NEAR(lr_at(999, s), 1e-4, 1e-12);
  EXPECT_NEAR(lr_at(1, s), 1e-4 + (1e-2 - 1e-4) / 3, 1e-12);
}

TEST(Schedule, CosineMidpoint) {
  ScheduleSpec s;
  s.total_epochs = 3 + 11;  // T − 1 = 10
  EXPECT_NEAR(lr_at(3 + 5, s), 5.05e-3, 1e-12);
}

TEST(Schedule, MonotoneUpThenDown) {
  for (std::uint32_t total : {4u, 5u, 60u, 1000u}) {
    ScheduleSpec s;
    s.total_epochs = total;
    for (std::uint32_t e = 1; e <= 3; ++e) EXPECT_GE(lr_at(e, s), lr_at(e - 1, s));
    for (std::uint32_t e = 4; e < total; ++e) EXPECT_LE(lr_at(e, s), lr_at(e - 1, s));
    EXPECT_NEAR(lr_at(3, s), 1e-2, 1e-12);
    if (total > 4) EXPECT_NEAR(lr_at(total - 1, s), 1e-4, 1e-12);
  }
}

TEST(Schedule, Errors) {
  ScheduleSpec s;
  s.total_epochs = 10;
  EXPECT_THROW(lr_at(10, s), DomainError);
  s.warmup_epochs = 10;
  EXPECT_THROW(lr_at(0, s), ConfigError);
  s = {};
  s.lr_min = 0;
  EXPECT_THROW(lr_at(0, s), ConfigError);
}
