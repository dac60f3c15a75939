#include <cmath>

#include <gtest/gtest.h>

#include "apar/copula_gate.hpp"
#include "apar/error.hpp"

using namespace apar;

namespace {

Tensor<double> corr2(double rho) { return Tensor<double>(2, 2, {1.0, rho, rho, 1.0}); }

Tensor<double> reconstruct(const Tensor<double>& l) {
  const std::size_t k = l.rows();
  Tensor<double> out(k, k);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += l(i, p) * l(j, p);
      out(i, j) = s;
    }
  }
  return out;
}

double logit(double p) { return std::log(p) - std::log1p(-p); }

}  // namespace

TEST(Cholesky, IdentityAndTwoByTwo) {
  const Tensor<double> eye(2, 2, {1, 0, 0, 1});
  EXPECT_EQ(cholesky(eye), eye);
  const auto l = cholesky(corr2(0.5));
  EXPECT_DOUBLE_EQ(l(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(l(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(l(1, 0), 0.5);
  EXPECT_NEAR(l(1, 1), std::sqrt(0.75), 1e-15);
  const auto back = reconstruct(l);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(back[i], corr2(0.5)[i], 1e-12);
}

TEST(Cholesky, IndefiniteAndAsymmetricInputsThrow) {
  EXPECT_THROW(cholesky(corr2(2.0)), NumericError);
  EXPECT_THROW(cholesky(Tensor<double>(2, 2, {1, 0.2, 0.3, 1})), std::invalid_argument);
  EXPECT_THROW(cholesky(Tensor<double>(2, 3)), std::invalid_argument);
}

TEST(Correlation, PerfectlyCorrelatedColumnsGetJitter) {
  TabularDataset d;
  d.num = Tensor<double>(4, 2, {1, 1, 2, 2, 3, 3, 5, 5});
  d.cat = Tensor<std::uint32_t>(4, 0);
  d.targets = {0, 0, 0, 0};
  d.schema = {{"a", ColumnKind::numerical, 0}, {"b", ColumnKind::numerical, 0}, {"y", ColumnKind::target, 0}};
  const auto m = estimate_correlation(d);
  EXPECT_DOUBLE_EQ(m.correlation(0, 1), 1.0);
  EXPECT_GT(m.jitter, 0.0);
  Tensor<double> target = m.correlation;
  for (std::size_t i = 0; i < 2; ++i) target(i, i) += m.jitter;
  const auto back = reconstruct(m.cholesky);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(back[i], target[i], 1e-10);
}

TEST(Correlation, ConstantColumnIsIsolated) {
  TabularDataset d;
  d.num = Tensor<double>(4, 2, {1, 7, 2, 7, 3, 7, 5, 7});
  d.cat = Tensor<std::uint32_t>(4, 0);
  d.targets = {0, 0, 0, 0};
  d.schema = {{"a", ColumnKind::numerical, 0}, {"b", ColumnKind::numerical, 0}, {"y", ColumnKind::target, 0}};
  const auto m = estimate_correlation(d);
  EXPECT_EQ(m.correlation(0, 1), 0.0);
  EXPECT_EQ(m.correlation(1, 0), 0.0);
  EXPECT_EQ(m.correlation(1, 1), 1.0);
}

TEST(Correlation, IndependentColumnsNearZero) {
  Rng rng(11);
  const std::size_t n = 100000;
  TabularDataset d;
  d.num = Tensor<double>(n, 2);
  for (auto& v : d.num.values()) v = rng.uniform();
  d.cat = Tensor<std::uint32_t>(n, 0);
  d.targets.assign(n, 0.0);
  d.schema = {{"a", ColumnKind::numerical, 0}, {"b", ColumnKind::numerical, 0}, {"y", ColumnKind::target, 0}};
  EXPECT_LT(std::fabs(estimate_correlation(d).correlation(0, 1)), 0.02);
}

TEST(Gate, InitAndProbabilities) {
  const auto g = init_gate<double>(3, 0.5);
  for (double p : g.probabilities()) EXPECT_EQ(p, 0.5);
  EXPECT_THROW(init_gate<double>(3, 0.0), ConfigError);
  GateParams<double> far{Tensor<double>(1, 2, {-30.0, 30.0}), 0.5};
  const auto p = far.probabilities();
  EXPECT_GT(p[0], 0.0);
  EXPECT_LT(p[1], 1.0);
}

TEST(Gate, ZeroNoiseAtHalfIsHalf) {
  const auto corr = independent_correlation(1);
  const auto draw = copula_uniforms_from_normals(corr, {0.0});
  EXPECT_DOUBLE_EQ(draw.u[0], 0.5);
  for (double tau : {1e-4, 0.1, 0.5, 1.0, 3.0}) {
    EXPECT_DOUBLE_EQ(relaxed_gate_values({0.0}, draw, tau)[0], 0.5);
  }
}

TEST(Gate, PositiveMarginSaturates) {
  const auto draw = uniforms_to_draw({0.5});
  EXPECT_GT(relaxed_gate_values({logit(0.9)}, draw, 1e-4)[0], 1.0 - 1e-6);
}

TEST(Gate, HardGateThreshold) {
  EXPECT_EQ(hard_gate({0.5}, {0.4}), (std::vector<int>{1}));
  EXPECT_EQ(hard_gate({0.5}, {0.6}), (std::vector<int>{0}));
}

TEST(Gate, MarginalLawAtHalfTemperature) {
  const std::vector<double> pi{0.1, 0.35, 0.5, 0.8};
  std::vector<double> logits;
  for (double p : pi) logits.push_back(logit(p));
  Tensor<double> r(4, 4, 0.0);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) r(i, j) = i == j ? 1.0 : 0.4;
  }
  const auto corr = make_correlation_model(r);
  Rng rng(5);
  const int n = 100000;
  std::vector<int> above(4, 0);
  for (int t = 0; t < n; ++t) {
    const auto m = relaxed_gate_values(logits, draw_copula_uniforms(corr, rng), 0.5);
    for (std::size_t j = 0; j < 4; ++j) above[j] += m[j] > 0.5 ? 1 : 0;
  }
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(above[j] / static_cast<double>(n), pi[j], 0.01);
}

TEST(Gate, CopulaMarginalsStayUniformUnderJitter) {
  // Perfect correlation forces jitter; marginals must still be U(0, 1).
  const auto corr = make_correlation_model(corr2(1.0));
  ASSERT_GT(corr.jitter, 0.0);
  Rng rng(8);
  const int n = 50000;
  int below = 0;
  for (int t = 0; t < n; ++t) below += draw_copula_uniforms(corr, rng).u[1] < 0.3 ? 1 : 0;
  EXPECT_NEAR(below / static_cast<double>(n), 0.3, 0.01);
}

TEST(Gate, NoiseLogitAccurateInTails) {
  const auto corr = independent_correlation(2);
  const auto draw = copula_uniforms_from_normals(corr, {-8.0, 8.0});
  const double u0 = normal_cdf(-8.0);
  EXPECT_NEAR(draw.noise_logit[0], std::log(u0) - std::log1p(-u0), 1e-6);
  EXPECT_NEAR(draw.noise_logit[1], -draw.noise_logit[0], 1e-6);
}

TEST(Sparsity, SumOfProbabilities) {
  GateParams<double> g{Tensor<double>(1, 2, {logit(0.2), logit(0.3)}), 0.5};
  EXPECT_NEAR(sparsity_loss(g), 0.5, 1e-12);
  GateParams<double> off{Tensor<double>(1, 4, -50.0), 0.5};
  EXPECT_LT(sparsity_loss(off), 1e-20 * 4);
}

TEST(Sparsity, GradientIsPiOneMinusPi) {
  ad::Tape<double> tape;
  auto logits = tape.leaf(Tensor<double>(1, 1, {0.3}));
  tape.backward(ad::sigmoid_sum(logits));
  const double analytic = tape.grad(logits.id)[0];
  const double h = 1e-5;
  auto s = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  const double numeric = (s(0.3 + h) - s(0.3 - h)) / (2 * h);
  const double pi = s(0.3);
  EXPECT_NEAR(analytic, pi * (1 - pi), 1e-12);
  EXPECT_NEAR(analytic, numeric, 1e-9);
}

TEST(Gate, RelaxedGateVarMatchesValues) {
  const auto corr = independent_correlation(3);
  Rng rng(2);
  const auto draw = draw_copula_uniforms(corr, rng);
  const std::vector<double> logits{-0.4, 0.1, 1.3};
  const auto expected = relaxed_gate_values(logits, draw, 0.7);
  ad::Tape<double> tape;
  auto lv = tape.leaf(Tensor<double>(1, 3, logits));
  const auto m = relaxed_gate_var(lv, draw, 0.7);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(m.value()[j], expected[j], 1e-14);
}

TEST(Gate, DrawCounterAdvances) {
  const auto before = gate_draw_count();
  Rng rng(1);
  draw_copula_uniforms(independent_correlation(2), rng);
  EXPECT_EQ(gate_draw_count(), before + 1);
}
