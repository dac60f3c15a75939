#include <cmath>

#include <gtest/gtest.h>

#include "apar/error.hpp"
#include "apar/optimizer.hpp"

using namespace apar;

namespace {

struct Scalar {
  Tensor<double> theta;
  ParamList<double> list() { return {{"theta", &theta}}; }
};

GradientSet<double> grad_of(double g, std::size_t n = 1) {
  GradientSet<double> out;
  out.accumulate("theta", Tensor<double>(1, n, g));
  return out;
}

}  // namespace

TEST(Optimizer, ZeroGradientNoDecayIsFixedPoint) {
  Scalar p{Tensor<double>(1, 3, {1.0, -2.0, 0.5})};
  OptimizerConfig c;
  c.weight_decay = 0.0;
  OptimizerState<double> state(c);
  for (int i = 0; i < 5; ++i) optimizer_step(p.list(), grad_of(0.0, 3), state, 0.1);
  EXPECT_EQ(p.theta, Tensor<double>(1, 3, {1.0, -2.0, 0.5}));
  EXPECT_EQ(state.step, 5u);
}

TEST(Optimizer, FirstStepMovesByLearningRate) {
  Scalar p{Tensor<double>(1, 1, {1.0})};
  OptimizerConfig c;
  c.weight_decay = 0.0;
  OptimizerState<double> state(c);
  optimizer_step(p.list(), grad_of(1.0), state, 0.1);
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  EXPECT_NEAR(p.theta[0], 1.0 - 0.1 * 1.0 / (1.0 + 1e-8), 1e-12);
  EXPECT_NEAR(p.theta[0], 0.9, 1e-6);
}

TEST(Optimizer, DecoupledDecayShrinksGeometrically) {
  Scalar p{Tensor<double>(1, 1, {2.0})};
  OptimizerState<double> state(OptimizerConfig{});
  double expected = 2.0;
  for (int i = 0; i < 4; ++i) {
    optimizer_step(p.list(), grad_of(0.0), state, 0.1);
    expected *= 1.0 - 0.1 * 0.01;
    EXPECT_NEAR(p.theta[0], expected, 1e-15);
  }
}

TEST(Optimizer, CoupledDecayEntersGradient) {
  Scalar p{Tensor<double>(1, 1, {2.0})};
  OptimizerConfig c;
  c.decoupled = false;
  OptimizerState<double> state(c);
  optimizer_step(p.list(), grad_of(0.0), state, 0.1);
  // The L2 term wd * theta becomes the only gradient; Adam normalizes it.
  EXPECT_NEAR(p.theta[0], 2.0 - 0.1 * 0.02 / (0.02 + 1e-8), 1e-9);
}

TEST(Optimizer, ConvergesOnQuadratic) {
  Scalar p{Tensor<double>(1, 2, {3.0, -4.0})};
  OptimizerConfig c;
  c.weight_decay = 0.0;
  OptimizerState<double> state(c);
  for (int i = 0; i < 2000; ++i) {
    GradientSet<double> g;
    g.accumulate("theta", Tensor<double>(1, 2, {2 * (p.theta[0] - 1.0), 2 * (p.theta[1] + 0.5)}));
    optimizer_step(p.list(), g, state, 0.05 * std::pow(0.998, i));
  }
  EXPECT_NEAR(p.theta[0], 1.0, 1e-3);
  EXPECT_NEAR(p.theta[1], -0.5, 1e-3);
}

TEST(Optimizer, AccumulatorsMatchShapes) {
  Scalar p{Tensor<double>(2, 3, 1.0)};
  OptimizerState<double> state(OptimizerConfig{});
  GradientSet<double> g;
  g.accumulate("theta", Tensor<double>(2, 3, 0.5));
  optimizer_step(p.list(), g, state, 0.01);
  EXPECT_TRUE(state.m.at("theta").same_shape(p.theta));
  EXPECT_TRUE(state.v.at("theta").same_shape(p.theta));
}

TEST(Optimizer, ParametersWithoutGradientAreUntouched) {
  Scalar p{Tensor<double>(1, 1, {1.0})};
  Tensor<double> other(1, 1, {5.0});
  ParamList<double> list{{"theta", &p.theta}, {"other", &other}};
  OptimizerState<double> state(OptimizerConfig{});
  optimizer_step(list, grad_of(1.0), state, 0.1);
  EXPECT_EQ(other[0], 5.0);
}

TEST(Optimizer, NonFiniteGradientThrows) {
  Scalar p{Tensor<double>(1, 1, {1.0})};
  OptimizerState<double> state(OptimizerConfig{});
  EXPECT_THROW(optimizer_step(p.list(), grad_of(std::nan("")), state, 0.1), NumericError);
  EXPECT_THROW(optimizer_step(p.list(), grad_of(1.0, 2), state, 0.1), std::invalid_argument);
}

TEST(Optimizer, ConfigValidation) {
  OptimizerConfig c;
  c.beta1 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = OptimizerConfig{};
  c.epsilon = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Schedule, StepDecay) {
  EXPECT_EQ(scheduled_lr(1e-3, 0, 0.98), 1e-3);
  EXPECT_NEAR(scheduled_lr(1e-3, 2, 0.98), 9.604e-4, 1e-15);
  EXPECT_EQ(scheduled_lr(1e-3, 50, 1.0), 1e-3);
  EXPECT_THROW(scheduled_lr(1e-3, 1, 0.0), ConfigError);
  EXPECT_THROW(scheduled_lr(1e-3, 1, 1.5), ConfigError);
}
