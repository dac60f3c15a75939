#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "apar/error.hpp"
#include "apar/finetune.hpp"
#include "apar/metrics.hpp"

using namespace apar;

namespace {

EncoderConfig small_encoder(double dropout = 0.0) {
  EncoderConfig c;
  c.d = 8;
  c.layers = 1;
  c.heads = 2;
  c.attention_dropout = dropout;
  c.ffn_dropout = dropout;
  return c;
}

struct Task {
  TabularDataset train, valid, test;
};

Task irregular_task(std::uint64_t seed, std::size_t n = 5000) {
  SyntheticTaskSpec spec;
  spec.seed = 7;
  spec.n = n;
  spec.k_num = 12;
  spec.k_cat = 3;
  spec.threshold_count = 8;
  spec.noise_sigma = 0.05;
  spec.uninformative_fraction = 1.0 / 3.0;
  auto [full, pre] = fit_transform(to_raw_table(generate_synthetic(spec).data), {});
  auto parts = split(full, {0.7, 0.15, 0.15}, seed);
  return {parts.train, parts.valid, parts.test};
}

std::vector<std::size_t> first_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = i;
  return r;
}

}  // namespace

TEST(LossComponents, HandOracle) {
  const std::vector<double> y{1, 2}, y_hat{0.5, 2.5}, y_tilde{0, 2}, pi{0.2, 0.3};
  const auto c = finetune_loss_components(y, y_hat, y_tilde, pi, 1.0, 0.5, 0.1);
  const double target = (0.5 * 0.5 + 0.5 * 0.5) / 2;
  const double reg = (1.0 * 1.0 + 0.0) / 2;
  const double sparsity = 0.2 + 0.3;
  EXPECT_NEAR(c.target, target, 1e-15);
  EXPECT_NEAR(c.target, 0.25, 1e-15);
  EXPECT_NEAR(c.reg, reg, 1e-15);
  EXPECT_NEAR(c.sparsity, sparsity, 1e-15);
  EXPECT_NEAR(c.total, 1.0 * target + 0.5 * reg + 0.1 * sparsity, 1e-15);
  EXPECT_NEAR(c.total, 0.55, 1e-15);
}

TEST(FinetuneConfig, WeightsMustLieInUnitInterval) {
  FinetuneConfig c;
  c.beta = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = FinetuneConfig{};
  c.tau = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_gate_sampling("per_sample"), GateSampling::per_sample);
  EXPECT_THROW(parse_gate_sampling("sometimes"), ConfigError);
}

TEST(FinetuneStep, ZeroWeightsReduceToTargetLoss) {
  const Task t = irregular_task(0, 200);
  Rng init(0);
  const auto model = init_model<double>(t.train.schema, small_encoder(0.1), init);
  const auto gate = init_gate<double>(t.train.k(), 0.5);
  const auto corr = estimate_correlation(t.train);
  FinetuneConfig c;
  c.beta = 0.0;
  c.gamma = 0.0;
  Rng g(1), d(2);
  const auto r = finetune_step(model, &gate, &corr, t.train, first_rows(16), c, g, &d);
  EXPECT_EQ(r.components.total, r.components.target);
}

TEST(FinetuneStep, AllOnesGateMatchesOriginalPath) {
  const Task t = irregular_task(0, 200);
  Rng init(0);
  const auto model = init_model<double>(t.train.schema, small_encoder(), init);
  GateParams<double> gate{Tensor<double>(1, t.train.k(), 50.0), 0.5};
  const auto corr = estimate_correlation(t.train);
  FinetuneConfig c;
  c.beta = 0.5;
  for (auto mode : {GateSampling::per_batch, GateSampling::per_sample}) {
    c.gate_sampling = mode;
    Rng g(1);
    const auto r = finetune_step(model, &gate, &corr, t.train, first_rows(16), c, g, nullptr);
    EXPECT_NEAR(r.components.reg, r.components.target, 1e-6);
  }
}

TEST(FinetuneStep, ClosedGateErasesFeatures) {
  const Task t = irregular_task(0, 200);
  Rng init(0);
  const auto model = init_model<double>(t.train.schema, small_encoder(), init);
  GateParams<double> gate{Tensor<double>(1, t.train.k(), -50.0), 0.5};
  const auto corr = estimate_correlation(t.train);
  FinetuneConfig c;
  Rng g(1);
  const auto r = finetune_step(model, &gate, &corr, t.train, first_rows(8), c, g, nullptr);
  for (double v : r.y_tilde) EXPECT_NEAR(v, r.y_tilde[0], 1e-9);
  EXPECT_GT(std::fabs(r.y_hat[0] - r.y_hat[1]), 1e-6);
}

TEST(FinetuneStep, ComponentsMatchValueLevelLoss) {
  const Task t = irregular_task(0, 200);
  Rng init(0);
  const auto model = init_model<double>(t.train.schema, small_encoder(), init);
  Rng lr(3);
  GateParams<double> gate = init_gate<double>(t.train.k(), 0.5);
  for (auto& v : gate.logits.values()) v = lr.normal();
  const auto corr = estimate_correlation(t.train);
  FinetuneConfig c;
  c.beta = 0.4;
  c.gamma = 0.2;
  const auto rows = first_rows(12);
  Rng g(1);
  const auto r = finetune_step(model, &gate, &corr, t.train, rows, c, g, nullptr);
  const std::vector<double> y(t.train.targets.begin(), t.train.targets.begin() + 12);
  const auto oracle = finetune_loss_components(y, r.y_hat, r.y_tilde, gate.probabilities(), 1.0, 0.4, 0.2);
  EXPECT_NEAR(r.components.target, oracle.target, 1e-12);
  EXPECT_NEAR(r.components.reg, oracle.reg, 1e-12);
  EXPECT_NEAR(r.components.sparsity, oracle.sparsity, 1e-12);
  EXPECT_NEAR(r.components.total, oracle.total, 1e-12);
  EXPECT_TRUE(r.grads.contains("gate.logits"));
  EXPECT_FALSE(r.grads.contains("head.pretrain.w1"));
}

TEST(FinetuneStep, WithoutAdaptiveRegularizationNoGateIsTouched) {
  const Task t = irregular_task(0, 200);
  Rng init(0);
  const auto model = init_model<double>(t.train.schema, small_encoder(), init);
  FinetuneConfig c;
  c.adaptive_reg = false;
  c.beta = 0.0;
  c.gamma = 0.0;
  const auto before = gate_draw_count();
  Rng g(1);
  const auto r = finetune_step<double>(model, nullptr, nullptr, t.train, first_rows(8), c, g, nullptr);
  EXPECT_EQ(gate_draw_count(), before);
  EXPECT_TRUE(r.y_tilde.empty());
  EXPECT_EQ(r.components.total, r.components.target);
}

TEST(Predict, DeterministicAndOrderPreserving) {
  const Task t = irregular_task(0, 300);
  Rng init(0);
  const auto model = init_model<float>(t.train.schema, small_encoder(0.2), init);
  const auto a = predict(model, t.test, 7);
  const auto b = predict(model, t.test, 64);
  ASSERT_EQ(a.size(), t.test.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
  EXPECT_EQ(a, predict(model, t.test, 7));
  const std::vector<std::size_t> rev{3, 2, 1, 0};
  const auto sub = predict(model, t.test.subset(rev));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(sub[i], a[rev[i]], 1e-6);
}

TEST(Predict, InverseTransformRoundTrip) {
  SyntheticTaskSpec spec;
  spec.n = 50;
  spec.k_num = 2;
  auto [data, pre] = fit_transform(to_raw_table(generate_synthetic(spec).data), {});
  for (double s : {-2.5, -0.1, 0.0, 0.7, 3.0}) {
    const double oracle = (s < 0 ? -1.0 : 1.0) * (std::exp(std::fabs(s)) - 1.0);
    EXPECT_NEAR(pre.inverse_target(s), oracle, 1e-9);
    EXPECT_NEAR(pre.transform_target(pre.inverse_target(s)), s, 1e-9);
  }
}

TEST(FinetuneLoop, SparsityPressureLowersMeanPi) {
  const Task t = irregular_task(0, 2000);
  Rng init(0);
  auto model = init_model<float>(t.train.schema, small_encoder(), init);
  FinetuneConfig c;
  c.beta = 0.0;
  c.gamma = 0.5;
  c.batch_size = 64;
  FinetuneLoopOptions opts;
  opts.max_steps = 200;
  std::size_t steps = 0;
  double last = 0.5;
  opts.on_step = [&](std::size_t, double mean_pi) {
    ++steps;
    last = mean_pi;
  };
  finetune_loop(model, t.train, t.valid, c, {}, opts);
  EXPECT_EQ(steps, 200u);
  EXPECT_LT(last, 0.5);
}

TEST(FinetuneLoop, DeterministicHistory) {
  const Task t = irregular_task(1, 800);
  FinetuneConfig c;
  c.max_epochs = 3;
  c.seed = 9;
  std::vector<double> runs[2];
  for (auto& out : runs) {
    Rng init(0);
    auto model = init_model<float>(t.train.schema, small_encoder(0.1), init);
    const auto r = finetune_loop(model, t.train, t.valid, c);
    for (const auto& e : r.history) {
      out.push_back(e.loss.total);
      out.push_back(e.valid_rmse);
      out.push_back(e.mean_pi);
    }
  }
  EXPECT_EQ(runs[0], runs[1]);
}

TEST(FinetuneLoop, LoggedStepsDecomposeExactly) {
  const Task t = irregular_task(2, 800);
  Rng init(0);
  auto model = init_model<float>(t.train.schema, small_encoder(0.1), init);
  FinetuneConfig c;
  c.max_epochs = 2;
  c.beta = 0.3;
  c.gamma = 0.2;
  std::size_t records = 0;
  const auto r = finetune_loop(model, t.train, t.valid, c, [&](const nlohmann::json& j) {
    if (j["phase"] != "finetune_step") return;
    ++records;
    const double lhs = j["L_AR"].get<double>();
    const double rhs = c.alpha * j["L_target"].get<double>() + c.beta * j["L_reg"].get<double>() +
                       c.gamma * j["L_sparsity"].get<double>();
    EXPECT_NEAR(lhs, rhs, 1e-6);
  });
  EXPECT_EQ(records, r.steps.size());
  EXPECT_GT(records, 0u);
}

TEST(FinetuneLoop, BeatsConstantMeanOnIrregularTask) {
  std::vector<double> model_rmse, mean_rmse;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Task t = irregular_task(seed);
    EncoderConfig e;
    e.d = 16;
    e.layers = 1;
    e.heads = 2;
    Rng init(seed, "init");
    auto model = init_model<float>(t.train.schema, e, init);
    FinetuneConfig c;
    c.max_epochs = 8;
    c.lr = 1e-3;
    c.seed = seed;
    const auto r = finetune_loop(model, t.train, t.valid, c);
    double mean = 0;
    for (double y : t.train.targets) mean += y;
    mean /= static_cast<double>(t.train.size());
    model_rmse.push_back(r.best_valid_rmse);
    mean_rmse.push_back(rmse(std::vector<double>(t.valid.size(), mean), t.valid.targets));
  }
  std::sort(model_rmse.begin(), model_rmse.end());
  std::sort(mean_rmse.begin(), mean_rmse.end());
  EXPECT_LT(model_rmse[2], mean_rmse[2]);
}
