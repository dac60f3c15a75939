#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "apar/autodiff.hpp"
#include "apar/encoder.hpp"
#include "apar/error.hpp"
#include "apar/model.hpp"
#include "apar/tokenizer.hpp"

using namespace apar;

namespace {

TabularDataset tiny_dataset(std::vector<double> nums, std::vector<std::uint32_t> cats,
                            std::size_t cardinality) {
  TabularDataset d;
  d.num = Tensor<double>(1, nums.size(), nums);
  d.cat = Tensor<std::uint32_t>(1, cats.size(), cats);
  d.targets = {0.0};
  for (std::size_t j = 0; j < nums.size(); ++j) d.schema.push_back({"x" + std::to_string(j), ColumnKind::numerical, 0});
  for (std::size_t j = 0; j < cats.size(); ++j) d.schema.push_back({"c" + std::to_string(j), ColumnKind::categorical, cardinality});
  d.schema.push_back({"y", ColumnKind::target, 0});
  return d;
}

Schema wide_schema(std::size_t k_num, std::size_t k_cat) {
  Schema s;
  for (std::size_t j = 0; j < k_num; ++j) s.push_back({"x" + std::to_string(j), ColumnKind::numerical, 0});
  for (std::size_t j = 0; j < k_cat; ++j) s.push_back({"c" + std::to_string(j), ColumnKind::categorical, 6});
  s.push_back({"y", ColumnKind::target, 0});
  return s;
}

}  // namespace

TEST(Tokenizer, ShapesAtPaperScale) {
  Rng rng(1);
  const auto p = init_tokenizer<float>(wide_schema(230, 17), 192, rng);
  EXPECT_EQ(p.w_num.rows(), 230u);
  EXPECT_EQ(p.w_num.cols(), 192u);
  EXPECT_EQ(p.w_cat.size(), 17u);
  EXPECT_EQ(p.w_cat[0].rows(), 6u);
  EXPECT_EQ(p.b_cat.rows(), 17u);
}

TEST(Tokenizer, InitIsDeterministicAndScaled) {
  Rng a(5), b(5);
  const auto p = init_tokenizer<double>(wide_schema(230, 0), 192, a);
  const auto q = init_tokenizer<double>(wide_schema(230, 0), 192, b);
  EXPECT_EQ(p.w_num, q.w_num);
  const auto& w = p.w_num.values();
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
  double var = 0;
  for (double v : w) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(w.size() - 1));
  EXPECT_NEAR(sd, std::sqrt(2.0 / 192.0), 0.1 * std::sqrt(2.0 / 192.0));
}

TEST(Tokenizer, NumericalRowIsAffine) {
  const TabularDataset d = tiny_dataset({2.0}, {}, 0);
  TokenizerParams<double> p;
  p.d = 2;
  p.w_num = Tensor<double>(1, 2, {1.0, -1.0});
  p.b_num = Tensor<double>(1, 2, {0.5, 0.5});
  p.b_cat = Tensor<double>(0, 2);
  const auto z = tokenize(d, 0, p);
  EXPECT_EQ(z(0, 0), 2.5);
  EXPECT_EQ(z(0, 1), -1.5);

  const TabularDataset zero = tiny_dataset({0.0}, {}, 0);
  const auto z0 = tokenize(zero, 0, p);
  EXPECT_EQ(z0(0, 0), 0.5);
  EXPECT_EQ(z0(0, 1), 0.5);
}

TEST(Tokenizer, CategoricalSelectsEmbeddingRow) {
  const TabularDataset d = tiny_dataset({0.0}, {1}, 3);
  Rng rng(3);
  auto p = init_tokenizer<double>(d.schema, 4, rng);
  p.b_cat.fill(0.0);
  const auto z = tokenize(d, 0, p);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(z(1, c), p.w_cat[0](1, c));
}

TEST(Tokenizer, BatchMatchesSingleSample) {
  const TabularDataset d = tiny_dataset({0.3, -1.2}, {2}, 3);
  Rng rng(4);
  const auto p = init_tokenizer<double>(d.schema, 4, rng);
  ad::Tape<double> tape;
  ParamBinder<double> binder(tape);
  const auto vars = bind_tokenizer(binder, p);
  const std::vector<std::size_t> rows{0};
  const auto z = tokenize_batch(vars, d, rows);
  EXPECT_EQ(z.value(), tokenize(d, 0, p));
}

TEST(Encoder, ConfigValidation) {
  EncoderConfig c;
  c.d = 10;
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = EncoderConfig{};
  c.attention_dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(EncoderConfig{}.validate());
}

TEST(Encoder, ZeroLayersStacksClsAndTokens) {
  EncoderConfig c;
  c.d = 4;
  c.layers = 0;
  c.heads = 2;
  Rng rng(1);
  const auto p = init_encoder<double>(c, rng);
  Tensor<double> z(3, 4);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = 0.1 * static_cast<double>(i);
  const auto out = encode(z, p, true, rng);
  ASSERT_EQ(out.rows(), 4u);
  for (std::size_t c2 = 0; c2 < 4; ++c2) EXPECT_EQ(out(0, c2), p.cls[c2]);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c2 = 0; c2 < 4; ++c2) EXPECT_EQ(out(r + 1, c2), z(r, c2));
  }
  const auto cls = extract_cls(out);
  EXPECT_EQ(cls, p.cls.values());
}

TEST(Encoder, OutputShapeAndEvalDeterminism) {
  EncoderConfig c;
  c.d = 8;
  c.layers = 2;
  c.heads = 2;
  Rng init(2);
  const auto p = init_encoder<double>(c, init);
  Tensor<double> z(3, 8);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = std::sin(static_cast<double>(i));
  Rng r1(10), r2(99);
  const auto a = encode(z, p, false, r1);
  const auto b = encode(z, p, false, r2);
  EXPECT_EQ(a.rows(), 4u);
  EXPECT_EQ(a.cols(), 8u);
  EXPECT_EQ(a, b);
  Rng r3(10), r4(99);
  EXPECT_NE(encode(z, p, true, r3), encode(z, p, true, r4));
}

TEST(Encoder, ExtractClsTakesFirstRow) {
  const Tensor<double> zl(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(extract_cls(zl), (std::vector<double>{1, 2}));
}

TEST(Heads, ConstantHead) {
  Rng rng(0);
  auto heads = init_heads<double>(4, rng);
  auto& h = heads.finetune;
  h.w1.fill(0);
  h.b1.fill(0);
  h.w2.fill(0);
  h.b2.fill(0.7);
  const std::vector<double> x{1, -2, 3, 4};
  EXPECT_DOUBLE_EQ(head_forward<double>(x, HeadKind::finetune, heads), 0.7);
  EXPECT_THROW(head_forward<double>(x, HeadKind::pretrain, heads), std::invalid_argument);
}

TEST(Heads, HandBuiltSingleHiddenUnit) {
  HeadParams<double> heads;
  heads.finetune.w1 = Tensor<double>(2, 1, {1.0, 1.0});
  heads.finetune.b1 = Tensor<double>(1, 1, {0.0});
  heads.finetune.w2 = Tensor<double>(1, 1, {2.0});
  heads.finetune.b2 = Tensor<double>(1, 1, {0.0});
  const std::vector<double> x{1.0, 2.0};
  EXPECT_DOUBLE_EQ(head_forward<double>(x, HeadKind::finetune, heads), std::max(0.0, 3.0) * 2.0);
}

TEST(Autodiff, SumOfParameterGivesOnes) {
  ad::Tape<double> tape;
  ParamBinder<double> binder(tape);
  auto a = binder.bind("a", Tensor<double>(2, 3, 0.5));
  binder.bind("b", Tensor<double>(1, 4, 1.0));
  tape.backward(ad::sum(a));
  const auto g = binder.gradients();
  for (double v : g.at("a").values()) EXPECT_EQ(v, 1.0);
  for (double v : g.at("b").values()) EXPECT_EQ(v, 0.0);
}

TEST(Autodiff, NonFiniteLossThrows) {
  ad::Tape<double> tape;
  auto a = tape.leaf(Tensor<double>(1, 1, std::nan("")));
  EXPECT_THROW(tape.backward(ad::sum(a)), NumericError);
}

TEST(Autodiff, LinearGradientMatchesHandDerivation) {
  ad::Tape<double> tape;
  ParamBinder<double> binder(tape);
  auto x = tape.constant(Tensor<double>(2, 2, {1, 2, 3, 4}));
  auto w = binder.bind("w", Tensor<double>(2, 1, {0.5, -1}));
  auto b = binder.bind("b", Tensor<double>(1, 1, {0.25}));
  tape.backward(ad::sum(ad::linear(x, w, b)));
  const auto g = binder.gradients();
  // d/dw sum(xw + b) = column sums of x.
  EXPECT_EQ(g.at("w")[0], 4.0);
  EXPECT_EQ(g.at("w")[1], 6.0);
  EXPECT_EQ(g.at("b")[0], 2.0);
}

TEST(Model, EveryParameterGetsFiniteGradient) {
  const TabularDataset d = tiny_dataset({0.3, -1.2}, {2}, 3);
  EncoderConfig c;
  c.d = 8;
  c.layers = 2;
  c.heads = 2;
  Rng rng(7);
  const auto model = init_model<double>(d.schema, c, rng);
  ad::Tape<double> tape;
  ParamBinder<double> binder(tape);
  const auto bb = bind_backbone(binder, model);
  const auto head = bind_head(binder, model.heads.finetune, HeadKind::finetune);
  const std::vector<std::size_t> rows{0};
  Rng drop(1);
  auto y = mlp_forward(head, embed_rows(bb, d, rows, &drop));
  tape.backward(ad::mse(y, Tensor<double>(1, 1, {1.0})));
  const auto g = binder.gradients();
  std::size_t n_params = 0;
  model.tokenizer.visit([&](const std::string&, const auto&) { ++n_params; });
  model.encoder.visit([&](const std::string&, const auto&) { ++n_params; });
  EXPECT_EQ(g.size(), n_params + 4);
  EXPECT_TRUE(g.all_finite());
}
