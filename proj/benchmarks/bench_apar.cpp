#include <numeric>

#include <benchmark/benchmark.h>

#include "apar/copula_gate.hpp"
#include "apar/finetune.hpp"
#include "apar/pretrain.hpp"

using namespace apar;

namespace {

TabularDataset irregular(std::size_t n) {
  SyntheticTaskSpec spec;
  spec.seed = 7;
  spec.n = n;
  spec.k_num = 12;
  spec.k_cat = 3;
  spec.threshold_count = 8;
  auto [data, pre] = fit_transform(to_raw_table(generate_synthetic(spec).data), {});
  return data;
}

EncoderConfig encoder(std::size_t d) {
  EncoderConfig c;
  c.d = d;
  c.layers = 2;
  c.heads = 4;
  c.ffn_hidden = 2 * d;
  return c;
}

std::vector<std::size_t> first_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), 0);
  return r;
}

}  // namespace

static void BM_Predict(benchmark::State& state) {
  const auto data = irregular(256);
  Rng init(0);
  const auto model = init_model<float>(data.schema, encoder(state.range(0)), init);
  for (auto _ : state) benchmark::DoNotOptimize(predict(model, data, 256));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(data.size()));
}
BENCHMARK(BM_Predict)->Arg(16)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_FinetuneStep(benchmark::State& state) {
  const auto data = irregular(512);
  Rng init(0);
  const auto model = init_model<float>(data.schema, encoder(state.range(0)), init);
  const auto gate = init_gate<float>(data.k(), 0.5);
  const auto corr = estimate_correlation(data);
  const auto rows = first_rows(128);
  FinetuneConfig c;
  Rng g(1), d(2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(finetune_step(model, &gate, &corr, data, rows, c, g, &d));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(rows.size()));
}
BENCHMARK(BM_FinetuneStep)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_PretrainStep(benchmark::State& state) {
  const auto data = irregular(512);
  Rng init(0);
  const auto model = init_model<float>(data.schema, encoder(state.range(0)), init);
  Rng r(3);
  const auto sample = sample_pairs(data, 64, ArithmeticOp::add, 1e-3, r);
  Rng d(4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(pretrain_step(model, data, sample.pairs, ArithmeticOp::add, 1e-3, &d));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(sample.pairs.size()));
}
BENCHMARK(BM_PretrainStep)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_CopulaDraw(benchmark::State& state) {
  const auto k = static_cast<std::size_t>(state.range(0));
  Tensor<double> r(k, k);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) r(i, j) = i == j ? 1.0 : 0.3;
  }
  const auto corr = make_correlation_model(r);
  Rng rng(5);
  for (auto _ : state) benchmark::DoNotOptimize(draw_copula_uniforms(corr, rng));
}
BENCHMARK(BM_CopulaDraw)->Arg(8)->Arg(32)->Arg(128);

static void BM_EstimateCorrelation(benchmark::State& state) {
  const auto data = irregular(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(estimate_correlation(data));
}
BENCHMARK(BM_EstimateCorrelation)->Arg(1000)->Arg(5000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
