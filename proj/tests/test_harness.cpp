#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "apar/baseline.hpp"
#include "apar/checkpoint.hpp"
#include "apar/error.hpp"
#include "apar/experiment.hpp"
#include "apar/metrics.hpp"

using namespace apar;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("apar_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig c;
  c.data.synthetic.n = 400;
  c.data.synthetic.k_num = 4;
  c.data.synthetic.k_cat = 1;
  c.data.synthetic.threshold_count = 2;
  c.data.synthetic.noise_sigma = 0.05;
  c.model.d = 8;
  c.model.layers = 1;
  c.model.heads = 2;
  c.pretrain.max_epochs = 2;
  c.finetune.max_epochs = 2;
  c.output_dir = out.string();
  return c;
}

}  // namespace

TEST(Rmse, Oracles) {
  const std::vector<double> x{1.5, -2.0, 0.25};
  EXPECT_EQ(rmse(x, x), 0.0);
  EXPECT_NEAR(rmse(std::vector<double>{0, 0}, std::vector<double>{3, 4}), std::sqrt(12.5), 1e-15);
  std::vector<double> shifted = x;
  for (auto& v : shifted) v -= 0.75;
  EXPECT_NEAR(rmse(shifted, x), 0.75, 1e-15);
  EXPECT_THROW(rmse(std::vector<double>{}, std::vector<double>{}), std::invalid_argument);
  EXPECT_THROW(rmse(std::vector<double>{1}, std::vector<double>{1, 2}), std::invalid_argument);
}

TEST(AverageRank, SmallTables) {
  EXPECT_EQ(average_rank({{0.3, 0.1, 0.9}}), (std::vector<double>{1.0}));
  EXPECT_EQ(average_rank({{1, 2}, {2, 1}}), (std::vector<double>{1.5, 1.5}));
  EXPECT_EQ(average_rank({{1, 1}, {1, 1}, {2, 2}}), (std::vector<double>{1.5, 1.5, 3.0}));
  EXPECT_THROW(average_rank({}), std::invalid_argument);
}

TEST(AverageRank, InvariantUnderMonotoneColumnTransform) {
  std::vector<std::vector<double>> s{{0.3, 1.0, 5.0}, {0.2, 2.0, 4.0}, {0.4, 1.5, 4.0}};
  const auto base = average_rank(s);
  for (auto& row : s) row[1] = std::exp(3.0 * row[1]) + 7.0;
  EXPECT_EQ(average_rank(s), base);
}

TEST(AverageRank, NaNColumnIsSkipped) {
  const double nan = std::nan("");
  EXPECT_EQ(average_rank({{1, nan, 2}, {2, 0.5, 1}}), (std::vector<double>{1.5, 1.5}));
}

TEST(MetricsWriter, StampsHashAndAppendsLines) {
  const fs::path dir = scratch("metrics");
  fs::create_directories(dir);
  {
    MetricsWriter w(dir / "m.jsonl", "abc");
    w.write({{"phase", "x"}, {"epoch", 1}});
    w.sink()({{"phase", "y"}, {"epoch", 2}});
  }
  std::ifstream in(dir / "m.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(json::parse(line)["config_hash"], "abc");
    ++n;
  }
  EXPECT_EQ(n, 2);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Schema schema{{"a", ColumnKind::numerical, 0}, {"c", ColumnKind::categorical, 4}, {"y", ColumnKind::target, 0}};
  EncoderConfig e;
  e.d = 8;
  e.layers = 1;
  e.heads = 2;
  Rng rng(3);
  const auto model = init_model<float>(schema, e, rng);
  GateParams<float> gate{Tensor<float>(1, 2, {0.25f, -1.5f}), 0.5};
  const auto corr = make_correlation_model(Tensor<double>(2, 2, {1, 0.3, 0.3, 1}));
  const fs::path dir = scratch("ckpt");
  fs::create_directories(dir);
  const json meta{{"schema_digest", schema_digest(schema)}, {"epoch", 3}, {"phase", "finetune"}};
  save_checkpoint(make_checkpoint(model, &gate, &corr, meta), dir / "a.ckpt");

  const Checkpoint back = load_checkpoint(dir / "a.ckpt", schema_digest(schema));
  EXPECT_EQ(back.metadata, meta);
  Rng other(99);
  auto restored = init_model<float>(schema, e, other);
  restore_model(back, restored);
  std::vector<const Tensor<float>*> lhs, rhs;
  model.visit([&](const std::string&, const Tensor<float>& t) { lhs.push_back(&t); });
  restored.visit([&](const std::string&, const Tensor<float>& t) { rhs.push_back(&t); });
  ASSERT_EQ(lhs.size(), rhs.size());
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    ASSERT_TRUE(lhs[i]->same_shape(*rhs[i]));
    EXPECT_EQ(std::memcmp(lhs[i]->data(), rhs[i]->data(), lhs[i]->size() * sizeof(float)), 0);
  }
  GateParams<float> g2 = init_gate<float>(2, 0.5);
  EXPECT_TRUE(restore_gate(back, g2));
  EXPECT_EQ(g2.logits, gate.logits);
  ASSERT_NE(back.find("gate.correlation"), nullptr);
  EXPECT_FLOAT_EQ((*back.find("gate.correlation"))(0, 1), 0.3f);

  save_checkpoint(back, dir / "b.ckpt");
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
}

TEST(Checkpoint, CorruptionIsDetected) {
  Checkpoint c;
  c.metadata = {{"phase", "x"}};
  c.tensors.emplace_back("t", Tensor<float>(2, 2, {1, 2, 3, 4}));
  const std::string bytes = encode_checkpoint(c);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 5)), CheckpointError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, 10)), CheckpointError);
  std::string flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x40;
  EXPECT_THROW(decode_checkpoint(flipped), CheckpointError);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), CheckpointError);
  EXPECT_EQ(decode_checkpoint(bytes).tensors[0].second, c.tensors[0].second);
}

TEST(Checkpoint, SchemaMismatchIsError) {
  Checkpoint c;
  c.metadata = {{"schema_digest", "0000"}};
  const fs::path dir = scratch("ckpt_schema");
  fs::create_directories(dir);
  save_checkpoint(c, dir / "c.ckpt");
  EXPECT_THROW(load_checkpoint(dir / "c.ckpt", std::string("1111")), CheckpointError);
  EXPECT_NO_THROW(load_checkpoint(dir / "c.ckpt", std::string("0000")));
}

TEST(Config, JsonRoundTripAndStrictness) {
  ExperimentConfig c;
  c.finetune.beta = 0.3;
  c.pretrain.op = ArithmeticOp::mul;
  c.data.synthetic.n = 123;
  const ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());

  json bad = c.to_json();
  bad["finetune"]["betta"] = 0.1;
  try {
    ExperimentConfig::from_json(bad);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("finetune.betta"), std::string::npos) << e.what();
  }
  bad = c.to_json();
  bad["model"]["d"] = -4;
  EXPECT_THROW(ExperimentConfig::from_json(bad), ConfigError);
  bad = c.to_json();
  bad["model"]["d"] = "wide";
  EXPECT_THROW(ExperimentConfig::from_json(bad), ConfigError);
  bad = c.to_json();
  bad["finetune"]["gamma"] = 2.0;
  EXPECT_THROW(ExperimentConfig::from_json(bad), ConfigError);
  bad = c.to_json();
  bad["data"]["split"]["test"] = 0.5;
  EXPECT_THROW(ExperimentConfig::from_json(bad), ConfigError);
  EXPECT_NO_THROW(ExperimentConfig::from_json(json::object()));
}

TEST(Config, HashIgnoresOutputDirOnly) {
  ExperimentConfig a, b;
  b.output_dir = "elsewhere";
  EXPECT_EQ(a.hash(), b.hash());
  b.seed = 1;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Config, PhaseSeedsDeriveFromMaster) {
  ExperimentConfig c;
  c.seed = 4;
  EXPECT_EQ(c.resolved_pretrain().seed, derive_seed(4, "pretrain"));
  EXPECT_EQ(c.resolved_finetune().seed, derive_seed(4, "finetune"));
  EXPECT_NE(c.resolved_pretrain().seed, c.resolved_finetune().seed);
}

TEST(Baseline, ConstantTargetIsLearned) {
  SyntheticTaskSpec spec;
  spec.n = 600;
  spec.k_num = 4;
  spec.k_cat = 1;
  auto [data, pre] = fit_transform(to_raw_table(generate_synthetic(spec).data), {});
  for (auto& y : data.targets) y = 2.5;
  const auto parts = split(data, {0.7, 0.15, 0.15}, 1);
  BaselineMlpConfig c;
  c.blocks = 3;
  c.hidden = 64;
  c.lr = 2e-3;
  c.batch_size = 64;
  c.max_epochs = 60;
  const auto r = baseline_mlp(parts.train, parts.valid, parts.test, c, OptimizerConfig{}, 0);
  EXPECT_LT(r.test_rmse, 0.05);
}

TEST(Baseline, DeterministicAndFinite) {
  SyntheticTaskSpec spec;
  spec.n = 500;
  spec.k_num = 5;
  spec.threshold_count = 4;
  spec.noise_sigma = 0.05;
  auto [data, pre] = fit_transform(to_raw_table(generate_synthetic(spec).data), {});
  const auto parts = split(data, {0.7, 0.15, 0.15}, 1);
  BaselineMlpConfig c;
  c.blocks = 2;
  c.hidden = 32;
  c.max_epochs = 5;
  const auto a = baseline_mlp(parts.train, parts.valid, parts.test, c, OptimizerConfig{}, 3);
  const auto b = baseline_mlp(parts.train, parts.valid, parts.test, c, OptimizerConfig{}, 3);
  EXPECT_TRUE(std::isfinite(a.test_rmse));
  EXPECT_EQ(a.test_predictions, b.test_predictions);
  EXPECT_EQ(a.test_rmse, rmse(a.test_predictions, parts.test.targets));
}

TEST(Baseline, FlatFeaturesOneHot) {
  TabularDataset d;
  d.num = Tensor<double>(1, 1, {0.5});
  d.cat = Tensor<std::uint32_t>(1, 1, {2});
  d.targets = {0};
  d.schema = {{"a", ColumnKind::numerical, 0}, {"c", ColumnKind::categorical, 3}, {"y", ColumnKind::target, 0}};
  EXPECT_EQ(flat_features(d), Tensor<double>(1, 4, {0.5, 0, 0, 1}));
}

TEST(Experiment, RunWritesArtifactsConsistently) {
  const fs::path dir = scratch("run");
  ExperimentConfig c = tiny_config(dir);
  c.run_baseline = true;
  c.baseline.blocks = 2;
  c.baseline.hidden = 16;
  c.baseline.max_epochs = 2;
  const json s = run_experiment(c);
  for (const char* f : {"config.json", "preprocessor.json", "metrics.jsonl", "pretrain.ckpt",
                        "finetune.ckpt", "predictions_test.jsonl", "summary.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  std::vector<double> y, p;
  std::ifstream in(dir / "predictions_test.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    const json r = json::parse(line);
    y.push_back(r["y_true"]);
    p.push_back(r["y_pred"]);
    EXPECT_TRUE(r.contains("y_pred_inverse"));
  }
  EXPECT_EQ(s["test_rmse"].get<double>(), rmse(p, y));
  EXPECT_EQ(s["n_test"].get<std::size_t>(), y.size());
  EXPECT_TRUE(s.contains("baseline_mlp"));

  std::ifstream m(dir / "metrics.jsonl");
  while (std::getline(m, line)) {
    const json r = json::parse(line);
    EXPECT_TRUE(r.contains("phase") && r.contains("epoch")) << line;
    EXPECT_EQ(r["config_hash"], c.hash());
  }
}

TEST(Experiment, AblationDegeneracyNeverTouchesGate) {
  ExperimentConfig c = tiny_config(scratch("plain"));
  c.pretrain.pretext = PretextKind::none;
  c.finetune.adaptive_reg = false;
  c.finetune.beta = 0.0;
  c.finetune.gamma = 0.0;
  const json s = run_experiment(c);
  EXPECT_EQ(s["gate_draws"].get<std::uint64_t>(), 0u);
  EXPECT_FALSE(fs::exists(fs::path(c.output_dir) / "pretrain.ckpt"));
}

TEST(Experiment, LoadRestoresFinetunedModel) {
  const fs::path dir = scratch("load");
  const ExperimentConfig c = tiny_config(dir);
  Experiment a(c);
  a.run();
  Experiment b(c, false);
  b.load(dir / "finetune.ckpt");
  const auto pa = predict(a.model(), a.data().split.test);
  const auto pb = predict(b.model(), b.data().split.test);
  EXPECT_EQ(pa, pb);
}

TEST(Experiment, ErrorsNameThePhase) {
  ExperimentConfig c = tiny_config(scratch("phase"));
  c.data.source = DataSourceKind::csv;
  c.data.csv_path = "/nonexistent/data.csv";
  c.data.schema_path = "/nonexistent/schema.json";
  try {
    Experiment e(c);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("data: ", 0), 0u) << e.what();
  }
}

TEST(Ablation, VariantsAndMedian) {
  EXPECT_EQ(ablation_variants({"apar", "wo_ap", "wo_ar", "fr", "op_div"}).size(), 5u);
  EXPECT_THROW(ablation_variants({"wo_everything"}), ConfigError);
  ExperimentConfig c;
  ablation_variants({"op_div"})[0].apply(c);
  EXPECT_EQ(c.pretrain.op, ArithmeticOp::div);
  ablation_variants({"wo_ar"})[0].apply(c);
  EXPECT_FALSE(c.finetune.adaptive_reg);
  EXPECT_EQ(c.finetune.beta, 0.0);
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_THROW(median({}), std::invalid_argument);
}

TEST(Ablation, SummaryCollectsEveryVariant) {
  const fs::path dir = scratch("ablate");
  AblationOptions o;
  o.variants = {"apar", "wo_ap", "wo_ar"};
  o.seeds = {0, 1};
  int calls = 0;
  o.on_run = [&](const std::string&, std::uint64_t, const json&) { ++calls; };
  const json s = run_ablation(tiny_config(dir), o);
  EXPECT_EQ(calls, 6);
  for (const char* v : {"apar", "wo_ap", "wo_ar"}) {
    EXPECT_EQ(s["variants"][v]["test_rmse"].size(), 2u);
    EXPECT_TRUE(s["variants"][v]["median_test_rmse"].is_number());
  }
  EXPECT_TRUE(fs::exists(dir / "ablation_summary.json"));
  EXPECT_TRUE(fs::exists(dir / "wo_ap" / "seed_1" / "summary.json"));
}

TEST(Ablation, DivisionSweepOnLabelsSpanningZero) {
  const fs::path dir = scratch("ops");
  fs::create_directories(dir);
  // Integer labels in [-2, 2]: about a fifth of all divisors are zero.
  {
    std::ofstream csv(dir / "data.csv");
    csv << "a,b,c,y\n";
    Rng rng(5);
    for (int i = 0; i < 400; ++i) {
      const double a = rng.uniform(-1, 1), b = rng.normal();
      csv << a << "," << b << "," << (b > 0 ? "p" : "q") << "," << std::lround(2 * a + 0.3 * b) << "\n";
    }
    std::ofstream schema(dir / "schema.json");
    schema << R"([{"name":"a","kind":"numerical"},{"name":"b","kind":"numerical"},)"
           << R"({"name":"c","kind":"categorical"},{"name":"y","kind":"target"}])";
  }
  ExperimentConfig c = tiny_config(dir / "runs");
  c.data.source = DataSourceKind::csv;
  c.data.csv_path = (dir / "data.csv").string();
  c.data.schema_path = (dir / "schema.json").string();
  AblationOptions o;
  o.variants = {"op_add", "op_sub", "op_mul", "op_div"};
  const json s = run_ablation(c, o);
  for (const char* v : {"op_add", "op_sub", "op_mul", "op_div"}) {
    const json& run = s["variants"][v]["runs"][0];
    ASSERT_EQ(run["status"], "ok") << v;
    EXPECT_EQ(run["pretrain"]["guard_warning"].get<bool>(), std::string(v) == "op_div") << v;
    EXPECT_TRUE(std::isfinite(run["test_rmse"].get<double>())) << v;
  }
}
