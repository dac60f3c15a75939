#pragma once

// Run orchestration: data preparation, the optional pretext phase,
// fine-tuning, evaluation, checkpoints and the ablation matrix.
//
// A run directory holds config.json, preprocessor.json, metrics.jsonl,
// pretrain.ckpt, finetune.ckpt, predictions_test.jsonl and summary.json.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apar/checkpoint.hpp"
#include "apar/config.hpp"
#include "apar/metrics.hpp"

namespace apar {

struct PreparedData {
  TabularDataset full;
  Preprocessor preprocessor;
  DatasetSplit split;
};

// Loads or generates the dataset, fits preprocessing and splits with the
// "split" substream of the master seed.
PreparedData prepare_data(const ExperimentConfig& config);

class Experiment {
 public:
  // Validates the config, prepares data and the output directory. With
  // fresh_metrics the metrics file is truncated; otherwise records append.
  explicit Experiment(ExperimentConfig config, bool fresh_metrics = true);

  // Each phase names itself in any error it propagates.
  PretrainResult pretrain();
  FinetuneResult finetune();
  // Test-split predictions, evaluation records and summary.json.
  nlohmann::json evaluate();
  // pretrain (unless the pretext is none), finetune, evaluate.
  nlohmann::json run();

  // Restores model (and gate, when present) from a checkpoint of this schema.
  void load(const std::filesystem::path& checkpoint);

  const ExperimentConfig& config() const { return config_; }
  const PreparedData& data() const { return data_; }
  const ModelParams<float>& model() const { return model_; }
  const std::filesystem::path& dir() const { return dir_; }

 private:
  nlohmann::json checkpoint_metadata(const std::string& phase, std::size_t epoch,
                                     double metric) const;

  ExperimentConfig config_;
  std::string hash_;
  std::filesystem::path dir_;
  PreparedData data_;
  ModelParams<float> model_;
  std::optional<GateParams<float>> gate_;
  std::optional<CorrelationModel> corr_;
  std::unique_ptr<MetricsWriter> metrics_;
  std::optional<PretrainResult> pretrain_result_;
  std::optional<FinetuneResult> finetune_result_;
  std::uint64_t gate_draws_at_start_ = 0;
};

nlohmann::json run_experiment(const ExperimentConfig& config);

struct AblationVariant {
  std::string name;
  std::function<void(ExperimentConfig&)> apply;
};

// Known names: apar, wo_ap, wo_ar, fr, mr, fr+mr, op_add, op_sub, op_mul,
// op_div. Unknown names are ConfigErrors.
std::vector<AblationVariant> ablation_variants(const std::vector<std::string>& names);

struct AblationOptions {
  std::vector<std::string> variants{"apar", "wo_ap", "wo_ar"};
  std::vector<std::uint64_t> seeds{0};
  // Progress callback: variant, seed, run summary.
  std::function<void(const std::string&, std::uint64_t, const nlohmann::json&)> on_run;
};

// Runs every variant for every seed under <output_dir>/<variant>/seed_<s>.
// A run that fails numerically is recorded with status "failed" instead of
// aborting the sweep. Writes <output_dir>/ablation_summary.json.
nlohmann::json run_ablation(const ExperimentConfig& base, const AblationOptions& options);

double median(std::vector<double> values);

}  // namespace apar
