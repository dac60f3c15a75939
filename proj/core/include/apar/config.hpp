#pragma once

// Experiment configuration as one strict JSON document. Missing keys keep
// their defaults; unknown keys and mistyped values are ConfigErrors.

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "apar/baseline.hpp"
#include "apar/encoder.hpp"
#include "apar/finetune.hpp"
#include "apar/pretrain.hpp"
#include "apar/tabdata.hpp"

namespace apar {

enum class DataSourceKind { synthetic, csv };

struct DataConfig {
  DataSourceKind source = DataSourceKind::synthetic;
  SyntheticTaskSpec synthetic;
  std::string csv_path;
  std::string schema_path;
  SplitFractions split;
  PreprocessFlags preprocess;
};

struct ExperimentConfig {
  DataConfig data;
  EncoderConfig model;
  // Seeds inside these two are ignored; they derive from `seed`.
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  OptimizerConfig optimizer;
  bool run_baseline = false;
  BaselineMlpConfig baseline;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/apar";

  // Every field, before any compute.
  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& doc);
  // Digest of the canonical JSON without output_dir.
  std::string hash() const;

  // Phase configs with the shared optimizer and derived seeds filled in.
  PretrainConfig resolved_pretrain() const;
  FinetuneConfig resolved_finetune() const;
};

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

}  // namespace apar
