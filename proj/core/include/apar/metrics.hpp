#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace apar {

// Receives one metrics record per call.
using MetricsSink = std::function<void(const nlohmann::json&)>;

// sqrt(mean((y - y_hat)^2)). Throws std::invalid_argument on empty or
// mismatched input.
double rmse(std::span<const double> predictions, std::span<const double> targets);

// scores[method][dataset], lower is better. Rank 1 is best; ties take the mean
// of the tied positions. Dataset columns holding a NaN are skipped.
std::vector<double> average_rank(const std::vector<std::vector<double>>& scores);

// Append-only JSON-lines file. Every record gets the run's config hash.
class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& path, std::string config_hash);

  void write(nlohmann::json record);
  MetricsSink sink();
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::string config_hash_;
  std::ofstream out_;
};

}  // namespace apar
