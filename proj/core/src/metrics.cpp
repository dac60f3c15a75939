#include "apar/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "apar/error.hpp"

namespace apar {

double rmse(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.empty()) throw std::invalid_argument("rmse: empty input");
  if (predictions.size() != targets.size()) {
    throw std::invalid_argument("rmse: " + std::to_string(predictions.size()) +
                                " predictions for " + std::to_string(targets.size()) +
                                " targets");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double e = targets[i] - predictions[i];
    acc += e * e;
  }
  return std::sqrt(acc / static_cast<double>(predictions.size()));
}

std::vector<double> average_rank(const std::vector<std::vector<double>>& scores) {
  if (scores.empty() || scores[0].empty()) throw std::invalid_argument("average_rank: empty table");
  const std::size_t methods = scores.size();
  const std::size_t datasets = scores[0].size();
  for (const auto& row : scores) {
    if (row.size() != datasets) throw std::invalid_argument("average_rank: ragged table");
  }
  std::vector<double> total(methods, 0.0);
  std::size_t used = 0;
  std::vector<std::size_t> order(methods);
  for (std::size_t d = 0; d < datasets; ++d) {
    bool complete = true;
    for (std::size_t m = 0; m < methods; ++m) complete = complete && !std::isnan(scores[m][d]);
    if (!complete) continue;
    ++used;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a][d] < scores[b][d]; });
    for (std::size_t i = 0; i < methods;) {
      std::size_t j = i;
      while (j + 1 < methods && scores[order[j + 1]][d] == scores[order[i]][d]) ++j;
      const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t p = i; p <= j; ++p) total[order[p]] += rank;
      i = j + 1;
    }
  }
  if (used == 0) throw std::invalid_argument("average_rank: no complete dataset column");
  for (auto& t : total) t /= static_cast<double>(used);
  return total;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path, std::string config_hash)
    : path_(path), config_hash_(std::move(config_hash)), out_(path, std::ios::app) {
  if (!out_) throw DataError("cannot open metrics file " + path.string());
}

void MetricsWriter::write(nlohmann::json record) {
  record["config_hash"] = config_hash_;
  const std::string line = record.dump() + "\n";
  out_.write(line.data(), static_cast<std::streamsize>(line.size()));
  out_.flush();
}

MetricsSink MetricsWriter::sink() {
  return [this](const nlohmann::json& r) { write(r); };
}

}  // namespace apar
