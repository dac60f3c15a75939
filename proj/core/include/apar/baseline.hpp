#pragma once

// Plain rectifier MLP on the flattened feature vector, trained with the same
// optimizer, schedule and early-stopping regime as the transformer.

#include <cstdint>
#include <string>
#include <vector>

#include "apar/metrics.hpp"
#include "apar/optimizer.hpp"
#include "apar/tabdata.hpp"

namespace apar {

struct BaselineMlpConfig {
  std::size_t blocks = 8;
  std::size_t hidden = 512;
  double lr = 5e-4;
  std::size_t batch_size = 256;
  std::size_t patience = 10;
  std::size_t max_epochs = 100;
  double lr_decay = 0.98;

  void validate() const;
};

template <typename T>
struct MlpParams {
  using value_type = T;

  std::vector<Tensor<T>> w;
  std::vector<Tensor<T>> b;

  template <typename F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      f("mlp.w" + std::to_string(i), w[i]);
      f("mlp.b" + std::to_string(i), b[i]);
    }
  }
};

// Numerical values followed by one-hot categorical ids (cardinality columns each).
Tensor<double> flat_features(const TabularDataset& data);

struct BaselineResult {
  double test_rmse = 0.0;
  double valid_rmse = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs = 0;
  std::vector<double> test_predictions;
};

BaselineResult baseline_mlp(const TabularDataset& train, const TabularDataset& valid,
                            const TabularDataset& test, const BaselineMlpConfig& config,
                            const OptimizerConfig& optimizer, std::uint64_t seed,
                            const MetricsSink& sink = {});

}  // namespace apar
