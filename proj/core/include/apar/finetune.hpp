#pragma once

// Adaptive-regularized fine-tuning: each batch is encoded twice, once as is
// and once with its feature embeddings scaled by a relaxed correlated gate.
// The shared finetune head scores both paths against the target.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "apar/copula_gate.hpp"
#include "apar/metrics.hpp"
#include "apar/model.hpp"
#include "apar/optimizer.hpp"

namespace apar {

enum class GateSampling { per_batch, per_sample };

std::string to_string(GateSampling mode);
GateSampling parse_gate_sampling(const std::string& text);

struct FinetuneConfig {
  double alpha = 1.0;
  double beta = 0.1;
  double gamma = 0.05;
  double tau = 0.5;
  // false drops the gated path and the gate entirely.
  bool adaptive_reg = true;
  GateSampling gate_sampling = GateSampling::per_batch;
  double lr = 5e-4;
  std::size_t batch_size = 256;
  std::size_t patience = 10;
  std::size_t max_epochs = 100;
  double lr_decay = 0.98;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;

  void validate() const;
};

struct LossComponents {
  double target = 0.0;    // mean (y - y_hat)^2
  double reg = 0.0;       // mean (y - y_tilde)^2
  double sparsity = 0.0;  // sum_j pi_j
  double total = 0.0;     // alpha * target + beta * reg + gamma * sparsity
};

// Value-level loss from already computed predictions.
LossComponents finetune_loss_components(std::span<const double> targets,
                                        std::span<const double> y_hat,
                                        std::span<const double> y_tilde,
                                        std::span<const double> pi, double alpha, double beta,
                                        double gamma);

template <typename T>
struct FinetuneStepResult {
  LossComponents components;
  GradientSet<T> grads;
  std::vector<double> y_hat;
  std::vector<double> y_tilde;  // empty without adaptive regularization
};

// One batch. `gate` and `corr` may be null only when adaptive_reg is off.
// Gradients cover tokenizer, encoder, finetune head and gate logits.
template <typename T>
FinetuneStepResult<T> finetune_step(const ModelParams<T>& model, const GateParams<T>* gate,
                                    const CorrelationModel* corr, const TabularDataset& data,
                                    std::span<const std::size_t> rows,
                                    const FinetuneConfig& config, Rng& gate_rng,
                                    Rng* dropout_rng);

// Unaugmented path without dropout, in the scaled target space.
template <typename T>
std::vector<double> predict(const ModelParams<T>& model, const TabularDataset& data,
                            std::size_t batch_size = 256);

struct FinetuneEpoch {
  std::size_t epoch = 0;  // 1-based
  LossComponents loss;    // batch-size weighted means over the epoch
  double valid_rmse = 0.0;
  double mean_pi = 0.0;
  double lr = 0.0;
};

struct FinetuneStepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  LossComponents loss;
};

struct FinetuneResult {
  std::vector<FinetuneEpoch> history;
  std::vector<FinetuneStepRecord> steps;
  std::size_t best_epoch = 0;
  double best_valid_rmse = 0.0;
  std::optional<GateParams<float>> gate;
  std::optional<CorrelationModel> correlation;
};

struct FinetuneLoopOptions {
  // Stops after this many optimizer steps (0: no limit).
  std::size_t max_steps = 0;
  // Called after every step with the current mean selection probability.
  std::function<void(std::size_t step, double mean_pi)> on_step;
};

// Correlation is estimated once from `train`; gate logits start at zero.
// Validation monitors unaugmented RMSE. On return `model` holds the best
// snapshot and result.gate the matching gate.
FinetuneResult finetune_loop(ModelParams<float>& model, const TabularDataset& train,
                             const TabularDataset& valid, const FinetuneConfig& config,
                             const MetricsSink& sink = {}, const FinetuneLoopOptions& options = {});

}  // namespace apar
