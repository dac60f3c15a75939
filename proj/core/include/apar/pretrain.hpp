#pragma once

// Arithmetic-aware pre-training over sample pairs, and the feature / mask
// reconstruction pretexts used for ablations.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "apar/metrics.hpp"
#include "apar/model.hpp"
#include "apar/optimizer.hpp"

namespace apar {

enum class ArithmeticOp { add, sub, mul, div };
enum class PretextKind { arithmetic, fr, mr, fr_mr, none };

std::string to_string(ArithmeticOp op);
ArithmeticOp parse_arithmetic_op(const std::string& text);  // add|sub|mul|div
std::string to_string(PretextKind kind);
PretextKind parse_pretext_kind(const std::string& text);  // arith|fr|mr|fr+mr|none

struct PretrainConfig {
  PretextKind pretext = PretextKind::arithmetic;
  ArithmeticOp op = ArithmeticOp::add;
  double lr = 1e-3;
  std::size_t batch_size = 256;
  std::size_t patience = 10;
  std::size_t max_epochs = 100;
  double lr_decay = 0.98;
  // 0 selects the training-set size.
  std::size_t pairs_per_epoch = 0;
  double div_epsilon = 1e-3;
  double corruption_rate = 0.15;
  double mask_rate = 0.15;
  // Division-guard rejection rate above which a warning is emitted.
  double warn_rejection_rate = 0.1;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;

  void validate() const;
};

using IndexPair = std::pair<std::size_t, std::size_t>;

// y_i op y_j. For div, throws NumericError when |y_j| < epsilon.
double arithmetic_target(double y_i, double y_j, ArithmeticOp op, double epsilon = 1e-3);

struct PairSample {
  std::vector<IndexPair> pairs;
  std::size_t draws = 0;       // second-index draws, rejected ones included
  std::size_t rejections = 0;  // draws refused by the division guard

  double rejection_rate() const {
    return draws == 0 ? 0.0 : static_cast<double>(rejections) / static_cast<double>(draws);
  }
};

// i and j uniform over [0, n) with replacement. For div, j is redrawn while
// |y_j| < epsilon, at most 1000 times per pair (NumericError after that).
PairSample sample_pairs(const TabularDataset& data, std::size_t count, ArithmeticOp op,
                        double epsilon, Rng& rng);

std::vector<double> pair_targets(const TabularDataset& data, std::span<const IndexPair> pairs,
                                 ArithmeticOp op, double epsilon);

// Mean squared error between pretext targets and head outputs.
double pretext_mse(std::span<const double> targets, std::span<const double> predictions);

template <typename T>
struct StepResult {
  double loss = 0.0;
  GradientSet<T> grads;
};

// Each pair is encoded, the two [CLS] states are concatenated and the
// pretrain head regresses y_i op y_j. Gradients cover tokenizer, encoder and
// the pretrain head. Dropout is active only when dropout_rng is set.
template <typename T>
StepResult<T> pretrain_step(const ModelParams<T>& model, const TabularDataset& data,
                            std::span<const IndexPair> pairs, ArithmeticOp op, double epsilon,
                            Rng* dropout_rng);

// Linear per-feature heads on the [CLS] state; discarded after pre-training.
template <typename T>
struct PretextHeads {
  using value_type = T;

  Tensor<T> fr_w, fr_b;  // d x k, 1 x k: reconstructed feature values
  Tensor<T> mr_w, mr_b;  // d x k, 1 x k: mask logits

  template <typename F>
  void visit(F&& f) {
    f(std::string("pretext.fr.w"), fr_w);
    f(std::string("pretext.fr.b"), fr_b);
    f(std::string("pretext.mr.w"), mr_w);
    f(std::string("pretext.mr.b"), mr_b);
  }
};

template <typename T>
PretextHeads<T> init_pretext_heads(std::size_t d, std::size_t k, Rng& rng);

// One flag per feature slot; 1 marks a corrupted (zeroed) embedding.
std::vector<std::uint8_t> draw_corruption_mask(std::size_t slots, double rate, Rng& rng);

// Loss of the fr, mr or fr+mr pretext for a batch under a given mask of
// rows.size() * k slots. fr+mr sums the two losses.
template <typename T>
StepResult<T> reconstruction_step(const ModelParams<T>& model, const PretextHeads<T>& heads,
                                  const TabularDataset& data, std::span<const std::size_t> rows,
                                  std::span<const std::uint8_t> mask, PretextKind kind,
                                  Rng* dropout_rng);

// Maps [CLS] states (rows.size() x d) to rows.size() x k outputs.
using FeatureDecoder =
    std::function<Tensor<double>(const Tensor<double>& cls, std::span<const std::size_t> rows)>;

// Corrupts embeddings at `rate`, encodes without dropout and scores the
// decoder's reconstruction of the original feature values (numeric view).
double feature_reconstruction_loss(const TabularDataset& data, std::span<const std::size_t> rows,
                                   double rate, const ModelParams<double>& model,
                                   const FeatureDecoder& decoder, Rng& rng);

// Same corruption; the predictor returns mask probabilities, scored by mean
// binary cross-entropy against the true mask.
double mask_reconstruction_loss(const TabularDataset& data, std::span<const std::size_t> rows,
                                double rate, const ModelParams<double>& model,
                                const FeatureDecoder& predictor, Rng& rng);

struct PretrainEpoch {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double lr = 0.0;
  double rejection_rate = 0.0;
};

struct PretrainResult {
  std::vector<PretrainEpoch> history;
  std::size_t best_epoch = 0;
  double best_valid_loss = 0.0;
  bool guard_warning = false;
  std::size_t draws = 0;
  std::size_t rejections = 0;
};

// Epoch loop with fixed validation pairs (or masks), per-epoch lr decay and
// early stopping. On return `model` holds the best-validation snapshot.
PretrainResult pretrain_loop(ModelParams<float>& model, const TabularDataset& train,
                             const TabularDataset& valid, const PretrainConfig& config,
                             const MetricsSink& sink = {});

// Arithmetic pretext loss on the fixed validation pairs pretrain_loop uses.
double arithmetic_validation_loss(const ModelParams<float>& model, const TabularDataset& valid,
                                  const PretrainConfig& config);

}  // namespace apar
