#include "apar/pretrain.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <stdexcept>

#include "apar/error.hpp"

namespace apar {
namespace {

constexpr std::size_t kRetryCap = 1000;

template <typename T>
Tensor<T> column(const std::vector<double>& values) {
  Tensor<T> t(values.size(), 1);
  for (std::size_t i = 0; i < values.size(); ++i) t[i] = static_cast<T>(values[i]);
  return t;
}

template <typename T>
ad::Var<T> arithmetic_forward(ParamBinder<T>& binder, const ModelParams<T>& model,
                              const TabularDataset& data, std::span<const IndexPair> pairs,
                              ArithmeticOp op, double epsilon, Rng* dropout_rng) {
  if (pairs.empty()) throw std::invalid_argument("pretrain: empty pair batch");
  const auto bb = bind_backbone(binder, model);
  const auto head = bind_head(binder, model.heads.pretrain, HeadKind::pretrain);
  std::vector<std::size_t> rows;
  rows.reserve(2 * pairs.size());
  for (const auto& [i, j] : pairs) {
    rows.push_back(i);
    rows.push_back(j);
  }
  const auto cls = embed_rows(bb, data, rows, dropout_rng);
  const auto joined = ad::reshape(cls, pairs.size(), 2 * cls.cols());
  const auto pred = mlp_forward(head, joined);
  return ad::mse(pred, column<T>(pair_targets(data, pairs, op, epsilon)));
}

template <typename T>
ad::Var<T> reconstruction_forward(ParamBinder<T>& binder, const ModelParams<T>& model,
                                  const PretextHeads<T>& heads, const TabularDataset& data,
                                  std::span<const std::size_t> rows,
                                  std::span<const std::uint8_t> mask, PretextKind kind,
                                  Rng* dropout_rng) {
  const std::size_t k = data.k();
  if (mask.size() != rows.size() * k) throw std::invalid_argument("pretext: mask size mismatch");
  const auto bb = bind_backbone(binder, model);
  auto& tape = binder.tape();
  const auto z = tokenize_batch(bb.tokenizer, data, rows);
  Tensor<T> keep(1, mask.size());
  Tensor<T> truth(rows.size(), k);
  for (std::size_t s = 0; s < mask.size(); ++s) {
    keep[s] = mask[s] ? T(0) : T(1);
    truth[s] = mask[s] ? T(1) : T(0);
  }
  const auto corrupted = ad::scale_rows(z, tape.constant(std::move(keep)));
  const auto cls = cls_rows(encode_batch(bb.encoder, corrupted, rows.size(), dropout_rng),
                            rows.size());
  std::vector<std::pair<T, ad::Var<T>>> terms;
  if (kind == PretextKind::fr || kind == PretextKind::fr_mr) {
    const Tensor<double> view = data.subset(rows).numeric_view();
    const auto recon = ad::linear(cls, binder.bind("pretext.fr.w", heads.fr_w),
                                  binder.bind("pretext.fr.b", heads.fr_b));
    terms.emplace_back(T(1), ad::mse(recon, view.template cast<T>()));
  }
  if (kind == PretextKind::mr || kind == PretextKind::fr_mr) {
    const auto logits = ad::linear(cls, binder.bind("pretext.mr.w", heads.mr_w),
                                   binder.bind("pretext.mr.b", heads.mr_b));
    terms.emplace_back(T(1), ad::bce(ad::sigmoid(logits), truth));
  }
  if (terms.empty()) throw std::invalid_argument("pretext: not a reconstruction pretext");
  return terms.size() == 1 ? terms[0].second : ad::weighted_sum(terms);
}

template <typename T>
Tensor<T> kaiming_matrix(std::size_t in, std::size_t out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in));
  Tensor<T> w(in, out);
  for (auto& v : w.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  return w;
}

// Pretext state shared by the training and validation passes.
struct PretextRunner {
  const PretrainConfig& config;
  PretextHeads<float> heads;

  double batch_loss(const ModelParams<float>& model, const TabularDataset& data,
                    std::span<const IndexPair> pairs, std::span<const std::size_t> rows,
                    std::span<const std::uint8_t> mask) const {
    ad::Tape<float> tape;
    ParamBinder<float> binder(tape);
    if (config.pretext == PretextKind::arithmetic) {
      return arithmetic_forward(binder, model, data, pairs, config.op, config.div_epsilon,
                                nullptr)
          .scalar();
    }
    return reconstruction_forward(binder, model, heads, data, rows, mask, config.pretext,
                                  nullptr)
        .scalar();
  }
};

std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  return rows;
}

void warn_guard(double rate, std::size_t epoch, const MetricsSink& sink) {
  std::cerr << "warning: division guard rejected " << rate * 100.0
            << "% of label draws (labels near zero); pre-training targets are skewed\n";
  if (sink) {
    sink({{"phase", "pretrain"},
          {"epoch", epoch},
          {"event", "division_guard_warning"},
          {"rejection_rate", rate}});
  }
}

}  // namespace

std::string to_string(ArithmeticOp op) {
  switch (op) {
    case ArithmeticOp::add: return "add";
    case ArithmeticOp::sub: return "sub";
    case ArithmeticOp::mul: return "mul";
    case ArithmeticOp::div: return "div";
  }
  return "?";
}

ArithmeticOp parse_arithmetic_op(const std::string& text) {
  if (text == "add") return ArithmeticOp::add;
  if (text == "sub") return ArithmeticOp::sub;
  if (text == "mul") return ArithmeticOp::mul;
  if (text == "div") return ArithmeticOp::div;
  throw ConfigError("unknown arithmetic op '" + text + "' (expected add, sub, mul or div)");
}

std::string to_string(PretextKind kind) {
  switch (kind) {
    case PretextKind::arithmetic: return "arith";
    case PretextKind::fr: return "fr";
    case PretextKind::mr: return "mr";
    case PretextKind::fr_mr: return "fr+mr";
    case PretextKind::none: return "none";
  }
  return "?";
}

PretextKind parse_pretext_kind(const std::string& text) {
  if (text == "arith") return PretextKind::arithmetic;
  if (text == "fr") return PretextKind::fr;
  if (text == "mr") return PretextKind::mr;
  if (text == "fr+mr") return PretextKind::fr_mr;
  if (text == "none") return PretextKind::none;
  throw ConfigError("unknown pretext '" + text + "' (expected arith, fr, mr, fr+mr or none)");
}

void PretrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("pretrain lr must be non-negative");
  if (batch_size == 0) throw ConfigError("pretrain batch size must be positive");
  if (patience == 0) throw ConfigError("pretrain patience must be at least 1");
  if (max_epochs == 0) throw ConfigError("pretrain max_epochs must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("pretrain lr decay must lie in (0, 1]");
  if (!(div_epsilon > 0.0)) throw ConfigError("division guard epsilon must be positive");
  if (!(corruption_rate >= 0.0 && corruption_rate <= 1.0)) {
    throw ConfigError("corruption rate must lie in [0, 1]");
  }
  if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) throw ConfigError("mask rate must lie in [0, 1]");
  if (!(warn_rejection_rate >= 0.0 && warn_rejection_rate <= 1.0)) {
    throw ConfigError("warn_rejection_rate must lie in [0, 1]");
  }
  optimizer.validate();
}

double arithmetic_target(double y_i, double y_j, ArithmeticOp op, double epsilon) {
  switch (op) {
    case ArithmeticOp::add: return y_i + y_j;
    case ArithmeticOp::sub: return y_i - y_j;
    case ArithmeticOp::mul: return y_i * y_j;
    case ArithmeticOp::div:
      if (!(std::fabs(y_j) >= epsilon)) {
        throw NumericError("division guard: |divisor| = " + std::to_string(std::fabs(y_j)) +
                           " is below epsilon " + std::to_string(epsilon));
      }
      return y_i / y_j;
  }
  throw std::invalid_argument("arithmetic_target: bad op");
}

PairSample sample_pairs(const TabularDataset& data, std::size_t count, ArithmeticOp op,
                        double epsilon, Rng& rng) {
  const std::size_t n = data.size();
  if (n == 0) throw DataError("sample_pairs: empty dataset");
  PairSample out;
  out.pairs.reserve(count);
  for (std::size_t p = 0; p < count; ++p) {
    const std::size_t i = rng.index(n);
    std::size_t j = rng.index(n);
    ++out.draws;
    if (op == ArithmeticOp::div) {
      std::size_t retries = 0;
      while (!(std::fabs(data.targets[j]) >= epsilon)) {
        ++out.rejections;
        if (++retries > kRetryCap) {
          throw NumericError("division guard: no label with |y| >= " + std::to_string(epsilon) +
                             " after 1000 redraws (labels concentrated at zero)");
        }
        j = rng.index(n);
        ++out.draws;
      }
    }
    out.pairs.emplace_back(i, j);
  }
  return out;
}

std::vector<double> pair_targets(const TabularDataset& data, std::span<const IndexPair> pairs,
                                 ArithmeticOp op, double epsilon) {
  std::vector<double> y;
  y.reserve(pairs.size());
  for (const auto& [i, j] : pairs) {
    y.push_back(arithmetic_target(data.targets.at(i), data.targets.at(j), op, epsilon));
  }
  return y;
}

double pretext_mse(std::span<const double> targets, std::span<const double> predictions) {
  if (targets.empty() || targets.size() != predictions.size()) {
    throw std::invalid_argument("pretext_mse: size mismatch or empty input");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double e = targets[i] - predictions[i];
    acc += e * e;
  }
  return acc / static_cast<double>(targets.size());
}

template <typename T>
StepResult<T> pretrain_step(const ModelParams<T>& model, const TabularDataset& data,
                            std::span<const IndexPair> pairs, ArithmeticOp op, double epsilon,
                            Rng* dropout_rng) {
  ad::Tape<T> tape;
  ParamBinder<T> binder(tape);
  const auto loss = arithmetic_forward(binder, model, data, pairs, op, epsilon, dropout_rng);
  tape.backward(loss);
  return {static_cast<double>(loss.scalar()), binder.gradients()};
}

template <typename T>
PretextHeads<T> init_pretext_heads(std::size_t d, std::size_t k, Rng& rng) {
  return {kaiming_matrix<T>(d, k, rng), Tensor<T>(1, k), kaiming_matrix<T>(d, k, rng),
          Tensor<T>(1, k)};
}

std::vector<std::uint8_t> draw_corruption_mask(std::size_t slots, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("corruption rate must lie in [0, 1]");
  std::vector<std::uint8_t> mask(slots);
  for (auto& m : mask) m = rng.bernoulli(rate) ? 1 : 0;
  return mask;
}

template <typename T>
StepResult<T> reconstruction_step(const ModelParams<T>& model, const PretextHeads<T>& heads,
                                  const TabularDataset& data, std::span<const std::size_t> rows,
                                  std::span<const std::uint8_t> mask, PretextKind kind,
                                  Rng* dropout_rng) {
  ad::Tape<T> tape;
  ParamBinder<T> binder(tape);
  const auto loss =
      reconstruction_forward(binder, model, heads, data, rows, mask, kind, dropout_rng);
  tape.backward(loss);
  return {static_cast<double>(loss.scalar()), binder.gradients()};
}

namespace {

// Corrupted-input [CLS] states in eval mode, plus the mask that produced them.
std::pair<Tensor<double>, std::vector<std::uint8_t>> corrupted_cls(
    const TabularDataset& data, std::span<const std::size_t> rows, double rate,
    const ModelParams<double>& model, Rng& rng) {
  auto mask = draw_corruption_mask(rows.size() * data.k(), rate, rng);
  ad::Tape<double> tape;
  ParamBinder<double> binder(tape);
  const auto bb = bind_backbone(binder, model);
  const auto z = tokenize_batch(bb.tokenizer, data, rows);
  Tensor<double> keep(1, mask.size());
  for (std::size_t s = 0; s < mask.size(); ++s) keep[s] = mask[s] ? 0.0 : 1.0;
  const auto corrupted = ad::scale_rows(z, tape.constant(std::move(keep)));
  auto cls = cls_rows(encode_batch(bb.encoder, corrupted, rows.size(), nullptr), rows.size());
  return {cls.value(), std::move(mask)};
}

void check_decoder_output(const Tensor<double>& out, std::size_t rows, std::size_t k) {
  if (out.rows() != rows || out.cols() != k) {
    throw std::invalid_argument("pretext decoder must return rows x k values");
  }
}

}  // namespace

double feature_reconstruction_loss(const TabularDataset& data, std::span<const std::size_t> rows,
                                   double rate, const ModelParams<double>& model,
                                   const FeatureDecoder& decoder, Rng& rng) {
  const auto [cls, mask] = corrupted_cls(data, rows, rate, model, rng);
  const Tensor<double> recon = decoder(cls, rows);
  check_decoder_output(recon, rows.size(), data.k());
  const Tensor<double> truth = data.subset(rows).numeric_view();
  return pretext_mse(truth.values(), recon.values());
}

double mask_reconstruction_loss(const TabularDataset& data, std::span<const std::size_t> rows,
                                double rate, const ModelParams<double>& model,
                                const FeatureDecoder& predictor, Rng& rng) {
  const auto [cls, mask] = corrupted_cls(data, rows, rate, model, rng);
  const Tensor<double> prob = predictor(cls, rows);
  check_decoder_output(prob, rows.size(), data.k());
  double acc = 0.0;
  for (std::size_t s = 0; s < mask.size(); ++s) {
    const double p = std::clamp(prob[s], 1e-12, 1.0 - 1e-12);
    acc -= mask[s] ? std::log(p) : std::log1p(-p);
  }
  return acc / static_cast<double>(mask.size());
}

double arithmetic_validation_loss(const ModelParams<float>& model, const TabularDataset& valid,
                                  const PretrainConfig& config) {
  Rng rng(config.seed, "valid_pairs");
  const auto pairs = sample_pairs(valid, valid.size(), config.op, config.div_epsilon, rng).pairs;
  double total = 0.0;
  for (std::size_t start = 0; start < pairs.size(); start += config.batch_size) {
    const std::size_t len = std::min(config.batch_size, pairs.size() - start);
    ad::Tape<float> tape;
    ParamBinder<float> binder(tape);
    const auto loss = arithmetic_forward(binder, model, valid,
                                         std::span(pairs).subspan(start, len), config.op,
                                         config.div_epsilon, nullptr);
    total += static_cast<double>(loss.scalar()) * static_cast<double>(len);
  }
  return total / static_cast<double>(pairs.size());
}

PretrainResult pretrain_loop(ModelParams<float>& model, const TabularDataset& train,
                             const TabularDataset& valid, const PretrainConfig& config,
                             const MetricsSink& sink) {
  config.validate();
  PretrainResult result;
  if (config.pretext == PretextKind::none) return result;
  if (train.size() == 0 || valid.size() == 0) throw DataError("pretrain: empty split");

  const bool arithmetic = config.pretext == PretextKind::arithmetic;
  const std::size_t k = train.k();
  const double rate = config.pretext == PretextKind::mr ? config.mask_rate : config.corruption_rate;
  Rng head_rng(config.seed, "pretext_heads");
  PretextRunner runner{config, init_pretext_heads<float>(model.encoder.config.d, k, head_rng)};

  // Fixed validation pairs or masks.
  std::vector<IndexPair> valid_pairs;
  std::vector<std::uint8_t> valid_mask;
  const std::vector<std::size_t> valid_rows = iota_rows(valid.size());
  if (arithmetic) {
    Rng rng(config.seed, "valid_pairs");
    auto sample = sample_pairs(valid, valid.size(), config.op, config.div_epsilon, rng);
    result.draws += sample.draws;
    result.rejections += sample.rejections;
    valid_pairs = std::move(sample.pairs);
  } else {
    Rng rng(config.seed, "valid_mask");
    valid_mask = draw_corruption_mask(valid.size() * k, rate, rng);
  }

  auto validation_loss = [&]() {
    double total = 0.0;
    const std::size_t n = arithmetic ? valid_pairs.size() : valid_rows.size();
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, n - start);
      if (arithmetic) {
        total += runner.batch_loss(model, valid, std::span(valid_pairs).subspan(start, len), {},
                                   {}) *
                 static_cast<double>(len);
      } else {
        total += runner.batch_loss(model, valid, {},
                                   std::span(valid_rows).subspan(start, len),
                                   std::span(valid_mask).subspan(start * k, len * k)) *
                 static_cast<double>(len);
      }
    }
    return total / static_cast<double>(n);
  };

  Rng pair_rng(config.seed, "pairs");
  Rng mask_rng(config.seed, "pretext_mask");
  Rng dropout_rng(config.seed, "pretrain_dropout");
  Rng order_rng(config.seed, "pretext_order");
  OptimizerState<float> opt(config.optimizer);
  const std::size_t per_epoch = config.pairs_per_epoch > 0 ? config.pairs_per_epoch : train.size();

  ModelParams<float> best = model;
  result.best_valid_loss = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const double lr = scheduled_lr(config.lr, epoch - 1, config.lr_decay);
    double train_total = 0.0;
    std::size_t seen = 0;
    double epoch_rejection = 0.0;

    auto params = param_list(model);
    auto head_params = param_list(runner.heads);
    params.insert(params.end(), head_params.begin(), head_params.end());

    if (arithmetic) {
      const auto sample = sample_pairs(train, per_epoch, config.op, config.div_epsilon, pair_rng);
      result.draws += sample.draws;
      result.rejections += sample.rejections;
      epoch_rejection = sample.rejection_rate();
      for (std::size_t start = 0; start < sample.pairs.size(); start += config.batch_size) {
        const std::size_t len = std::min(config.batch_size, sample.pairs.size() - start);
        const auto step = pretrain_step(model, train, std::span(sample.pairs).subspan(start, len),
                                        config.op, config.div_epsilon, &dropout_rng);
        optimizer_step(params, step.grads, opt, lr);
        train_total += step.loss * static_cast<double>(len);
        seen += len;
      }
    } else {
      std::vector<std::size_t> rows(per_epoch);
      for (auto& r : rows) r = order_rng.index(train.size());
      for (std::size_t start = 0; start < rows.size(); start += config.batch_size) {
        const std::size_t len = std::min(config.batch_size, rows.size() - start);
        const auto mask = draw_corruption_mask(len * k, rate, mask_rng);
        const auto step =
            reconstruction_step(model, runner.heads, train, std::span(rows).subspan(start, len),
                                mask, config.pretext, &dropout_rng);
        optimizer_step(params, step.grads, opt, lr);
        train_total += step.loss * static_cast<double>(len);
        seen += len;
      }
    }

    const double overall_rejection =
        result.draws == 0 ? 0.0
                          : static_cast<double>(result.rejections) / static_cast<double>(result.draws);
    if (arithmetic && !result.guard_warning &&
        std::max(epoch_rejection, overall_rejection) > config.warn_rejection_rate) {
      result.guard_warning = true;
      warn_guard(std::max(epoch_rejection, overall_rejection), epoch, sink);
    }

    const double valid_loss = validation_loss();
    if (!std::isfinite(valid_loss)) {
      throw NumericError("pretrain: non-finite validation loss at epoch " + std::to_string(epoch));
    }
    PretrainEpoch rec{epoch, train_total / static_cast<double>(seen), valid_loss, lr,
                      epoch_rejection};
    result.history.push_back(rec);
    if (sink) {
      sink({{"phase", "pretrain"},
            {"epoch", rec.epoch},
            {"train_loss", rec.train_loss},
            {"valid_loss", rec.valid_loss},
            {"lr", rec.lr},
            {"pretext", to_string(config.pretext)},
            {"rejection_rate", rec.rejection_rate}});
    }

    if (valid_loss < result.best_valid_loss) {
      result.best_valid_loss = valid_loss;
      result.best_epoch = epoch;
      best = model;
      bad_epochs = 0;
    } else if (++bad_epochs >= config.patience) {
      break;
    }
  }
  model = std::move(best);
  return result;
}

#define APAR_INSTANTIATE_PRETRAIN(T)                                                       \
  template StepResult<T> pretrain_step(const ModelParams<T>&, const TabularDataset&,      \
                                       std::span<const IndexPair>, ArithmeticOp, double, Rng*); \
  template PretextHeads<T> init_pretext_heads<T>(std::size_t, std::size_t, Rng&);          \
  template StepResult<T> reconstruction_step(const ModelParams<T>&, const PretextHeads<T>&, \
                                             const TabularDataset&,                        \
                                             std::span<const std::size_t>,                 \
                                             std::span<const std::uint8_t>, PretextKind, Rng*);

APAR_INSTANTIATE_PRETRAIN(float)
APAR_INSTANTIATE_PRETRAIN(double)

}  // namespace apar
