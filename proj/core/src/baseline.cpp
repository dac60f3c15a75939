#include "apar/baseline.hpp"

#include <cmath>
#include <limits>

#include "apar/autodiff.hpp"
#include "apar/error.hpp"
#include "apar/params.hpp"

namespace apar {
namespace {

MlpParams<float> init_mlp(std::size_t in, const BaselineMlpConfig& config, Rng& rng) {
  MlpParams<float> p;
  std::size_t width = in;
  for (std::size_t i = 0; i <= config.blocks; ++i) {
    const std::size_t out = i == config.blocks ? 1 : config.hidden;
    const double stddev = std::sqrt(2.0 / static_cast<double>(width));
    Tensor<float> w(width, out);
    for (auto& v : w.values()) v = static_cast<float>(rng.normal(0.0, stddev));
    p.w.push_back(std::move(w));
    p.b.emplace_back(1, out);
    width = out;
  }
  return p;
}

ad::Var<float> forward(ParamBinder<float>& binder, MlpParams<float>& p, ad::Var<float> x) {
  for (std::size_t i = 0; i < p.w.size(); ++i) {
    x = ad::linear(x, binder.bind("mlp.w" + std::to_string(i), p.w[i]),
                   binder.bind("mlp.b" + std::to_string(i), p.b[i]));
    if (i + 1 < p.w.size()) x = ad::relu(x);
  }
  return x;
}

Tensor<float> gather(const Tensor<double>& x, std::span<const std::size_t> rows) {
  Tensor<float> out(rows.size(), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < x.cols(); ++c) out(i, c) = static_cast<float>(x(rows[i], c));
  }
  return out;
}

std::vector<double> predict_mlp(MlpParams<float>& p, const Tensor<double>& x,
                                std::size_t batch_size) {
  std::vector<double> out;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < x.rows(); start += batch_size) {
    const std::size_t len = std::min(batch_size, x.rows() - start);
    rows.resize(len);
    for (std::size_t i = 0; i < len; ++i) rows[i] = start + i;
    ad::Tape<float> tape;
    ParamBinder<float> binder(tape);
    const auto y = forward(binder, p, tape.constant(gather(x, rows)));
    for (float v : y.value().values()) out.push_back(v);
  }
  return out;
}

}  // namespace

void BaselineMlpConfig::validate() const {
  if (blocks == 0 || hidden == 0) throw ConfigError("baseline MLP needs blocks and hidden > 0");
  if (!(lr >= 0.0)) throw ConfigError("baseline lr must be non-negative");
  if (batch_size == 0 || patience == 0 || max_epochs == 0) {
    throw ConfigError("baseline batch size, patience and max_epochs must be positive");
  }
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("baseline lr decay must lie in (0, 1]");
}

Tensor<double> flat_features(const TabularDataset& data) {
  const auto cards = data.cardinalities();
  std::size_t width = data.k_num();
  for (auto c : cards) width += c;
  Tensor<double> x(data.size(), width);
  for (std::size_t r = 0; r < data.size(); ++r) {
    std::size_t col = 0;
    for (std::size_t j = 0; j < data.k_num(); ++j) x(r, col++) = data.num(r, j);
    for (std::size_t j = 0; j < cards.size(); ++j) {
      const std::uint32_t id = data.cat(r, j);
      if (id >= cards[j]) throw DataError("categorical id out of range in baseline features");
      x(r, col + id) = 1.0;
      col += cards[j];
    }
  }
  return x;
}

BaselineResult baseline_mlp(const TabularDataset& train, const TabularDataset& valid,
                            const TabularDataset& test, const BaselineMlpConfig& config,
                            const OptimizerConfig& optimizer, std::uint64_t seed,
                            const MetricsSink& sink) {
  config.validate();
  if (train.size() == 0 || valid.size() == 0 || test.size() == 0) {
    throw DataError("baseline MLP: empty split");
  }
  const Tensor<double> x_train = flat_features(train);
  const Tensor<double> x_valid = flat_features(valid);
  const Tensor<double> x_test = flat_features(test);
  Rng init_rng(seed, "baseline_init");
  Rng order_rng(seed, "baseline_order");
  MlpParams<float> params = init_mlp(x_train.cols(), config, init_rng);
  double mean = 0.0;
  for (double y : train.targets) mean += y;
  params.b.back()[0] = static_cast<float>(mean / static_cast<double>(train.size()));
  MlpParams<float> best = params;
  OptimizerState<float> opt(optimizer);

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  BaselineResult result;
  result.valid_rmse = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const double lr = scheduled_lr(config.lr, epoch - 1, config.lr_decay);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.index(i)]);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, order.size() - start);
      const auto rows = std::span<const std::size_t>(order).subspan(start, len);
      Tensor<float> y(len, 1);
      for (std::size_t i = 0; i < len; ++i) y[i] = static_cast<float>(train.targets[rows[i]]);
      ad::Tape<float> tape;
      ParamBinder<float> binder(tape);
      const auto loss = ad::mse(forward(binder, params, tape.constant(gather(x_train, rows))), y);
      tape.backward(loss);
      optimizer_step(param_list(params), binder.gradients(), opt, lr);
      total += static_cast<double>(loss.scalar()) * static_cast<double>(len);
    }
    const double valid_rmse = rmse(predict_mlp(params, x_valid, config.batch_size), valid.targets);
    if (!std::isfinite(valid_rmse)) throw NumericError("baseline MLP: non-finite validation RMSE");
    result.epochs = epoch;
    if (sink) {
      sink({{"phase", "baseline_mlp"},
            {"epoch", epoch},
            {"train_loss", total / static_cast<double>(order.size())},
            {"valid_rmse", valid_rmse},
            {"lr", lr}});
    }
    if (valid_rmse < result.valid_rmse) {
      result.valid_rmse = valid_rmse;
      result.best_epoch = epoch;
      best = params;
      bad_epochs = 0;
    } else if (++bad_epochs >= config.patience) {
      break;
    }
  }
  result.test_predictions = predict_mlp(best, x_test, config.batch_size);
  result.test_rmse = rmse(result.test_predictions, test.targets);
  return result;
}

}  // namespace apar
