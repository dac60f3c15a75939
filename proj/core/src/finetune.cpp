#include "apar/finetune.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "apar/error.hpp"

namespace apar {
namespace {

template <typename T>
Tensor<T> target_column(const TabularDataset& data, std::span<const std::size_t> rows) {
  Tensor<T> y(rows.size(), 1);
  for (std::size_t i = 0; i < rows.size(); ++i) y[i] = static_cast<T>(data.targets.at(rows[i]));
  return y;
}

template <typename T>
std::vector<double> to_doubles(const Tensor<T>& t) {
  return {t.values().begin(), t.values().end()};
}

double mean_sq(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

nlohmann::json loss_json(const LossComponents& c) {
  return {{"L_target", c.target}, {"L_reg", c.reg}, {"L_sparsity", c.sparsity}, {"L_AR", c.total}};
}

}  // namespace

std::string to_string(GateSampling mode) {
  return mode == GateSampling::per_batch ? "per_batch" : "per_sample";
}

GateSampling parse_gate_sampling(const std::string& text) {
  if (text == "per_batch") return GateSampling::per_batch;
  if (text == "per_sample") return GateSampling::per_sample;
  throw ConfigError("unknown gate_sampling '" + text + "' (expected per_batch or per_sample)");
}

void FinetuneConfig::validate() const {
  for (auto [name, v] : {std::pair{"alpha", alpha}, {"beta", beta}, {"gamma", gamma}}) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
  }
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be positive");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("finetune lr must be non-negative");
  if (batch_size == 0) throw ConfigError("finetune batch size must be positive");
  if (patience == 0) throw ConfigError("finetune patience must be at least 1");
  if (max_epochs == 0) throw ConfigError("finetune max_epochs must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("finetune lr decay must lie in (0, 1]");
  optimizer.validate();
}

LossComponents finetune_loss_components(std::span<const double> targets,
                                        std::span<const double> y_hat,
                                        std::span<const double> y_tilde,
                                        std::span<const double> pi, double alpha, double beta,
                                        double gamma) {
  if (targets.empty() || targets.size() != y_hat.size() || targets.size() != y_tilde.size()) {
    throw std::invalid_argument("finetune_loss_components: size mismatch or empty input");
  }
  LossComponents c;
  c.target = mean_sq(targets, y_hat);
  c.reg = mean_sq(targets, y_tilde);
  for (double p : pi) c.sparsity += p;
  c.total = alpha * c.target + beta * c.reg + gamma * c.sparsity;
  return c;
}

template <typename T>
FinetuneStepResult<T> finetune_step(const ModelParams<T>& model, const GateParams<T>* gate,
                                    const CorrelationModel* corr, const TabularDataset& data,
                                    std::span<const std::size_t> rows,
                                    const FinetuneConfig& config, Rng& gate_rng,
                                    Rng* dropout_rng) {
  if (rows.empty()) throw std::invalid_argument("finetune_step: empty batch");
  const std::size_t batch = rows.size();
  ad::Tape<T> tape;
  ParamBinder<T> binder(tape);
  const auto bb = bind_backbone(binder, model);
  const auto head = bind_head(binder, model.heads.finetune, HeadKind::finetune);
  const Tensor<T> y = target_column<T>(data, rows);

  const auto z = tokenize_batch(bb.tokenizer, data, rows);
  const auto y_hat =
      mlp_forward(head, cls_rows(encode_batch(bb.encoder, z, batch, dropout_rng), batch));
  const auto l_target = ad::mse(y_hat, y);

  FinetuneStepResult<T> out;
  out.y_hat = to_doubles(y_hat.value());
  std::vector<std::pair<T, ad::Var<T>>> terms{{static_cast<T>(config.alpha), l_target}};
  out.components.target = static_cast<double>(l_target.scalar());

  if (config.adaptive_reg) {
    if (gate == nullptr || corr == nullptr) {
      throw std::invalid_argument("finetune_step: adaptive regularization needs gate and correlation");
    }
    if (gate->k() != data.k() || corr->k() != data.k()) {
      throw std::invalid_argument("finetune_step: gate size does not match feature count");
    }
    const auto logits = binder.bind("gate.logits", gate->logits);
    ad::Var<T> m;
    if (config.gate_sampling == GateSampling::per_batch) {
      m = relaxed_gate_var(logits, draw_copula_uniforms(*corr, gate_rng), config.tau);
    } else {
      std::vector<CopulaDraw> draws;
      draws.reserve(batch);
      for (std::size_t b = 0; b < batch; ++b) draws.push_back(draw_copula_uniforms(*corr, gate_rng));
      m = relaxed_gate_var(logits, draws, config.tau);
    }
    const auto z_tilde = ad::scale_rows(z, m);
    const auto y_tilde = mlp_forward(
        head, cls_rows(encode_batch(bb.encoder, z_tilde, batch, dropout_rng), batch));
    const auto l_reg = ad::mse(y_tilde, y);
    const auto l_sparsity = ad::sigmoid_sum(logits);
    terms.emplace_back(static_cast<T>(config.beta), l_reg);
    terms.emplace_back(static_cast<T>(config.gamma), l_sparsity);
    out.y_tilde = to_doubles(y_tilde.value());
    out.components.reg = static_cast<double>(l_reg.scalar());
    out.components.sparsity = static_cast<double>(l_sparsity.scalar());
  }

  const auto loss = ad::weighted_sum(terms);
  out.components.total = config.alpha * out.components.target + config.beta * out.components.reg +
                         config.gamma * out.components.sparsity;
  if (!std::isfinite(out.components.total)) throw NumericError("finetune: non-finite loss");
  tape.backward(loss);
  out.grads = binder.gradients();
  return out;
}

template <typename T>
std::vector<double> predict(const ModelParams<T>& model, const TabularDataset& data,
                            std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("predict: batch size must be positive");
  if (data.k_num() != model.tokenizer.k_num() || data.k_cat() != model.tokenizer.k_cat()) {
    throw DataError("predict: dataset does not match the model's feature layout");
  }
  std::vector<double> out;
  out.reserve(data.size());
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t len = std::min(batch_size, data.size() - start);
    rows.resize(len);
    for (std::size_t i = 0; i < len; ++i) rows[i] = start + i;
    ad::Tape<T> tape;
    ParamBinder<T> binder(tape);
    const auto bb = bind_backbone(binder, model);
    const auto head = bind_head(binder, model.heads.finetune, HeadKind::finetune);
    const auto y = mlp_forward(head, embed_rows(bb, data, rows, nullptr));
    for (T v : y.value().values()) out.push_back(static_cast<double>(v));
  }
  return out;
}

FinetuneResult finetune_loop(ModelParams<float>& model, const TabularDataset& train,
                             const TabularDataset& valid, const FinetuneConfig& config,
                             const MetricsSink& sink, const FinetuneLoopOptions& options) {
  config.validate();
  if (train.size() == 0 || valid.size() == 0) throw DataError("finetune: empty split");
  FinetuneResult result;
  GateParams<float> gate;
  if (config.adaptive_reg) {
    result.correlation = estimate_correlation(train);
    gate = init_gate<float>(train.k(), config.tau);
  }
  const CorrelationModel* corr = result.correlation ? &*result.correlation : nullptr;

  Rng gate_rng(config.seed, "gate_noise");
  Rng dropout_rng(config.seed, "finetune_dropout");
  Rng order_rng(config.seed, "finetune_order");
  OptimizerState<float> opt(config.optimizer);

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  ModelParams<float> best_model = model;
  GateParams<float> best_gate = gate;
  result.best_valid_rmse = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
  std::size_t total_steps = 0;
  bool step_cap = false;

  for (std::size_t epoch = 1; epoch <= config.max_epochs && !step_cap; ++epoch) {
    const double lr = scheduled_lr(config.lr, epoch - 1, config.lr_decay);
    auto params = param_list(model);
    if (config.adaptive_reg) params.emplace_back("gate.logits", &gate.logits);
    shuffle(order, order_rng);

    LossComponents sum;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, order.size() - start);
      const auto rows = std::span<const std::size_t>(order).subspan(start, len);
      const auto step = finetune_step(model, config.adaptive_reg ? &gate : nullptr, corr, train,
                                      rows, config, gate_rng, &dropout_rng);
      optimizer_step(params, step.grads, opt, lr);
      ++total_steps;
      const auto& c = step.components;
      const double w = static_cast<double>(len);
      sum.target += c.target * w;
      sum.reg += c.reg * w;
      sum.sparsity += c.sparsity * w;
      sum.total += c.total * w;
      seen += len;
      result.steps.push_back({epoch, total_steps, c});
      if (sink) {
        auto rec = loss_json(c);
        rec["phase"] = "finetune_step";
        rec["epoch"] = epoch;
        rec["step"] = total_steps;
        sink(rec);
      }
      if (options.on_step) {
        options.on_step(total_steps, config.adaptive_reg ? gate.mean_probability() : 1.0);
      }
      if (options.max_steps > 0 && total_steps >= options.max_steps) {
        step_cap = true;
        break;
      }
    }

    FinetuneEpoch rec;
    rec.epoch = epoch;
    rec.lr = lr;
    const double n = static_cast<double>(seen);
    rec.loss = {sum.target / n, sum.reg / n, sum.sparsity / n, sum.total / n};
    rec.valid_rmse = rmse(predict(model, valid, config.batch_size), valid.targets);
    if (!std::isfinite(rec.valid_rmse)) {
      throw NumericError("finetune: non-finite validation RMSE at epoch " + std::to_string(epoch));
    }
    rec.mean_pi = config.adaptive_reg ? gate.mean_probability() : 1.0;
    result.history.push_back(rec);
    if (sink) {
      auto j = loss_json(rec.loss);
      j["phase"] = "finetune";
      j["epoch"] = epoch;
      j["valid_rmse"] = rec.valid_rmse;
      j["mean_pi"] = config.adaptive_reg ? nlohmann::json(rec.mean_pi) : nlohmann::json(nullptr);
      j["lr"] = lr;
      sink(j);
    }

    if (rec.valid_rmse < result.best_valid_rmse) {
      result.best_valid_rmse = rec.valid_rmse;
      result.best_epoch = epoch;
      best_model = model;
      best_gate = gate;
      bad_epochs = 0;
    } else if (++bad_epochs >= config.patience) {
      break;
    }
  }
  model = std::move(best_model);
  if (config.adaptive_reg) result.gate = std::move(best_gate);
  return result;
}

#define APAR_INSTANTIATE_FINETUNE(T)                                                          \
  template FinetuneStepResult<T> finetune_step(const ModelParams<T>&, const GateParams<T>*,  \
                                               const CorrelationModel*, const TabularDataset&, \
                                               std::span<const std::size_t>,                  \
                                               const FinetuneConfig&, Rng&, Rng*);            \
  template std::vector<double> predict(const ModelParams<T>&, const TabularDataset&, std::size_t);

APAR_INSTANTIATE_FINETUNE(float)
APAR_INSTANTIATE_FINETUNE(double)

}  // namespace apar
