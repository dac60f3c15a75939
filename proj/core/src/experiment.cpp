#include "apar/experiment.hpp"

#include <algorithm>
#include <fstream>

#include "apar/error.hpp"

namespace apar {
namespace {

using nlohmann::json;

template <typename F>
auto in_phase(const std::string& phase, F&& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError(phase + ": " + e.what());
  } catch (const CheckpointError& e) {
    throw CheckpointError(phase + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(phase + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(phase + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const json& doc) {
  std::ofstream out(path, std::ios::trunc);
  out << doc.dump(2) << "\n";
  if (!out) throw DataError("cannot write " + path.string());
}

}  // namespace

PreparedData prepare_data(const ExperimentConfig& config) {
  return in_phase("data", [&] {
    const auto& d = config.data;
    RawTable raw = d.source == DataSourceKind::csv
                       ? load_csv(d.csv_path, load_schema(d.schema_path))
                       : to_raw_table(generate_synthetic(d.synthetic).data);
    auto [full, pre] = fit_transform(raw, d.preprocess);
    DatasetSplit parts = split(full, d.split, derive_seed(config.seed, "split"));
    return PreparedData{std::move(full), std::move(pre), std::move(parts)};
  });
}

Experiment::Experiment(ExperimentConfig config, bool fresh_metrics)
    : config_(std::move(config)), hash_(config_.hash()), dir_(config_.output_dir) {
  config_.validate();
  data_ = prepare_data(config_);
  std::filesystem::create_directories(dir_);
  write_json(dir_ / "config.json", config_.to_json());
  write_json(dir_ / "preprocessor.json", data_.preprocessor.to_json());
  if (fresh_metrics) std::filesystem::remove(dir_ / "metrics.jsonl");
  metrics_ = std::make_unique<MetricsWriter>(dir_ / "metrics.jsonl", hash_);
  Rng init_rng(config_.seed, "init");
  model_ = init_model<float>(data_.full.schema, config_.model, init_rng);
  gate_draws_at_start_ = gate_draw_count();
}

json Experiment::checkpoint_metadata(const std::string& phase, std::size_t epoch,
                                     double metric) const {
  return {{"config_hash", hash_},
          {"schema_digest", schema_digest(data_.full.schema)},
          {"epoch", epoch},
          {"phase", phase},
          {"metric", metric}};
}

PretrainResult Experiment::pretrain() {
  return in_phase("pretrain", [&] {
    auto result = pretrain_loop(model_, data_.split.train, data_.split.valid,
                                config_.resolved_pretrain(), metrics_->sink());
    if (!result.history.empty()) {
      save_checkpoint(make_checkpoint(model_, nullptr, nullptr,
                                      checkpoint_metadata("pretrain", result.best_epoch,
                                                          result.best_valid_loss)),
                      dir_ / "pretrain.ckpt");
    }
    pretrain_result_ = result;
    return result;
  });
}

FinetuneResult Experiment::finetune() {
  return in_phase("finetune", [&] {
    auto result = finetune_loop(model_, data_.split.train, data_.split.valid,
                                config_.resolved_finetune(), metrics_->sink());
    gate_ = result.gate;
    corr_ = result.correlation;
    save_checkpoint(make_checkpoint(model_, gate_ ? &*gate_ : nullptr, corr_ ? &*corr_ : nullptr,
                                    checkpoint_metadata("finetune", result.best_epoch,
                                                        result.best_valid_rmse)),
                    dir_ / "finetune.ckpt");
    finetune_result_ = result;
    return result;
  });
}

void Experiment::load(const std::filesystem::path& checkpoint) {
  in_phase("load", [&] {
    const Checkpoint ckpt = load_checkpoint(checkpoint, schema_digest(data_.full.schema));
    restore_model(ckpt, model_);
    GateParams<float> gate = init_gate<float>(data_.full.k(), config_.finetune.tau);
    if (restore_gate(ckpt, gate)) gate_ = gate;
    return 0;
  });
}

json Experiment::evaluate() {
  return in_phase("evaluate", [&] {
    const auto& sp = data_.split;
    const std::size_t epoch = finetune_result_ ? finetune_result_->best_epoch : 0;
    const auto test_pred = predict(model_, sp.test);
    const auto valid_pred = predict(model_, sp.valid);
    const double test_rmse = rmse(test_pred, sp.test.targets);
    const double valid_rmse = rmse(valid_pred, sp.valid.targets);

    const bool inverse = data_.preprocessor.flags().scale_target;
    {
      std::ofstream out(dir_ / "predictions_test.jsonl", std::ios::trunc);
      for (std::size_t i = 0; i < test_pred.size(); ++i) {
        json rec = {{"index", sp.test_rows[i]},
                    {"y_true", sp.test.targets[i]},
                    {"y_pred", test_pred[i]}};
        if (inverse) {
          rec["y_true_inverse"] = data_.preprocessor.inverse_target(sp.test.targets[i]);
          rec["y_pred_inverse"] = data_.preprocessor.inverse_target(test_pred[i]);
        }
        out << rec.dump() << "\n";
      }
      if (!out) throw DataError("cannot write predictions file");
    }
    for (const auto& [name, value, n] :
         {std::tuple{"valid", valid_rmse, sp.valid.size()}, {"test", test_rmse, sp.test.size()}}) {
      metrics_->write({{"phase", "evaluate"}, {"epoch", epoch}, {"split", name}, {"rmse", value},
                       {"n", n}});
    }

    json summary = {{"status", "ok"},
                    {"config_hash", hash_},
                    {"seed", config_.seed},
                    {"pretext", to_string(config_.pretrain.pretext)},
                    {"op", to_string(config_.pretrain.op)},
                    {"adaptive_reg", config_.finetune.adaptive_reg},
                    {"test_rmse", test_rmse},
                    {"valid_rmse", valid_rmse},
                    {"n_test", sp.test.size()},
                    {"gate_draws", gate_draw_count() - gate_draws_at_start_}};
    if (pretrain_result_) {
      const auto& p = *pretrain_result_;
      summary["pretrain"] = {{"epochs", p.history.size()},
                             {"best_epoch", p.best_epoch},
                             {"best_valid_loss", p.history.empty() ? json(nullptr) : json(p.best_valid_loss)},
                             {"guard_warning", p.guard_warning},
                             {"rejection_rate", p.draws == 0 ? 0.0
                                                             : static_cast<double>(p.rejections) /
                                                                   static_cast<double>(p.draws)}};
    }
    if (finetune_result_) {
      const auto& f = *finetune_result_;
      summary["finetune"] = {{"epochs", f.history.size()},
                             {"best_epoch", f.best_epoch},
                             {"best_valid_rmse", f.best_valid_rmse},
                             {"mean_pi", gate_ ? json(gate_->mean_probability()) : json(nullptr)}};
    }
    if (config_.run_baseline) {
      const auto b = baseline_mlp(sp.train, sp.valid, sp.test, config_.baseline,
                                  config_.optimizer, derive_seed(config_.seed, "baseline"),
                                  metrics_->sink());
      metrics_->write({{"phase", "evaluate"}, {"epoch", b.best_epoch}, {"split", "test"},
                       {"rmse", b.test_rmse}, {"n", sp.test.size()}, {"model", "baseline_mlp"}});
      summary["baseline_mlp"] = {{"test_rmse", b.test_rmse},
                                 {"valid_rmse", b.valid_rmse},
                                 {"best_epoch", b.best_epoch},
                                 {"epochs", b.epochs}};
    }
    write_json(dir_ / "summary.json", summary);
    return summary;
  });
}

json Experiment::run() {
  if (config_.pretrain.pretext != PretextKind::none) pretrain();
  finetune();
  return evaluate();
}

json run_experiment(const ExperimentConfig& config) {
  Experiment exp(config, true);
  return exp.run();
}

std::vector<AblationVariant> ablation_variants(const std::vector<std::string>& names) {
  std::vector<AblationVariant> out;
  for (const auto& name : names) {
    std::function<void(ExperimentConfig&)> apply;
    if (name == "apar") {
      apply = [](ExperimentConfig&) {};
    } else if (name == "wo_ap") {
      apply = [](ExperimentConfig& c) { c.pretrain.pretext = PretextKind::none; };
    } else if (name == "wo_ar") {
      apply = [](ExperimentConfig& c) {
        c.finetune.adaptive_reg = false;
        c.finetune.beta = 0.0;
        c.finetune.gamma = 0.0;
      };
    } else if (name == "fr" || name == "mr" || name == "fr+mr") {
      apply = [kind = parse_pretext_kind(name)](ExperimentConfig& c) { c.pretrain.pretext = kind; };
    } else if (name.rfind("op_", 0) == 0) {
      apply = [op = parse_arithmetic_op(name.substr(3))](ExperimentConfig& c) {
        c.pretrain.pretext = PretextKind::arithmetic;
        c.pretrain.op = op;
      };
    } else {
      throw ConfigError("unknown ablation variant '" + name +
                        "' (expected apar, wo_ap, wo_ar, fr, mr, fr+mr or op_<add|sub|mul|div>)");
    }
    out.push_back({name, std::move(apply)});
  }
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

json run_ablation(const ExperimentConfig& base, const AblationOptions& options) {
  base.validate();
  if (options.seeds.empty()) throw ConfigError("ablation needs at least one seed");
  const auto variants = ablation_variants(options.variants);
  const std::filesystem::path root = base.output_dir;
  std::filesystem::create_directories(root);
  json summary = {{"config_hash", base.hash()}, {"seeds", options.seeds}, {"variants", json::object()}};
  for (const auto& v : variants) {
    json runs = json::array();
    std::vector<double> scores;
    for (std::uint64_t seed : options.seeds) {
      ExperimentConfig c = base;
      v.apply(c);
      c.seed = seed;
      c.output_dir = (root / v.name / ("seed_" + std::to_string(seed))).string();
      json result;
      try {
        result = run_experiment(c);
        scores.push_back(result.at("test_rmse").get<double>());
      } catch (const NumericError& e) {
        result = {{"status", "failed"}, {"seed", seed}, {"error", e.what()}};
      }
      if (options.on_run) options.on_run(v.name, seed, result);
      runs.push_back(result);
    }
    summary["variants"][v.name] = {
        {"runs", runs},
        {"test_rmse", scores},
        {"median_test_rmse", scores.empty() ? json(nullptr) : json(median(scores))},
        {"failed", options.seeds.size() - scores.size()}};
  }
  write_json(root / "ablation_summary.json", summary);
  return summary;
}

}  // namespace apar
