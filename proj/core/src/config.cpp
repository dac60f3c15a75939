#include "apar/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <type_traits>

#include "apar/digest.hpp"
#include "apar/error.hpp"
#include "apar/rng.hpp"

namespace apar {
namespace {

using nlohmann::json;

// Strict reader over one JSON object.
class Section {
 public:
  Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError(path_ + " must be a JSON object");
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = doc_.find(key);
    if (it == doc_.end()) return;
    const std::string where = path_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ConfigError(where + " must be a boolean");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!it->is_number_unsigned()) throw ConfigError(where + " must be a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ConfigError(where + " must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw ConfigError(where + " must be a string");
    }
    out = it->template get<T>();
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    const auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }

  // Throws on any key never asked for.
  void finish() const {
    for (const auto& [key, _] : doc_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown configuration key '" + path_ + "." + key + "'");
    }
  }

 private:
  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

json optimizer_json(const OptimizerConfig& o) {
  return {{"beta1", o.beta1},
          {"beta2", o.beta2},
          {"epsilon", o.epsilon},
          {"weight_decay", o.weight_decay},
          {"decoupled", o.decoupled}};
}

}  // namespace

void ExperimentConfig::validate() const {
  data.synthetic.validate();
  if (data.source == DataSourceKind::csv && (data.csv_path.empty() || data.schema_path.empty())) {
    throw ConfigError("data.csv and data.schema are required when data.source is csv");
  }
  const auto& f = data.split;
  if (!(f.train > 0.0 && f.valid > 0.0 && f.test > 0.0)) {
    throw ConfigError("split fractions must be positive");
  }
  if (std::fabs(f.train + f.valid + f.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  model.validate();
  pretrain.validate();
  finetune.validate();
  optimizer.validate();
  baseline.validate();
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

json ExperimentConfig::to_json() const {
  json d = {{"source", data.source == DataSourceKind::csv ? "csv" : "synthetic"},
            {"synthetic", data.synthetic.to_json()},
            {"csv", data.csv_path},
            {"schema", data.schema_path},
            {"split", {{"train", data.split.train}, {"valid", data.split.valid}, {"test", data.split.test}}},
            {"preprocess",
             {{"scale_numerical", data.preprocess.scale_numerical},
              {"scale_target", data.preprocess.scale_target}}}};
  json m = {{"d", model.d},
            {"layers", model.layers},
            {"heads", model.heads},
            {"ffn_hidden", model.ffn_hidden},
            {"attention_dropout", model.attention_dropout},
            {"ffn_dropout", model.ffn_dropout},
            {"residual_dropout", model.residual_dropout}};
  const auto& p = pretrain;
  json pt = {{"kind", to_string(p.pretext)},
             {"op", to_string(p.op)},
             {"lr", p.lr},
             {"batch_size", p.batch_size},
             {"patience", p.patience},
             {"max_epochs", p.max_epochs},
             {"lr_decay", p.lr_decay},
             {"pairs_per_epoch", p.pairs_per_epoch},
             {"div_epsilon", p.div_epsilon},
             {"corruption_rate", p.corruption_rate},
             {"mask_rate", p.mask_rate},
             {"warn_rejection_rate", p.warn_rejection_rate}};
  const auto& t = finetune;
  json ft = {{"alpha", t.alpha},
             {"beta", t.beta},
             {"gamma", t.gamma},
             {"tau", t.tau},
             {"adaptive_reg", t.adaptive_reg},
             {"gate_sampling", to_string(t.gate_sampling)},
             {"lr", t.lr},
             {"batch_size", t.batch_size},
             {"patience", t.patience},
             {"max_epochs", t.max_epochs},
             {"lr_decay", t.lr_decay}};
  json b = {{"enabled", run_baseline},
            {"blocks", baseline.blocks},
            {"hidden", baseline.hidden},
            {"lr", baseline.lr},
            {"batch_size", baseline.batch_size},
            {"patience", baseline.patience},
            {"max_epochs", baseline.max_epochs},
            {"lr_decay", baseline.lr_decay}};
  return {{"data", d},
          {"model", m},
          {"pretext", pt},
          {"finetune", ft},
          {"optimizer", optimizer_json(optimizer)},
          {"baseline_mlp", b},
          {"seed", seed},
          {"output_dir", output_dir}};
}

ExperimentConfig ExperimentConfig::from_json(const json& doc) {
  ExperimentConfig c;
  Section root(doc, "config");
  if (const json* d = root.child("data")) {
    Section s(*d, "data");
    std::string source = "synthetic";
    s.read("source", source);
    if (source == "csv") {
      c.data.source = DataSourceKind::csv;
    } else if (source != "synthetic") {
      throw ConfigError("data.source must be 'synthetic' or 'csv'");
    }
    if (const json* syn = s.child("synthetic")) c.data.synthetic = SyntheticTaskSpec::from_json(*syn);
    s.read("csv", c.data.csv_path);
    s.read("schema", c.data.schema_path);
    if (const json* sp = s.child("split")) {
      Section q(*sp, "data.split");
      q.read("train", c.data.split.train);
      q.read("valid", c.data.split.valid);
      q.read("test", c.data.split.test);
      q.finish();
    }
    if (const json* pp = s.child("preprocess")) {
      Section q(*pp, "data.preprocess");
      q.read("scale_numerical", c.data.preprocess.scale_numerical);
      q.read("scale_target", c.data.preprocess.scale_target);
      q.finish();
    }
    s.finish();
  }
  if (const json* m = root.child("model")) {
    Section s(*m, "model");
    s.read("d", c.model.d);
    s.read("layers", c.model.layers);
    s.read("heads", c.model.heads);
    s.read("ffn_hidden", c.model.ffn_hidden);
    s.read("attention_dropout", c.model.attention_dropout);
    s.read("ffn_dropout", c.model.ffn_dropout);
    s.read("residual_dropout", c.model.residual_dropout);
    s.finish();
  }
  if (const json* p = root.child("pretext")) {
    Section s(*p, "pretext");
    auto& q = c.pretrain;
    std::string kind = to_string(q.pretext);
    std::string op = to_string(q.op);
    s.read("kind", kind);
    s.read("op", op);
    q.pretext = parse_pretext_kind(kind);
    q.op = parse_arithmetic_op(op);
    s.read("lr", q.lr);
    s.read("batch_size", q.batch_size);
    s.read("patience", q.patience);
    s.read("max_epochs", q.max_epochs);
    s.read("lr_decay", q.lr_decay);
    s.read("pairs_per_epoch", q.pairs_per_epoch);
    s.read("div_epsilon", q.div_epsilon);
    s.read("corruption_rate", q.corruption_rate);
    s.read("mask_rate", q.mask_rate);
    s.read("warn_rejection_rate", q.warn_rejection_rate);
    s.finish();
  }
  if (const json* f = root.child("finetune")) {
    Section s(*f, "finetune");
    auto& q = c.finetune;
    s.read("alpha", q.alpha);
    s.read("beta", q.beta);
    s.read("gamma", q.gamma);
    s.read("tau", q.tau);
    s.read("adaptive_reg", q.adaptive_reg);
    std::string sampling = to_string(q.gate_sampling);
    s.read("gate_sampling", sampling);
    q.gate_sampling = parse_gate_sampling(sampling);
    s.read("lr", q.lr);
    s.read("batch_size", q.batch_size);
    s.read("patience", q.patience);
    s.read("max_epochs", q.max_epochs);
    s.read("lr_decay", q.lr_decay);
    s.finish();
  }
  if (const json* o = root.child("optimizer")) {
    Section s(*o, "optimizer");
    s.read("beta1", c.optimizer.beta1);
    s.read("beta2", c.optimizer.beta2);
    s.read("epsilon", c.optimizer.epsilon);
    s.read("weight_decay", c.optimizer.weight_decay);
    s.read("decoupled", c.optimizer.decoupled);
    s.finish();
  }
  if (const json* b = root.child("baseline_mlp")) {
    Section s(*b, "baseline_mlp");
    s.read("enabled", c.run_baseline);
    s.read("blocks", c.baseline.blocks);
    s.read("hidden", c.baseline.hidden);
    s.read("lr", c.baseline.lr);
    s.read("batch_size", c.baseline.batch_size);
    s.read("patience", c.baseline.patience);
    s.read("max_epochs", c.baseline.max_epochs);
    s.read("lr_decay", c.baseline.lr_decay);
    s.finish();
  }
  root.read("seed", c.seed);
  root.read("output_dir", c.output_dir);
  root.finish();
  c.validate();
  return c;
}

std::string ExperimentConfig::hash() const {
  json j = to_json();
  j.erase("output_dir");
  return to_hex(fnv1a64(j.dump()));
}

PretrainConfig ExperimentConfig::resolved_pretrain() const {
  PretrainConfig p = pretrain;
  p.optimizer = optimizer;
  p.seed = derive_seed(seed, "pretrain");
  return p;
}

FinetuneConfig ExperimentConfig::resolved_finetune() const {
  FinetuneConfig f = finetune;
  f.optimizer = optimizer;
  f.seed = derive_seed(seed, "finetune");
  return f;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return ExperimentConfig::from_json(doc);
}

}  // namespace apar
