// apar command-line driver.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "apar/error.hpp"
#include "apar/experiment.hpp"
#include "apar/gradcheck.hpp"

namespace {

using nlohmann::json;

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string pretext;
  std::string op;
  bool no_adaptive_reg = false;
  std::optional<double> beta;
  std::optional<double> gamma;
  std::optional<double> tau;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--pretext", o.pretext, "arith|fr|mr|fr+mr|none");
  cmd->add_option("--op", o.op, "add|sub|mul|div");
  cmd->add_flag("--no-adaptive-reg", o.no_adaptive_reg, "fine-tune without the gate (beta = gamma = 0)");
  cmd->add_option("--beta", o.beta, "consistency weight");
  cmd->add_option("--gamma", o.gamma, "sparsity weight");
  cmd->add_option("--tau", o.tau, "gate temperature");
}

apar::ExperimentConfig resolve(const Overrides& o) {
  apar::ExperimentConfig c =
      o.config_path.empty() ? apar::ExperimentConfig{} : apar::load_experiment_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.output_dir = o.out;
  if (!o.pretext.empty()) c.pretrain.pretext = apar::parse_pretext_kind(o.pretext);
  if (!o.op.empty()) c.pretrain.op = apar::parse_arithmetic_op(o.op);
  if (o.no_adaptive_reg) {
    c.finetune.adaptive_reg = false;
    c.finetune.beta = 0.0;
    c.finetune.gamma = 0.0;
  }
  if (o.beta) c.finetune.beta = *o.beta;
  if (o.gamma) c.finetune.gamma = *o.gamma;
  if (o.tau) c.finetune.tau = *o.tau;
  c.validate();
  return c;
}

void write_json(const std::filesystem::path& path, const json& doc) {
  std::ofstream out(path, std::ios::trunc);
  out << doc.dump(2) << "\n";
  if (!out) throw apar::DataError("cannot write " + path.string());
}

int cmd_synth(const Overrides& o) {
  apar::ExperimentConfig c = resolve(Overrides{o.config_path, std::nullopt, o.out, "", "", false, {}, {}, {}});
  if (o.seed) c.data.synthetic.seed = *o.seed;
  c.data.synthetic.validate();
  const std::filesystem::path dir = c.output_dir;
  std::filesystem::create_directories(dir);
  const apar::SyntheticTask task = apar::generate_synthetic(c.data.synthetic);
  const apar::RawTable raw = apar::to_raw_table(task.data);
  {
    std::ofstream csv(dir / "data.csv", std::ios::trunc);
    apar::write_csv(csv, raw);
    if (!csv) throw apar::DataError("cannot write " + (dir / "data.csv").string());
  }
  write_json(dir / "schema.json", apar::schema_to_json(raw.schema));
  json informative = json::array();
  for (bool b : task.formula.informative) informative.push_back(b);
  write_json(dir / "synthetic.json",
             {{"spec", c.data.synthetic.to_json()}, {"informative", informative},
              {"steps", task.formula.steps.size()}});
  std::cout << "wrote " << raw.rows << " rows to " << (dir / "data.csv").string() << "\n";
  return 0;
}

int cmd_preprocess(const Overrides& o) {
  const apar::ExperimentConfig c = resolve(o);
  const apar::PreparedData d = apar::prepare_data(c);
  const std::filesystem::path dir = c.output_dir;
  std::filesystem::create_directories(dir);
  write_json(dir / "preprocessor.json", d.preprocessor.to_json());
  write_json(dir / "schema.json", apar::schema_to_json(d.full.schema));
  write_json(dir / "splits.json", {{"train", d.split.train_rows},
                                   {"valid", d.split.valid_rows},
                                   {"test", d.split.test_rows}});
  std::cout << "n=" << d.full.size() << " k=" << d.full.k() << " train=" << d.split.train.size()
            << " valid=" << d.split.valid.size() << " test=" << d.split.test.size() << "\n";
  return 0;
}

int cmd_pretrain(const Overrides& o) {
  apar::Experiment exp(resolve(o), true);
  const auto r = exp.pretrain();
  if (r.history.empty()) {
    std::cout << "pretext is none; nothing to do\n";
  } else {
    std::cout << "pretrain: " << r.history.size() << " epochs, best epoch " << r.best_epoch
              << ", valid loss " << r.best_valid_loss << "\n";
  }
  return 0;
}

int cmd_finetune(const Overrides& o) {
  const apar::ExperimentConfig c = resolve(o);
  apar::Experiment exp(c, false);
  const auto pre = exp.dir() / "pretrain.ckpt";
  if (c.pretrain.pretext != apar::PretextKind::none && std::filesystem::exists(pre)) {
    exp.load(pre);
    std::cout << "initialized from " << pre.string() << "\n";
  }
  const auto r = exp.finetune();
  std::cout << "finetune: " << r.history.size() << " epochs, best epoch " << r.best_epoch
            << ", valid rmse " << r.best_valid_rmse << "\n";
  return 0;
}

int cmd_evaluate(const Overrides& o, const std::string& checkpoint) {
  apar::Experiment exp(resolve(o), false);
  exp.load(checkpoint.empty() ? exp.dir() / "finetune.ckpt" : std::filesystem::path(checkpoint));
  const json s = exp.evaluate();
  std::cout << "test rmse " << s["test_rmse"].get<double>() << " (n=" << s["n_test"] << ")\n";
  return 0;
}

int cmd_run(const Overrides& o) {
  const json s = apar::run_experiment(resolve(o));
  std::cout << s.dump(2) << "\n";
  return 0;
}

int cmd_ablate(const Overrides& o, const std::vector<std::string>& variants,
               const std::vector<std::uint64_t>& seeds) {
  apar::AblationOptions opts;
  if (!variants.empty()) opts.variants = variants;
  if (!seeds.empty()) opts.seeds = seeds;
  opts.on_run = [](const std::string& v, std::uint64_t seed, const json& r) {
    std::cout << v << " seed " << seed << ": ";
    if (r.value("status", "") == "ok") {
      std::cout << "test rmse " << r["test_rmse"].get<double>() << "\n";
    } else {
      std::cout << "failed (" << r.value("error", "") << ")\n";
    }
  };
  const json s = apar::run_ablation(resolve(o), opts);
  for (const auto& [name, v] : s["variants"].items()) {
    std::cout << name << " median " << v["median_test_rmse"].dump() << "\n";
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  bool ok = true;
  for (const auto& r : {apar::gradcheck_pretrain(seed), apar::gradcheck_finetune(seed)}) {
    std::cout << r.loss << ": " << r.entries.size() << " coordinates, max rel error "
              << r.max_rel_error << ", failures " << r.failures << "\n";
    for (const auto& e : r.entries) {
      if (e.rel_error >= r.tolerance) {
        std::cout << "  " << e.name << "[" << e.index << "] analytic " << e.analytic << " numeric "
                  << e.numeric << "\n";
      }
    }
    ok = ok && r.passed();
  }
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Arithmetic-aware pretraining and adaptive-regularized fine-tuning for tabular regression"};
  app.require_subcommand(0, 1);
  bool print_defaults = false;
  app.add_flag("--print-defaults", print_defaults, "print the default config as JSON and exit");

  Overrides o;
  std::string checkpoint;
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  std::uint64_t gc_seed = 0;

  auto* synth = app.add_subcommand("synth", "write a synthetic CSV and schema");
  auto* preprocess = app.add_subcommand("preprocess", "fit preprocessing and write splits");
  auto* pretrain = app.add_subcommand("pretrain", "run the pretext phase");
  auto* finetune = app.add_subcommand("finetune", "fine-tune (from pretrain.ckpt when present)");
  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on the test split");
  auto* run = app.add_subcommand("run", "pretrain, fine-tune and evaluate");
  auto* ablate = app.add_subcommand("ablate", "run the ablation matrix");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  for (auto* cmd : {synth, preprocess, pretrain, finetune, evaluate, run, ablate}) add_common(cmd, o);
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint (default <out>/finetune.ckpt)");
  ablate->add_option("--variants", variants, "apar wo_ap wo_ar fr mr fr+mr op_add ...")->delimiter(',');
  ablate->add_option("--seeds", seeds, "seeds")->delimiter(',');
  gradcheck->add_option("--seed", gc_seed, "problem seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (print_defaults) {
      std::cout << apar::ExperimentConfig{}.to_json().dump(2) << "\n";
      return 0;
    }
    if (*synth) return cmd_synth(o);
    if (*preprocess) return cmd_preprocess(o);
    if (*pretrain) return cmd_pretrain(o);
    if (*finetune) return cmd_finetune(o);
    if (*evaluate) return cmd_evaluate(o, checkpoint);
    if (*run) return cmd_run(o);
    if (*ablate) return cmd_ablate(o, variants, seeds);
    if (*gradcheck) return cmd_gradcheck(gc_seed);
    std::cout << app.help();
    return 1;
  } catch (const apar::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const apar::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 1;
  } catch (const apar::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
