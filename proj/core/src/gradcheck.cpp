#include "apar/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "apar/finetune.hpp"
#include "apar/pretrain.hpp"

namespace apar {

GradcheckReport finite_difference_check(const std::string& loss_name,
                                        const ParamList<double>& params,
                                        const GradientSet<double>& analytic,
                                        const std::function<double()>& loss, Rng& rng,
                                        const GradcheckOptions& options) {
  std::set<std::pair<std::size_t, std::size_t>> chosen;  // (param index, element)
  std::size_t total = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::size_t n = params[p].second->size();
    total += n;
    const bool all = std::find(options.exhaustive.begin(), options.exhaustive.end(),
                               params[p].first) != options.exhaustive.end();
    if (all || n <= options.per_tensor) {
      for (std::size_t i = 0; i < n; ++i) chosen.emplace(p, i);
      continue;
    }
    std::set<std::size_t> picked;
    while (picked.size() < options.per_tensor) picked.insert(rng.index(n));
    for (std::size_t i : picked) chosen.emplace(p, i);
  }
  const std::size_t target = std::min(options.min_coordinates, total);
  while (chosen.size() < target) {
    std::size_t pick = rng.index(total);
    std::size_t p = 0;
    while (pick >= params[p].second->size()) pick -= params[p++].second->size();
    chosen.emplace(p, pick);
  }

  GradcheckReport report;
  report.loss = loss_name;
  report.tolerance = options.tolerance;
  for (const auto& [p, i] : chosen) {
    const auto& [name, tensor] = params[p];
    const Tensor<double>* g = analytic.find(name);
    const double a = g ? (*g)[i] : 0.0;
    const double saved = (*tensor)[i];
    (*tensor)[i] = saved + options.step;
    const double up = loss();
    (*tensor)[i] = saved - options.step;
    const double down = loss();
    (*tensor)[i] = saved;
    const double num = (up - down) / (2.0 * options.step);
    const double rel =
        std::fabs(a - num) / std::max({std::fabs(a), std::fabs(num), options.floor});
    report.entries.push_back({name, i, a, num, rel});
    report.max_rel_error = std::max(report.max_rel_error, rel);
    if (!(rel < options.tolerance)) ++report.failures;
  }
  return report;
}

namespace {

struct Problem {
  TabularDataset data;
  ModelParams<double> model;
  GateParams<double> gate;
  CorrelationModel corr;
};

Problem make_problem(std::uint64_t seed) {
  SyntheticTaskSpec spec;
  spec.seed = seed;
  spec.n = 16;
  spec.k_num = 3;
  spec.k_cat = 2;
  spec.threshold_count = 2;
  spec.cat_cardinality = 3;
  auto [data, pre] = fit_transform(to_raw_table(generate_synthetic(spec).data));
  EncoderConfig ec;
  ec.d = 8;
  ec.layers = 2;
  ec.heads = 2;
  Rng rng(seed, "gradcheck_init");
  auto model = init_model<double>(data.schema, ec, rng);
  Problem p{std::move(data), std::move(model), init_gate<double>(5, 0.7), {}};
  // Off-default values so every parameter shapes the loss.
  for (auto& [name, t] : param_list(p.model)) {
    if (name.find("offset") != std::string::npos || name.find(".b") != std::string::npos ||
        name.find("scale") != std::string::npos) {
      for (auto& v : t->values()) v += rng.normal(0.0, 0.1);
    }
  }
  for (auto& v : p.gate.logits.values()) v = rng.normal(0.0, 1.0);
  p.corr = estimate_correlation(p.data);
  return p;
}

}  // namespace

GradcheckReport gradcheck_pretrain(std::uint64_t seed, const GradcheckOptions& options) {
  Problem p = make_problem(seed);
  Rng pair_rng(seed, "gradcheck_pairs");
  const auto pairs = sample_pairs(p.data, 6, ArithmeticOp::add, 1e-3, pair_rng).pairs;
  auto loss = [&]() {
    Rng dropout(seed, "gradcheck_dropout");
    return pretrain_step(p.model, p.data, pairs, ArithmeticOp::add, 1e-3, &dropout).loss;
  };
  Rng dropout(seed, "gradcheck_dropout");
  const auto step = pretrain_step(p.model, p.data, pairs, ArithmeticOp::add, 1e-3, &dropout);
  auto params = param_list(p.model);
  std::erase_if(params, [](const auto& e) { return e.first.rfind("head.finetune", 0) == 0; });
  Rng rng(seed, "gradcheck_coords");
  return finite_difference_check("pretrain", params, step.grads, loss, rng, options);
}

GradcheckReport gradcheck_finetune(std::uint64_t seed, const GradcheckOptions& options) {
  Problem p = make_problem(seed);
  FinetuneConfig config;
  config.beta = 0.5;
  config.gamma = 0.1;
  config.tau = p.gate.tau;
  const std::vector<std::size_t> rows{0, 3, 5, 9, 12};
  auto run = [&]() {
    Rng gate_rng(seed, "gradcheck_gate");
    Rng dropout(seed, "gradcheck_dropout");
    return finetune_step(p.model, &p.gate, &p.corr, p.data, rows, config, gate_rng, &dropout);
  };
  const auto step = run();
  auto params = param_list(p.model);
  std::erase_if(params, [](const auto& e) { return e.first.rfind("head.pretrain", 0) == 0; });
  params.emplace_back("gate.logits", &p.gate.logits);
  GradcheckOptions opts = options;
  opts.exhaustive.push_back("gate.logits");
  Rng rng(seed, "gradcheck_coords");
  return finite_difference_check(
      "finetune", params, step.grads, [&] { return run().components.total; }, rng, opts);
}

}  // namespace apar
