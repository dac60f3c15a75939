#pragma once

// Adam / AdamW with bias-corrected moments and a per-epoch step-decay schedule.

#include <cstdint>
#include <map>
#include <string>

#include "apar/params.hpp"
#include "apar/tensor.hpp"

namespace apar {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  // true: AdamW (decay applied to the weights directly). false: Adam with the
  // decay folded into the gradient as an L2 term.
  bool decoupled = true;

  void validate() const;
};

template <typename T>
struct OptimizerState {
  OptimizerConfig config;
  std::uint64_t step = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;

  explicit OptimizerState(OptimizerConfig c = {}) : config(c) {}
};

// Updates every parameter that has a gradient entry; parameters without one
// are left untouched. Throws NumericError on a non-finite gradient and
// std::invalid_argument on a shape mismatch.
template <typename T>
void optimizer_step(const ParamList<T>& params, const GradientSet<T>& grads,
                    OptimizerState<T>& state, double lr);

// base * decay^epoch. Throws ConfigError unless decay is in (0, 1].
double scheduled_lr(double base, std::size_t epoch, double decay);

}  // namespace apar
