#include "apar/optimizer.hpp"

#include <cmath>
#include <stdexcept>

#include "apar/error.hpp"

namespace apar {

void OptimizerConfig::validate() const {
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
}

template <typename T>
void optimizer_step(const ParamList<T>& params, const GradientSet<T>& grads,
                    OptimizerState<T>& state, double lr) {
  const auto& c = state.config;
  for (const auto& [name, p] : params) {
    const Tensor<T>* g = grads.find(name);
    if (g == nullptr) continue;
    if (!g->same_shape(*p)) throw std::invalid_argument("gradient shape mismatch for " + name);
    if (!g->all_finite()) throw NumericError("non-finite gradient for " + name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (const auto& [name, p] : params) {
    const Tensor<T>* g = grads.find(name);
    if (g == nullptr) continue;
    auto& m = state.m.try_emplace(name, p->rows(), p->cols()).first->second;
    auto& v = state.v.try_emplace(name, p->rows(), p->cols()).first->second;
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double theta = (*p)[i];
      double gi = (*g)[i];
      if (!c.decoupled) gi += c.weight_decay * theta;
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.epsilon);
      if (c.decoupled) update += lr * c.weight_decay * theta;
      (*p)[i] = static_cast<T>(theta - update);
    }
  }
}

double scheduled_lr(double base, std::size_t epoch, double decay) {
  if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("lr decay must lie in (0, 1]");
  return base * std::pow(decay, static_cast<double>(epoch));
}

template void optimizer_step(const ParamList<float>&, const GradientSet<float>&,
                             OptimizerState<float>&, double);
template void optimizer_step(const ParamList<double>&, const GradientSet<double>&,
                             OptimizerState<double>&, double);

}  // namespace apar
