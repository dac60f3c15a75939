#include "apar/copula_gate.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "apar/error.hpp"

namespace apar {
namespace {

std::atomic<std::uint64_t> g_gate_draws{0};

constexpr double kUniformFloor = 1e-12;

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor<double> cholesky(const Tensor<double>& m) {
  const std::size_t k = m.rows();
  if (m.cols() != k) throw std::invalid_argument("cholesky: matrix is not square");
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (std::fabs(m(i, j) - m(j, i)) > 1e-12 * (1.0 + std::fabs(m(i, j)))) {
        throw std::invalid_argument("cholesky: matrix is not symmetric");
      }
    }
  }
  Tensor<double> l(k, k);
  for (std::size_t j = 0; j < k; ++j) {
    double pivot = m(j, j);
    for (std::size_t p = 0; p < j; ++p) pivot -= l(j, p) * l(j, p);
    if (!(pivot > 0.0)) {
      throw NumericError("cholesky: non-positive pivot at column " + std::to_string(j) +
                         " (matrix is not positive definite)");
    }
    const double diag = std::sqrt(pivot);
    l(j, j) = diag;
    for (std::size_t i = j + 1; i < k; ++i) {
      double s = m(i, j);
      for (std::size_t p = 0; p < j; ++p) s -= l(i, p) * l(j, p);
      l(i, j) = s / diag;
    }
  }
  return l;
}

CorrelationModel make_correlation_model(Tensor<double> correlation) {
  CorrelationModel model;
  model.correlation = std::move(correlation);
  const std::size_t k = model.correlation.rows();
  double jitter = 0.0;
  while (true) {
    Tensor<double> m = model.correlation;
    for (std::size_t i = 0; i < k; ++i) m(i, i) += jitter;
    try {
      model.cholesky = cholesky(m);
      // A pivot that survives only through rounding leaves a factor that is
      // numerically singular; escalate instead.
      bool tiny = false;
      for (std::size_t i = 0; i < k; ++i) tiny = tiny || model.cholesky(i, i) < 1e-6;
      if (!tiny) break;
    } catch (const NumericError&) {
    }
    jitter = jitter == 0.0 ? 1e-8 : jitter * 10.0;
    if (jitter > 1e-2 * (1.0 + 1e-9)) {
      throw NumericError("correlation matrix factorization failed at maximum jitter 1e-2");
    }
  }
  model.jitter = jitter;
  return model;
}

CorrelationModel estimate_correlation(const TabularDataset& data) {
  const std::size_t n = data.size();
  if (n < 2) throw DataError("correlation estimate needs at least two rows");
  const Tensor<double> x = data.numeric_view();
  const std::size_t k = x.cols();
  std::vector<double> mean(k, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < k; ++j) mean[j] += x(r, j);
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  Tensor<double> cov(k, k);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < k; ++i) {
      const double di = x(r, i) - mean[i];
      for (std::size_t j = 0; j <= i; ++j) cov(i, j) += di * (x(r, j) - mean[j]);
    }
  }
  Tensor<double> corr(k, k);
  for (std::size_t i = 0; i < k; ++i) {
    corr(i, i) = 1.0;
    for (std::size_t j = 0; j < i; ++j) {
      const double denom = std::sqrt(cov(i, i) * cov(j, j));
      const double r = denom > 0.0 ? std::clamp(cov(i, j) / denom, -1.0, 1.0) : 0.0;
      corr(i, j) = r;
      corr(j, i) = r;
    }
  }
  return make_correlation_model(std::move(corr));
}

CorrelationModel independent_correlation(std::size_t k) {
  Tensor<double> eye(k, k);
  for (std::size_t i = 0; i < k; ++i) eye(i, i) = 1.0;
  return make_correlation_model(std::move(eye));
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

template <typename T>
std::vector<double> GateParams<T>::probabilities() const {
  std::vector<double> pi(logits.size());
  for (std::size_t j = 0; j < pi.size(); ++j) pi[j] = stable_sigmoid(logits[j]);
  return pi;
}

template <typename T>
double GateParams<T>::mean_probability() const {
  const auto pi = probabilities();
  return pi.empty() ? 0.0 : std::accumulate(pi.begin(), pi.end(), 0.0) / pi.size();
}

template <typename T>
GateParams<T> init_gate(std::size_t k, double tau) {
  if (!(tau > 0.0)) throw ConfigError("gate temperature must be positive");
  return {Tensor<T>(1, k), tau};
}

CopulaDraw copula_uniforms_from_normals(const CorrelationModel& corr,
                                        const std::vector<double>& eps) {
  const std::size_t k = corr.k();
  if (eps.size() != k) throw std::invalid_argument("copula: noise length mismatch");
  CopulaDraw out;
  out.u.resize(k);
  out.noise_logit.resize(k);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (std::size_t i = 0; i < k; ++i) {
    double v = 0.0;
    double norm2 = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      v += corr.cholesky(i, j) * eps[j];
      norm2 += corr.cholesky(i, j) * corr.cholesky(i, j);
    }
    // Unit variance even with jitter, so marginals stay exactly uniform.
    const double z = v / std::sqrt(norm2);
    if (!std::isfinite(z)) throw NumericError("copula: non-finite Gaussian draw");
    const double lower = 0.5 * std::erfc(-z * inv_sqrt2);
    const double upper = 0.5 * std::erfc(z * inv_sqrt2);
    out.u[i] = std::clamp(lower, kUniformFloor, 1.0 - kUniformFloor);
    constexpr double tiny = std::numeric_limits<double>::min();
    out.noise_logit[i] = std::log(std::max(lower, tiny)) - std::log(std::max(upper, tiny));
  }
  return out;
}

CopulaDraw draw_copula_uniforms(const CorrelationModel& corr, Rng& rng) {
  g_gate_draws.fetch_add(1, std::memory_order_relaxed);
  std::vector<double> eps(corr.k());
  for (auto& e : eps) e = rng.normal();
  return copula_uniforms_from_normals(corr, eps);
}

CopulaDraw uniforms_to_draw(const std::vector<double>& u) {
  CopulaDraw out;
  for (double x : u) {
    if (!std::isfinite(x)) throw NumericError("gate: non-finite uniform");
    const double c = std::clamp(x, kUniformFloor, 1.0 - kUniformFloor);
    out.u.push_back(c);
    out.noise_logit.push_back(std::log(c) - std::log1p(-c));
  }
  return out;
}

std::vector<double> relaxed_gate_values(const std::vector<double>& logits,
                                        const CopulaDraw& draw, double tau) {
  if (logits.size() != draw.noise_logit.size()) {
    throw std::invalid_argument("relaxed gate: dimension mismatch");
  }
  if (!(tau > 0.0)) throw std::invalid_argument("relaxed gate: temperature must be positive");
  std::vector<double> m(logits.size());
  for (std::size_t j = 0; j < m.size(); ++j) {
    m[j] = stable_sigmoid((logits[j] - draw.noise_logit[j]) / tau);
  }
  return m;
}

template <typename T>
RelaxedGate sample_relaxed_gate(const GateParams<T>& gate, const CorrelationModel& corr,
                                Rng& rng) {
  if (gate.k() != corr.k()) throw std::invalid_argument("gate and correlation sizes differ");
  const CopulaDraw draw = draw_copula_uniforms(corr, rng);
  std::vector<double> logits(gate.logits.values().begin(), gate.logits.values().end());
  return {relaxed_gate_values(logits, draw, gate.tau), draw.u};
}

template <typename T>
ad::Var<T> relaxed_gate_var(ad::Var<T> logits, const CopulaDraw& draw, double tau) {
  Tensor<T> noise(1, draw.noise_logit.size());
  for (std::size_t j = 0; j < noise.size(); ++j) noise[j] = static_cast<T>(draw.noise_logit[j]);
  return ad::relaxed_gate(logits, noise, static_cast<T>(tau));
}

template <typename T>
ad::Var<T> relaxed_gate_var(ad::Var<T> logits, const std::vector<CopulaDraw>& draws,
                            double tau) {
  const std::size_t k = logits.value().size();
  Tensor<T> noise(draws.size(), k);
  for (std::size_t b = 0; b < draws.size(); ++b) {
    if (draws[b].noise_logit.size() != k) throw std::invalid_argument("relaxed gate: draw size");
    for (std::size_t j = 0; j < k; ++j) noise(b, j) = static_cast<T>(draws[b].noise_logit[j]);
  }
  return ad::relaxed_gate(logits, noise, static_cast<T>(tau));
}

std::vector<int> hard_gate(const std::vector<double>& pi, const std::vector<double>& u) {
  if (pi.size() != u.size()) throw std::invalid_argument("hard gate: dimension mismatch");
  std::vector<int> m(pi.size());
  for (std::size_t j = 0; j < m.size(); ++j) m[j] = u[j] <= pi[j] ? 1 : 0;
  return m;
}

template <typename T>
double sparsity_loss(const GateParams<T>& gate) {
  const auto pi = gate.probabilities();
  return std::accumulate(pi.begin(), pi.end(), 0.0);
}

std::uint64_t gate_draw_count() { return g_gate_draws.load(std::memory_order_relaxed); }

#define APAR_INSTANTIATE_GATE(T)                                                           \
  template struct GateParams<T>;                                                           \
  template GateParams<T> init_gate<T>(std::size_t, double);                                \
  template RelaxedGate sample_relaxed_gate(const GateParams<T>&, const CorrelationModel&, \
                                           Rng&);                                          \
  template ad::Var<T> relaxed_gate_var(ad::Var<T>, const CopulaDraw&, double);             \
  template ad::Var<T> relaxed_gate_var(ad::Var<T>, const std::vector<CopulaDraw>&, double); \
  template double sparsity_loss(const GateParams<T>&);

APAR_INSTANTIATE_GATE(float)
APAR_INSTANTIATE_GATE(double)

}  // namespace apar
