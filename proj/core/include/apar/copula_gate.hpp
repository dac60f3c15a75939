#pragma once

// Correlated feature gates. Uniforms come from a Gaussian copula (correlated
// normals pushed through the standard-normal CDF) and drive a relaxed
// Bernoulli gate whose selection probabilities are learned as logits.

#include <cstdint>
#include <string>
#include <vector>

#include "apar/autodiff.hpp"
#include "apar/rng.hpp"
#include "apar/tabdata.hpp"
#include "apar/tensor.hpp"

namespace apar {

struct CorrelationModel {
  Tensor<double> correlation;  // k x k, unit diagonal
  double jitter = 0.0;         // added to the diagonal before factorizing
  Tensor<double> cholesky;     // lower triangular, L * L^T = R + jitter * I

  std::size_t k() const { return correlation.rows(); }
};

// Lower-triangular factor with positive diagonal. Throws NumericError on a
// pivot <= 0 and std::invalid_argument when m is not square and symmetric.
Tensor<double> cholesky(const Tensor<double>& m);

// Factorizes R with jitter 0, then 1e-8, 1e-7, ... up to 1e-2.
CorrelationModel make_correlation_model(Tensor<double> correlation);

// Pearson correlation over the dataset's numeric view (categorical ids as
// reals). Zero-variance columns get zero off-diagonal entries.
CorrelationModel estimate_correlation(const TabularDataset& data);

// Identity correlation (independent gates).
CorrelationModel independent_correlation(std::size_t k);

// Standard-normal CDF via erfc.
double normal_cdf(double x);

template <typename T>
struct GateParams {
  using value_type = T;

  Tensor<T> logits;  // 1 x k; pi = sigmoid(logits)
  double tau = 0.5;

  std::size_t k() const { return logits.size(); }
  std::vector<double> probabilities() const;
  double mean_probability() const;

  template <typename F>
  void visit(F&& f) {
    f(std::string("gate.logits"), logits);
  }
  template <typename F>
  void visit(F&& f) const {
    f(std::string("gate.logits"), logits);
  }
  template <typename U>
  GateParams<U> cast() const {
    return {logits.template cast<U>(), tau};
  }
};

// pi = 0.5 everywhere.
template <typename T>
GateParams<T> init_gate(std::size_t k, double tau);

// Copula draw. `noise_logit` is log u - log(1 - u) computed from both tails so
// it stays accurate near 0 and 1; u itself is clamped to [1e-12, 1 - 1e-12].
struct CopulaDraw {
  std::vector<double> u;
  std::vector<double> noise_logit;
};

CopulaDraw draw_copula_uniforms(const CorrelationModel& corr, Rng& rng);
// Same transform from a supplied standard-normal vector.
CopulaDraw copula_uniforms_from_normals(const CorrelationModel& corr,
                                        const std::vector<double>& eps);
// Uniforms supplied directly (clamped as above).
CopulaDraw uniforms_to_draw(const std::vector<double>& u);

struct RelaxedGate {
  std::vector<double> gate;  // in (0, 1)
  std::vector<double> u;     // the uniforms that produced it
};

// m_j = sigmoid((logit(pi_j) - logit(u_j)) / tau). Above 0.5 exactly when
// u_j < pi_j, so the tau -> 0 limit is the threshold rule of hard_gate.
std::vector<double> relaxed_gate_values(const std::vector<double>& logits,
                                        const CopulaDraw& draw, double tau);

template <typename T>
RelaxedGate sample_relaxed_gate(const GateParams<T>& gate, const CorrelationModel& corr,
                                Rng& rng);

// Tape form: gradients flow to the logits; the draw is fixed noise.
template <typename T>
ad::Var<T> relaxed_gate_var(ad::Var<T> logits, const CopulaDraw& draw, double tau);
// One independent draw per row: returns draws.size() x k.
template <typename T>
ad::Var<T> relaxed_gate_var(ad::Var<T> logits, const std::vector<CopulaDraw>& draws, double tau);

// m_j = 1 iff u_j <= pi_j.
std::vector<int> hard_gate(const std::vector<double>& pi, const std::vector<double>& u);

// sum_j pi_j.
template <typename T>
double sparsity_loss(const GateParams<T>& gate);

// Number of gate draws made by this process; lets callers verify that an
// ablation never touched the gate.
std::uint64_t gate_draw_count();

}  // namespace apar
