#pragma once

// Central finite-difference checks of tape gradients in 64-bit mode.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "apar/params.hpp"
#include "apar/rng.hpp"

namespace apar {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  // Gradients smaller than the floor are judged on |a - n| < tolerance * floor.
  double floor = 1e-4;
  std::size_t min_coordinates = 200;
  std::size_t per_tensor = 8;
  // Every coordinate of tensors with these names is checked.
  std::vector<std::string> exhaustive;
};

struct GradcheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  std::string loss;
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0.0;
  std::size_t failures = 0;
  double tolerance = 0.0;

  bool passed() const { return failures == 0 && !entries.empty(); }
};

// Compares `analytic` to (f(x + h) - f(x - h)) / 2h on sampled coordinates:
// up to per_tensor per tensor, then random extras until min_coordinates.
// `loss` must be deterministic for fixed parameter values.
GradcheckReport finite_difference_check(const std::string& loss_name,
                                        const ParamList<double>& params,
                                        const GradientSet<double>& analytic,
                                        const std::function<double()>& loss, Rng& rng,
                                        const GradcheckOptions& options = {});

// Small fixed problem (d = 8, L = 2, 2 heads, k = 5 with mixed feature kinds,
// dropout active under a fixed seed) checked for the pair-regression loss and
// the adaptive-regularized loss including gate logits.
GradcheckReport gradcheck_pretrain(std::uint64_t seed, const GradcheckOptions& options = {});
GradcheckReport gradcheck_finetune(std::uint64_t seed, const GradcheckOptions& options = {});

}  // namespace apar
