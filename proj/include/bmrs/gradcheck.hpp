#pragma once

#include <span>
#include <string>
#include <vector>

#include "bmrs/network.hpp"

namespace bmrs {

struct GradCheckEntry {
  std::string param;  // e.g. "layer 2 gate log_sigma"
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

struct GradCheckResult {
  std::vector<GradCheckEntry> entries;
  double max_rel_error() const;
};

/// Loss used for the check: mean CE + kl_weight * KL_total with the noise draws held fixed.
double objective(Network& net, const Tensor& x, std::span<const int> labels,
                 const GateDraws& draws, double kl_weight);

/// Compares analytic gradients of `objective` with central differences of
/// step h for every trainable scalar. Relative error uses
/// max(|analytic|, |numeric|, floor) as the denominator.
GradCheckResult gradient_check(Network& net, const Tensor& x, std::span<const int> labels,
                               const GateDraws& draws, double kl_weight, double h = 1e-4,
                               double floor = 1e-7);

}  // namespace bmrs
