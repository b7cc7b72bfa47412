#pragma once

#include <cstdint>
#include <span>

#include "bmrs/tensor.hpp"

namespace bmrs {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moment accumulators live in each Param so they follow it through pruning.
struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update of every param from its current grad.
void adam_step(AdamState& state, std::span<Param* const> params);

}  // namespace bmrs
