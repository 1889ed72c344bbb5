#pragma once

#include <cstdint>

#include "fedring/wire.hpp"

namespace fedring::ml {

/// Adam with bias correction and a cosine-annealed learning rate.
struct OptimizerState {
  std::uint64_t step = 0;
  double lr_max = 1e-4;
  double lr_min = 1e-5;
  std::uint64_t total_steps = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  wire::WeightSet first_moment;
  wire::WeightSet second_moment;
};

/// lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi * min(step, total) / total)).
double cosine_lr(std::uint64_t step, const OptimizerState& opt);

/// Applies one Adam update in place. Moments are created lazily with the
/// layout of `weights`; a layout change throws wire::WireError.
void adam_step(OptimizerState& opt, wire::WeightSet& weights, const wire::WeightSet& grads);

}  // namespace fedring::ml
