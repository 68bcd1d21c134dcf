#pragma once

#include <vector>

#include "mmt/model.hpp"

namespace mmt {

struct AdamConfig {
  double lr = 5e-4;  // peak learning rate
  long warmup_steps = 2000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double weight_decay = 0.0;
};

// Linear warmup to the peak at `warmup_steps`, then decay with the inverse
// square root of the step. Steps count from 1; warmup_steps = 0 gives a
// constant rate.
double inverse_sqrt_lr(const AdamConfig& config, long step);

struct AdamState {
  long step = 0;
  std::vector<MatrixF> first_moment;
  std::vector<MatrixF> second_moment;
};

// Adam with bias correction and decoupled weight decay. Parameters without a
// gradient are treated as having a zero gradient. `grad_scale` multiplies
// every gradient first (1/update_freq during accumulation). Returns the
// learning rate used.
double adam_update(std::vector<NamedParameter<float>>& params, AdamState& state, const AdamConfig& config,
                   double grad_scale = 1.0);

}  // namespace mmt
