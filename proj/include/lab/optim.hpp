#pragma once

#include <vector>

#include "lab/tensor.hpp"

namespace lab {

// Bias-corrected Adam. Moment buffers are keyed by position in the parameter
// list, which must stay stable across steps.
struct AdamState {
  long step = 0;
  real learning_rate = 1e-4;
  real beta1 = 0.9;
  real beta2 = 0.999;
  real eps = 1e-8;
  std::vector<std::vector<real>> m;
  std::vector<std::vector<real>> v;
};

// One update from the gradients currently held by params; increments step.
void adam_step(std::vector<Tensor>& params, AdamState& state);

void zero_grads(std::vector<Tensor>& params);

}  // namespace lab
