// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

struct SgdState {
  double learning_rate = 1e-3;
  double momentum = 0.0;  // in [0, 1); 0 disables the velocity buffers
  std::vector<Tensor> velocity;

  SgdState() = default;
  explicit SgdState(double lr, double mu = 0.0);
};

// p <- p - lr * g, or with momentum v <- mu * v + g; p <- p - lr * v.
// Velocity buffers are created on first use with the parameter shapes.
void sgd_step(std::span<Tensor> params, std::span<const Tensor> grads, SgdState& state);

}  // namespace fedsim
