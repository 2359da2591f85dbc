// SPDX-License-Identifier: Apache-2.0
#include "fedsim/sgd.hpp"

#include "fedsim/errors.hpp"

namespace fedsim {

SgdState::SgdState(double lr, double mu) : learning_rate(lr), momentum(mu) {
  if (!(lr >= 0.0)) throw ContractError("learning rate must be non-negative");
  if (!(mu >= 0.0 && mu < 1.0)) throw ContractError("momentum must lie in [0, 1)");
}

void sgd_step(std::span<Tensor> params, std::span<const Tensor> grads, SgdState& state) {
  if (params.size() != grads.size()) {
    throw ContractError("sgd_step: " + std::to_string(params.size()) + " parameters but " +
                        std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape()) {
      throw ContractError("sgd_step: parameter " + std::to_string(i) + " has shape " +
                          shape_string(params[i].shape()) + " but gradient has " +
                          shape_string(grads[i].shape()));
    }
  }
  const double lr = state.learning_rate;
  if (state.momentum == 0.0) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      double* p = params[i].data();
      const double* g = grads[i].data();
      for (std::size_t k = 0; k < params[i].size(); ++k) p[k] -= lr * g[k];
    }
    return;
  }
  if (state.velocity.empty()) {
    for (const Tensor& p : params) state.velocity.emplace_back(p.shape());
  }
  if (state.velocity.size() != params.size()) {
    throw ContractError("sgd_step: velocity buffers do not match the parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.velocity[i].shape() != params[i].shape()) {
      throw ContractError("sgd_step: velocity shape mismatch at parameter " + std::to_string(i));
    }
    double* p = params[i].data();
    double* v = state.velocity[i].data();
    const double* g = grads[i].data();
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      v[k] = state.momentum * v[k] + g[k];
      p[k] -= lr * v[k];
    }
  }
}

}  // namespace fedsim
