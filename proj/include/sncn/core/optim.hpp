#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "sncn/core/error.hpp"
#include "sncn/core/tensor.hpp"

namespace sncn {

struct SgdOptions {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// Momentum buffers for a fixed, ordered list of parameters.
template <typename T> struct OptimState {
  SgdOptions options;
  std::vector<Tensor<T>> velocity;
};

/// Classic momentum SGD:  v <- m*v + g + wd*p ;  p <- p - lr*v.
///
/// `params` and `grads` are parallel lists. Momentum buffers are created on
/// the first call and must keep matching shapes afterwards.
template <typename T>
void sgd_step(std::vector<Tensor<T> *> &params, const std::vector<Tensor<T>> &grads, OptimState<T> &state) {
  if (params.size() != grads.size())
    throw ShapeError("sgd_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  if (state.velocity.empty())
    for (const Tensor<T> *p : params) state.velocity.emplace_back(p->shape(), T{});
  if (state.velocity.size() != params.size())
    throw ShapeError("sgd_step: optimizer state tracks " + std::to_string(state.velocity.size()) +
                     " parameters, got " + std::to_string(params.size()));
  const T lr = static_cast<T>(state.options.lr);
  const T mom = static_cast<T>(state.options.momentum);
  const T wd = static_cast<T>(state.options.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> &p = *params[i];
    const Tensor<T> &g = grads[i];
    Tensor<T> &v = state.velocity[i];
    if (p.shape() != g.shape() || p.shape() != v.shape())
      throw ShapeError("sgd_step: parameter " + std::to_string(i) + " shape " + shape_str(p.shape()) +
                       ", gradient " + shape_str(g.shape()) + ", momentum " + shape_str(v.shape()));
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = mom * v[j] + g[j] + wd * p[j];
      p[j] -= lr * v[j];
    }
  }
}

} // namespace sncn
