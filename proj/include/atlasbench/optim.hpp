#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "atlasbench/autograd.hpp"

namespace atlasbench {

enum class OptimizerKind { kSgdMomentum, kAdam };

/// Optimizer hyperparameters plus per-parameter moment buffers. Buffers are
/// sized on the first step and must keep matching the parameters afterwards.
template <typename T>
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kSgdMomentum;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<Tensor<T>> first_moment;   // velocity for SGD, m for Adam
  std::vector<Tensor<T>> second_moment;  // Adam only
  std::uint64_t step = 0;

  static OptimizerState sgd_momentum(double lr, double beta = 0.9) {
    OptimizerState s;
    s.kind = OptimizerKind::kSgdMomentum;
    s.learning_rate = lr;
    s.momentum = beta;
    return s;
  }
  static OptimizerState adam(double lr) {
    OptimizerState s;
    s.kind = OptimizerKind::kAdam;
    s.learning_rate = lr;
    return s;
  }
};

/// One update. SGD: v <- beta v + g; p <- p - lr v. Adam: bias-corrected
/// moments. Parameters are updated in place.
template <typename T>
void optimizer_step(OptimizerState<T>& state, std::span<Tensor<T>* const> params,
                    std::span<const Tensor<T>> grads);

/// Convenience overload over graph leaves.
template <typename T>
void optimizer_step(OptimizerState<T>& state, std::vector<Var<T>>& params, const Gradients<T>& grads);

}  // namespace atlasbench
