#include "atlasbench/optim.hpp"

#include <cmath>

namespace atlasbench {

template <typename T>
void optimizer_step(OptimizerState<T>& state, std::span<Tensor<T>* const> params,
                    std::span<const Tensor<T>> grads) {
  if (params.size() != grads.size()) {
    throw ContractError("optimizer_step: " + std::to_string(params.size()) + " parameters but " +
                        std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) {
      throw ContractError("optimizer_step: gradient " + std::to_string(i) + " has shape " +
                          shape_str(grads[i].shape()) + ", parameter has " + shape_str(params[i]->shape()));
    }
  }
  const bool adam = state.kind == OptimizerKind::kAdam;
  if (state.first_moment.empty()) {
    for (auto* p : params) {
      state.first_moment.emplace_back(p->shape());
      if (adam) state.second_moment.emplace_back(p->shape());
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ContractError("optimizer_step: parameter count changed between steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].shape() != params[i]->shape()) {
      throw ContractError("optimizer_step: moment buffer " + std::to_string(i) + " does not match parameter shape");
    }
  }
  ++state.step;

  if (!adam) {
    const T lr = static_cast<T>(state.learning_rate);
    const T beta = static_cast<T>(state.momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
      T* p = params[i]->data();
      T* v = state.first_moment[i].data();
      const T* g = grads[i].data();
      for (std::size_t j = 0; j < grads[i].numel(); ++j) {
        v[j] = beta * v[j] + g[j];
        p[j] -= lr * v[j];
      }
    }
    return;
  }
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i]->data();
    T* m = state.first_moment[i].data();
    T* v = state.second_moment[i].data();
    const T* g = grads[i].data();
    for (std::size_t j = 0; j < grads[i].numel(); ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      const double mhat = static_cast<double>(m[j]) / c1;
      const double vhat = static_cast<double>(v[j]) / c2;
      p[j] -= static_cast<T>(state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

template <typename T>
void optimizer_step(OptimizerState<T>& state, std::vector<Var<T>>& params, const Gradients<T>& grads) {
  std::vector<Tensor<T>*> ps;
  std::vector<Tensor<T>> gs;
  ps.reserve(params.size());
  gs.reserve(params.size());
  for (auto& p : params) {
    ps.push_back(&p.mutable_value());
    gs.push_back(grads.of(p));
  }
  optimizer_step<T>(state, std::span<Tensor<T>* const>(ps), std::span<const Tensor<T>>(gs));
}

template void optimizer_step(OptimizerState<float>&, std::span<Tensor<float>* const>,
                             std::span<const Tensor<float>>);
template void optimizer_step(OptimizerState<double>&, std::span<Tensor<double>* const>,
                             std::span<const Tensor<double>>);
template void optimizer_step(OptimizerState<float>&, std::vector<Var<float>>&, const Gradients<float>&);
template void optimizer_step(OptimizerState<double>&, std::vector<Var<double>>&, const Gradients<double>&);

}  // namespace atlasbench
