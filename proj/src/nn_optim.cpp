#include "uvtm/nn/optim.hpp"

#include <cmath>

namespace uvtm::nn {

template <typename T>
void adam_step(ParamStore<T>& store, const AdamConfig& config) {
  for (const auto& p : store.all()) {
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols())
      throw Error("neuralcore", "gradient shape mismatch for parameter " + p.name);
    if (!p.grad.allFinite()) throw Error("neuralcore", "non-finite gradient in parameter " + p.name);
  }
  store.step += 1;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(store.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(store.step));
  const T b1 = static_cast<T>(config.beta1);
  const T b2 = static_cast<T>(config.beta2);
  const T step_size = static_cast<T>(config.lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(config.eps);
  for (auto& p : store.all()) {
    p.m = b1 * p.m + (T(1) - b1) * p.grad;
    p.v = b2 * p.v + (T(1) - b2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= step_size * p.m.array() / ((p.v.array() * inv_bc2).sqrt() + eps);
  }
}

template void adam_step<float>(ParamStore<float>&, const AdamConfig&);
template void adam_step<double>(ParamStore<double>&, const AdamConfig&);

}  // namespace uvtm::nn
