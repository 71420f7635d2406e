#pragma once

#include "uvtm/nn/param_store.hpp"

namespace uvtm::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update from the gradients held in the store. Throws,
/// naming the parameter, when a gradient is not finite. Gradients are left as is.
template <typename T>
void adam_step(ParamStore<T>& store, const AdamConfig& config);

}  // namespace uvtm::nn
