#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "uvtm/nn/param_store.hpp"

namespace uvtm::nn {

struct LossSample {
  double value = 0.0;
  std::uint64_t pattern = 0;  // Graph::pattern() of the evaluation, 0 if unknown
};

/// Evaluates the loss; when `backward` is true it must also accumulate the
/// analytic gradient into the store (which grad_check zeroes beforehand).
using LossFn = std::function<LossSample(bool backward)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
  // Coordinates whose +-step probe flipped a ReLU/abs input across zero; the
  // loss is not differentiable along that interval, so they are not compared.
  std::size_t kink_skipped = 0;
};

/// Central differences on up to `max_coords` sampled coordinates per tensor.
/// Relative error is |a - n| / max(|a|, |n|, floor). Throws on a non-finite loss.
GradCheckReport grad_check(const LossFn& loss, ParamStore<double>& store, double step = 1e-3,
                           std::size_t max_coords = 200, std::uint64_t seed = 0, double floor = 1e-6);

}  // namespace uvtm::nn
