#include "uvtm/nn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace uvtm::nn {

namespace {

LossSample checked(LossSample s) {
  if (!std::isfinite(s.value)) throw Error("neuralcore", "grad_check: loss is not finite");
  return s;
}

}  // namespace

GradCheckReport grad_check(const LossFn& loss, ParamStore<double>& store, double step, std::size_t max_coords,
                           std::uint64_t seed, double floor) {
  store.zero_grad();
  const std::uint64_t base = checked(loss(true)).pattern;
  std::vector<Mat<double>> analytic;
  analytic.reserve(store.size());
  for (const auto& p : store.all()) analytic.push_back(p.grad);

  std::mt19937_64 rng(seed);
  GradCheckReport report;
  for (std::size_t pi = 0; pi < store.size(); ++pi) {
    auto& p = store[pi];
    const auto n = static_cast<std::size_t>(p.value.size());
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (n > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    for (std::size_t c : coords) {
      double& x = p.value.data()[c];
      const double saved = x;
      x = saved + step;
      const LossSample up = checked(loss(false));
      x = saved - step;
      const LossSample down = checked(loss(false));
      x = saved;
      if (up.pattern != base || down.pattern != base) {
        report.kink_skipped++;
        continue;
      }
      const double numeric = (up.value - down.value) / (2.0 * step);
      const double a = analytic[pi].data()[c];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_parameter = p.name;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
      report.coordinates++;
    }
  }
  return report;
}

}  // namespace uvtm::nn
