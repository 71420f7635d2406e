#pragma once

#include "uvtm/roadnet.hpp"
#include "uvtm/trajdata.hpp"

namespace fixtures {

inline constexpr double kOriginLng = 104.06;
inline constexpr double kOriginLat = 30.66;

/// 6 x 6 lattice, 100 m spacing.
inline uvtm::roadnet::RoadNetwork grid(int rows = 6, int cols = 6, std::uint64_t seed = 1) {
  return uvtm::roadnet::synth_grid_network(rows, cols, 100.0, kOriginLng, kOriginLat, seed);
}

inline uvtm::trajdata::SynthResult trips(const uvtm::roadnet::RoadNetwork& net, std::size_t n, std::uint64_t seed,
                                         double eta = 15.0) {
  uvtm::trajdata::SynthConfig cfg;
  cfg.eta = eta;
  cfg.seed = seed;
  return uvtm::trajdata::synth_trajectories(net, n, cfg);
}

}  // namespace fixtures
