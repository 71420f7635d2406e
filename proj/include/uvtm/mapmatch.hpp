#pragma once

#include <filesystem>
#include <vector>

#include "uvtm/roadnet.hpp"
#include "uvtm/trajectory.hpp"

namespace uvtm::mapmatch {

struct MatchParams {
  double candidate_radius_m = 50.0;
  double emission_sigma_m = 10.0;
  double transition_beta = 0.05;
  std::size_t max_candidates = 8;
  // Tiny per-segment cost on transitions; makes a point sitting exactly on a
  // node prefer the segment that needs no extra hop.
  double segment_penalty = 1e-6;
};

/// Candidate projections per point and the HMM scores between them.
struct Lattice {
  std::vector<std::vector<roadnet::Projection>> candidates;
  std::vector<std::vector<double>> emission;  // [point][candidate]
  // [point][prev candidate][candidate], entry 0 unused; -inf when unreachable.
  std::vector<std::vector<std::vector<double>>> transition;
};

Lattice build_lattice(const roadnet::RoadNetwork& network, const Trajectory& trajectory, const MatchParams& params);

/// Candidate index per point maximising the total log score.
std::vector<std::size_t> viterbi(const Lattice& lattice);

double assignment_score(const Lattice& lattice, const std::vector<std::size_t>& assignment);

MatchedTrajectory hmm_match(const roadnet::RoadNetwork& network, const Trajectory& trajectory,
                            const MatchParams& params = {});

void write_matched_csv(const std::vector<MatchedTrajectory>& matched, const std::filesystem::path& path);
std::vector<MatchedTrajectory> read_matched_csv(const std::filesystem::path& path);

}  // namespace uvtm::mapmatch
