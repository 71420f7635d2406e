#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <vector>

#include "uvtm/roadnet.hpp"
#include "uvtm/trajectory.hpp"

namespace uvtm::trajdata {

/// Trajectories shorter than this are discarded on ingest.
inline constexpr std::size_t kMinPoints = 6;

struct Dataset {
  std::vector<Trajectory> trajectories;
  double eta = 0.0;  // sampling interval, seconds
  roadnet::BoundingBox bbox;
  double time_scale = 60.0;

  bool operator==(const Dataset& o) const {
    return trajectories == o.trajectories && eta == o.eta && time_scale == o.time_scale &&
           bbox.min_lng == o.bbox.min_lng && bbox.min_lat == o.bbox.min_lat && bbox.max_lng == o.bbox.max_lng &&
           bbox.max_lat == o.bbox.max_lat;
  }
};

struct IngestReport {
  std::size_t rows = 0;
  std::size_t rejected_irregular = 0;
  std::size_t dropped_short = 0;
};

Dataset ingest_csv(const std::filesystem::path& path, IngestReport* report = nullptr);
void write_csv(const Dataset& dataset, const std::filesystem::path& path);

roadnet::BoundingBox compute_bbox(const std::vector<Trajectory>& trajectories);

/// Builds a dataset from trajectories already sharing the interval eta.
Dataset make_dataset(std::vector<Trajectory> trajectories, double eta, double time_scale = 60.0);

struct SpeedModel {
  double min_mps = 4.0;
  double max_mps = 8.0;
};

struct SynthConfig {
  SpeedModel speed;
  double eta = 15.0;
  double noise_sigma_m = 0.0;
  std::uint64_t seed = 0;
  std::size_t min_points = kMinPoints;
  double departure_window_s = 7.0 * 86400.0;
};

struct SynthResult {
  Dataset dataset;
  std::vector<MatchedTrajectory> ground_truth;
};

struct Trip {
  Trajectory raw;
  MatchedTrajectory matched;
  double travel_time_s = 0.0;  // exact arrival minus departure
};

/// Drives a vehicle along `path` with one speed per segment, emitting a point
/// every eta seconds. The last point sits at the destination node, stamped at the
/// first multiple of eta not before the arrival so the interval stays constant.
Trip simulate_trip(const roadnet::RoadNetwork& network, const std::vector<roadnet::SegmentId>& path,
                   const std::vector<double>& speeds_mps, double eta, double departure_s, TrajectoryId id);

/// Random origin/destination trips along shortest paths, with exact ground truth.
SynthResult synth_trajectories(const roadnet::RoadNetwork& network, std::size_t n, const SynthConfig& config);

struct SparseEntry {
  std::optional<LngLat> coord;
  std::optional<double> t;
  std::size_t dense_index = 0;

  bool operator==(const SparseEntry&) const = default;
};

struct SparseTrajectory {
  TrajectoryId id = 0;
  std::vector<SparseEntry> entries;
  double mu = 0.0;

  bool operator==(const SparseTrajectory&) const = default;
};

/// Dense indices 0, k, 2k, ... (k = mu/eta) plus the final point.
std::vector<std::size_t> resample_indices(std::size_t length, double eta, double mu);

SparseTrajectory resample(const Trajectory& trajectory, double eta, double mu);

/// With probability phi per entry, removes the coordinate or the timestamp (fair
/// coin). The first entry keeps its timestamp; its coin falls on the coordinate.
SparseTrajectory drop_features(SparseTrajectory sparse, double phi, std::mt19937_64& rng);

struct DatasetSplit {
  Dataset train;
  Dataset valid;
  Dataset test;
};

/// Sort by departure time, then 80/10/10 (valid and test sizes are round(n/10)).
DatasetSplit chronological_split(const Dataset& dataset);

void write_split_manifest(const DatasetSplit& split, const std::filesystem::path& dir);

/// Dense trajectories paired index-by-index with their map-matched counterparts.
struct Corpus {
  std::vector<Trajectory> trajectories;
  std::vector<MatchedTrajectory> matched;
  double eta = 0.0;

  std::size_t size() const { return trajectories.size(); }
};

/// Pairs each trajectory of the dataset with the matched trajectory of the same
/// id. Throws when one is missing or the point counts differ.
Corpus make_corpus(const Dataset& dataset, const std::vector<MatchedTrajectory>& matched);

}  // namespace uvtm::trajdata
