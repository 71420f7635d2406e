#pragma once

#include <cstdint>
#include <vector>

#include "uvtm/geo.hpp"
#include "uvtm/roadnet.hpp"

namespace uvtm {

using TrajectoryId = std::int64_t;

struct TrajPoint {
  double lng = 0.0;
  double lat = 0.0;
  double t = 0.0;  // seconds

  LngLat coord() const { return {lng, lat}; }
  bool operator==(const TrajPoint&) const = default;
};

struct Trajectory {
  TrajectoryId id = 0;
  std::vector<TrajPoint> points;

  bool operator==(const Trajectory&) const = default;
};

struct MatchedPoint {
  roadnet::SegmentId segment = 0;
  double fraction = 0.0;
  double t = 0.0;

  roadnet::RoadPosition position() const { return {segment, fraction}; }
  bool operator==(const MatchedPoint&) const = default;
};

struct MatchedTrajectory {
  TrajectoryId source_id = 0;
  std::vector<MatchedPoint> points;

  bool operator==(const MatchedTrajectory&) const = default;
};

}  // namespace uvtm
