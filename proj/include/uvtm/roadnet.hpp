#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <unordered_map>
#include <vector>

#include "uvtm/geo.hpp"

namespace uvtm::roadnet {

using NodeId = std::int64_t;
using SegmentId = std::int32_t;

struct Node {
  NodeId id = 0;
  double lng = 0.0;
  double lat = 0.0;

  LngLat coord() const { return {lng, lat}; }
  bool operator==(const Node&) const = default;
};

struct Segment {
  SegmentId id = 0;
  NodeId from_node = 0;
  NodeId to_node = 0;
  std::vector<LngLat> polyline;
  double length_m = 0.0;

  bool operator==(const Segment&) const = default;
};

/// A location on the network: segment plus normalized along-segment position.
struct RoadPosition {
  SegmentId segment = 0;
  double fraction = 0.0;

  bool operator==(const RoadPosition&) const = default;
};

struct Projection {
  SegmentId segment = 0;
  double fraction = 0.0;
  double offset_m = 0.0;
};

struct Path {
  std::vector<SegmentId> segments;
  double distance_m = 0.0;
};

struct BoundingBox {
  double min_lng = 0.0;
  double min_lat = 0.0;
  double max_lng = 0.0;
  double max_lat = 0.0;
};

/// Default neighbour radius; the spatial index is bucketed at twice this size.
inline constexpr double kDefaultDeltaM = 100.0;

class RoadNetwork {
 public:
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<Segment>& segments() const { return segments_; }
  std::size_t num_segments() const { return segments_.size(); }
  std::size_t num_nodes() const { return nodes_.size(); }

  const Segment& segment(SegmentId id) const;
  const Node& node(NodeId id) const;
  bool has_node(NodeId id) const { return node_index_.count(id) != 0; }

  /// Out-going segment ids of a node, ascending.
  const std::vector<SegmentId>& out_segments(NodeId id) const;

  BoundingBox bounds() const { return bounds_; }

  /// Segments with geometric distance <= delta_m, nearest first (ties by id).
  std::vector<SegmentId> neighbors_within(LngLat point, double delta_m) const;

  /// Same as neighbors_within but returns the projection onto each segment.
  std::vector<Projection> candidates_within(LngLat point, double delta_m) const;

  /// Nearest segment; lowest id wins exact distance ties.
  Projection project(LngLat point) const;

  /// Projection of a point onto one specific segment.
  Projection project_onto(LngLat point, SegmentId id) const;

  LngLat locate(SegmentId id, double fraction) const;
  LngLat locate(RoadPosition pos) const { return locate(pos.segment, pos.fraction); }

  /// Directed shortest path between two road positions; nullopt when unreachable.
  std::optional<Path> shortest_path(RoadPosition src, RoadPosition dst) const;

  /// Node-to-node shortest distance; nullopt when unreachable.
  std::optional<double> node_distance(NodeId from, NodeId to) const;

  /// Node-to-node shortest path as segment list.
  std::optional<Path> node_path(NodeId from, NodeId to) const;

  /// min over both directions; throws when disconnected both ways.
  double road_distance(RoadPosition a, RoadPosition b) const;

 private:
  friend RoadNetwork build_network(std::vector<Node> nodes, std::vector<Segment> segments);

  struct Dijkstra {
    std::vector<double> dist;
    std::vector<SegmentId> pred;
  };

  double point_segment_distance(LngLat point, const Segment& seg) const;
  Dijkstra run_dijkstra(std::size_t src_index) const;
  void build_index();
  void build_distance_table();
  std::vector<SegmentId> index_candidates(LngLat point, double delta_m) const;

  std::vector<Node> nodes_;
  std::vector<Segment> segments_;
  std::unordered_map<NodeId, std::size_t> node_index_;
  std::vector<std::vector<SegmentId>> adjacency_;
  BoundingBox bounds_;

  // Uniform grid over segment bounding boxes in a network-centred frame.
  std::optional<LocalFrame> frame_;
  double cell_m_ = 2.0 * kDefaultDeltaM;
  double grid_min_x_ = 0.0;
  double grid_min_y_ = 0.0;
  int grid_cols_ = 0;
  int grid_rows_ = 0;
  std::vector<std::vector<SegmentId>> cells_;

  // All-pairs node distances for small networks; empty means on-demand search.
  std::vector<double> table_dist_;
  std::vector<SegmentId> table_pred_;
};

RoadNetwork build_network(std::vector<Node> nodes, std::vector<Segment> segments);

/// rows x cols lattice with bidirectional segments between grid neighbours.
/// The seed permutes segment id assignment.
RoadNetwork synth_grid_network(int rows, int cols, double spacing_m, double origin_lng, double origin_lat,
                               std::uint64_t seed);

/// nodes.csv + edges.csv in a directory.
void save_network(const RoadNetwork& network, const std::filesystem::path& dir);
RoadNetwork load_network(const std::filesystem::path& dir);

double polyline_length_m(const std::vector<LngLat>& polyline);

}  // namespace uvtm::roadnet
