#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <variant>
#include <vector>

#include "uvtm/roadnet.hpp"
#include "uvtm/trajdata.hpp"
#include "uvtm/trajectory.hpp"

namespace uvtm::tokenizer {

/// Special tokens; the value is the row in the token embedding table.
enum class Token : std::uint8_t { Mask = 0, Start = 1, End = 2, Cls = 3 };
inline constexpr int kNumTokens = 4;

struct Spatial {
  double lng = 0.0;
  double lat = 0.0;
  std::vector<roadnet::SegmentId> omega;  // segments within delta of (lng, lat)

  bool operator==(const Spatial&) const = default;
};

struct Temporal {
  double t_norm = 0.0;  // seconds since the trajectory's t0

  bool operator==(const Temporal&) const = default;
};

struct Road {
  roadnet::SegmentId segment = 0;
  double fraction = 0.0;

  bool operator==(const Road&) const = default;
};

using SpatialSlot = std::variant<Spatial, Token>;
using TemporalSlot = std::variant<Temporal, Token>;
using RoadSlot = std::variant<Road, Token>;

/// One trajectory point as three independently maskable feature domains.
struct Tuple {
  SpatialSlot spatial = Token::Mask;
  TemporalSlot temporal = Token::Mask;
  RoadSlot road = Token::Mask;

  static Tuple special(Token token) { return {token, token, token}; }

  /// True when all three slots hold `token`.
  bool is(Token token) const;
  bool has_mask() const;

  const Spatial* spatial_value() const { return std::get_if<Spatial>(&spatial); }
  const Temporal* temporal_value() const { return std::get_if<Temporal>(&temporal); }
  const Road* road_value() const { return std::get_if<Road>(&road); }

  bool operator==(const Tuple&) const = default;
};

/// Missing inputs become mask tokens. Throws when delta_m <= 0.
Tuple point_tuple(std::optional<LngLat> coord, std::optional<double> timestamp, std::optional<roadnet::RoadPosition> road,
                 const roadnet::RoadNetwork& network, double delta_m, double t0);

struct InputItem {
  Tuple tuple;
  int p1 = 0;
};

/// The generated answer for one input item; `targets` ends with the end tuple.
struct TargetBlock {
  std::size_t anchor = 0;  // index into SequencePlan::inputs
  std::vector<Tuple> targets;
};

struct SequencePlan {
  bool with_cls = false;
  std::vector<InputItem> inputs;
  std::vector<TargetBlock> blocks;
  std::vector<std::size_t> block_order;
  double t0 = 0.0;
};

enum class ItemRole : std::uint8_t { Cls, Input, Generated };

struct PositionedItem {
  ItemRole role = ItemRole::Input;
  Tuple tuple;                  // what the encoder sees at this position
  int p1 = 0;
  int p2 = 0;
  std::optional<Tuple> target;  // generated positions only
};

struct PositionedSequence {
  std::vector<PositionedItem> items;
  std::size_t num_inputs = 0;  // leading non-generated items, class token included
};

/// Ground-truth tuple of dense point i (coordinate, time, and matched road).
Tuple ground_truth_tuple(const Trajectory& dense, const MatchedTrajectory& matched, std::size_t i,
                         const roadnet::RoadNetwork& network, double delta_m, double t0);

/// Input: kept sparse points (road masked) with one fully masked tuple per gap.
/// Blocks: each kept point's full tuple, and each gap's skipped dense tuples.
SequencePlan build_pretrain_plan(const Trajectory& dense, const MatchedTrajectory& matched,
                                 const trajdata::SparseTrajectory& sparse, bool shuffle, std::mt19937_64& rng,
                                 const roadnet::RoadNetwork& network, double delta_m, bool with_cls = false);

/// Every dense point as a complete input tuple; no target blocks.
SequencePlan build_dense_plan(const Trajectory& dense, const MatchedTrajectory& matched,
                              const roadnet::RoadNetwork& network, double delta_m, bool with_cls = false);

/// Renumbers input positions (class token 0, others from 1) and fills block_order
/// with the identity when it is empty. Validates anchors.
void normalize_plan(SequencePlan& plan);

/// Inputs first, then for each block in block_order the start-shifted target stream.
PositionedSequence assign_positions(const SequencePlan& plan);

struct DecodedPoint {
  std::optional<LngLat> coord;
  std::optional<double> t;  // absolute seconds
  std::optional<roadnet::RoadPosition> road;

  bool operator==(const DecodedPoint&) const = default;
};

/// Target tuples in anchor order (end tuples skipped), times shifted back by t0.
std::vector<DecodedPoint> detokenize(const SequencePlan& plan);

}  // namespace uvtm::tokenizer
