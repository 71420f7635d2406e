#include "uvtm/tokenizer.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "uvtm/error.hpp"

namespace uvtm::tokenizer {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error("tokenizer", msg); }

template <typename Slot>
bool slot_is(const Slot& slot, Token token) {
  const Token* t = std::get_if<Token>(&slot);
  return t && *t == token;
}

}  // namespace

bool Tuple::is(Token token) const {
  return slot_is(spatial, token) && slot_is(temporal, token) && slot_is(road, token);
}

bool Tuple::has_mask() const {
  return slot_is(spatial, Token::Mask) || slot_is(temporal, Token::Mask) || slot_is(road, Token::Mask);
}

Tuple point_tuple(std::optional<LngLat> coord, std::optional<double> timestamp, std::optional<roadnet::RoadPosition> road,
                 const roadnet::RoadNetwork& network, double delta_m, double t0) {
  if (!(delta_m > 0.0)) fail("delta must be positive");
  Tuple out;
  if (coord) out.spatial = Spatial{coord->lng, coord->lat, network.neighbors_within(*coord, delta_m)};
  if (timestamp) out.temporal = Temporal{*timestamp - t0};
  if (road) out.road = Road{road->segment, road->fraction};
  return out;
}

Tuple ground_truth_tuple(const Trajectory& dense, const MatchedTrajectory& matched, std::size_t i,
                         const roadnet::RoadNetwork& network, double delta_m, double t0) {
  const auto& p = dense.points.at(i);
  const auto& m = matched.points.at(i);
  return point_tuple(p.coord(), p.t, m.position(), network, delta_m, t0);
}

SequencePlan build_pretrain_plan(const Trajectory& dense, const MatchedTrajectory& matched,
                                 const trajdata::SparseTrajectory& sparse, bool shuffle, std::mt19937_64& rng,
                                 const roadnet::RoadNetwork& network, double delta_m, bool with_cls) {
  if (dense.points.size() != matched.points.size()) fail("dense and matched trajectories differ in length");
  if (sparse.entries.empty()) fail("sparse trajectory is empty");
  for (std::size_t k = 0; k < sparse.entries.size(); ++k) {
    const std::size_t idx = sparse.entries[k].dense_index;
    if (idx >= dense.points.size() || (k > 0 && idx <= sparse.entries[k - 1].dense_index))
      fail("sparse entry " + std::to_string(k) + " is misaligned with the dense trajectory");
  }
  if (sparse.entries.front().dense_index != 0 || sparse.entries.back().dense_index + 1 != dense.points.size())
    fail("sparse trajectory must keep the first and last dense points");
  if (!sparse.entries.front().t) fail("first sparse entry must keep its timestamp");

  SequencePlan plan;
  plan.with_cls = with_cls;
  plan.t0 = *sparse.entries.front().t;
  const double t0 = plan.t0;

  for (std::size_t k = 0; k < sparse.entries.size(); ++k) {
    const auto& e = sparse.entries[k];
    if (k > 0) {
      const std::size_t prev = sparse.entries[k - 1].dense_index;
      if (e.dense_index > prev + 1) {
        TargetBlock gap;
        gap.anchor = plan.inputs.size();
        for (std::size_t i = prev + 1; i < e.dense_index; ++i)
          gap.targets.push_back(ground_truth_tuple(dense, matched, i, network, delta_m, t0));
        gap.targets.push_back(Tuple::special(Token::End));
        plan.inputs.push_back(InputItem{Tuple::special(Token::Mask), 0});
        plan.blocks.push_back(std::move(gap));
      }
    }
    TargetBlock own;
    own.anchor = plan.inputs.size();
    own.targets = {ground_truth_tuple(dense, matched, e.dense_index, network, delta_m, t0), Tuple::special(Token::End)};
    plan.inputs.push_back(InputItem{point_tuple(e.coord, e.t, std::nullopt, network, delta_m, t0), 0});
    plan.blocks.push_back(std::move(own));
  }
  plan.block_order.resize(plan.blocks.size());
  std::iota(plan.block_order.begin(), plan.block_order.end(), 0);
  if (shuffle) std::shuffle(plan.block_order.begin(), plan.block_order.end(), rng);
  normalize_plan(plan);
  return plan;
}

SequencePlan build_dense_plan(const Trajectory& dense, const MatchedTrajectory& matched,
                              const roadnet::RoadNetwork& network, double delta_m, bool with_cls) {
  if (dense.points.empty()) fail("dense trajectory is empty");
  if (dense.points.size() != matched.points.size()) fail("dense and matched trajectories differ in length");
  SequencePlan plan;
  plan.with_cls = with_cls;
  plan.t0 = dense.points.front().t;
  for (std::size_t i = 0; i < dense.points.size(); ++i)
    plan.inputs.push_back(InputItem{ground_truth_tuple(dense, matched, i, network, delta_m, plan.t0), 0});
  normalize_plan(plan);
  return plan;
}

void normalize_plan(SequencePlan& plan) {
  for (std::size_t k = 0; k < plan.inputs.size(); ++k) plan.inputs[k].p1 = static_cast<int>(k) + 1;
  if (plan.block_order.empty()) {
    plan.block_order.resize(plan.blocks.size());
    std::iota(plan.block_order.begin(), plan.block_order.end(), 0);
  }
  if (plan.block_order.size() != plan.blocks.size()) fail("block order does not cover every block");
  std::vector<char> used(plan.blocks.size(), 0);
  for (std::size_t b : plan.block_order) {
    if (b >= plan.blocks.size() || used[b]) fail("block order is not a permutation");
    used[b] = 1;
  }
  std::vector<int> per_anchor(plan.inputs.size(), 0);
  for (const auto& block : plan.blocks) {
    if (block.anchor >= plan.inputs.size()) fail("block without anchor input " + std::to_string(block.anchor));
    if (block.targets.empty() || !block.targets.back().is(Token::End)) fail("block must end with the end tuple");
    per_anchor[block.anchor]++;
  }
  for (std::size_t k = 0; k < plan.inputs.size(); ++k) {
    if (per_anchor[k] > 1) fail("input " + std::to_string(k) + " has more than one block");
  }
}

PositionedSequence assign_positions(const SequencePlan& plan) {
  for (const auto& block : plan.blocks) {
    if (block.anchor >= plan.inputs.size()) fail("block without anchor input " + std::to_string(block.anchor));
  }
  PositionedSequence seq;
  std::size_t total = plan.inputs.size() + (plan.with_cls ? 1 : 0);
  for (const auto& block : plan.blocks) total += block.targets.size();
  seq.items.reserve(total);
  if (plan.with_cls) seq.items.push_back({ItemRole::Cls, Tuple::special(Token::Cls), 0, 0, std::nullopt});
  for (std::size_t k = 0; k < plan.inputs.size(); ++k) {
    seq.items.push_back({ItemRole::Input, plan.inputs[k].tuple, static_cast<int>(k) + 1, 0, std::nullopt});
  }
  seq.num_inputs = seq.items.size();
  std::vector<std::size_t> order = plan.block_order;
  if (order.empty()) {
    order.resize(plan.blocks.size());
    std::iota(order.begin(), order.end(), 0);
  }
  for (std::size_t b : order) {
    const TargetBlock& block = plan.blocks.at(b);
    const int p1 = static_cast<int>(block.anchor) + 1;
    for (std::size_t j = 0; j < block.targets.size(); ++j) {
      const Tuple& fed = j == 0 ? Tuple::special(Token::Start) : block.targets[j - 1];
      seq.items.push_back({ItemRole::Generated, fed, p1, static_cast<int>(j) + 1, block.targets[j]});
    }
  }
  return seq;
}

std::vector<DecodedPoint> detokenize(const SequencePlan& plan) {
  std::vector<std::size_t> by_anchor(plan.blocks.size());
  std::iota(by_anchor.begin(), by_anchor.end(), 0);
  std::stable_sort(by_anchor.begin(), by_anchor.end(),
                   [&](std::size_t a, std::size_t b) { return plan.blocks[a].anchor < plan.blocks[b].anchor; });
  std::vector<DecodedPoint> out;
  for (std::size_t b : by_anchor) {
    for (const Tuple& t : plan.blocks[b].targets) {
      if (t.is(Token::End)) continue;
      DecodedPoint p;
      if (const auto* s = t.spatial_value()) p.coord = LngLat{s->lng, s->lat};
      if (const auto* tm = t.temporal_value()) p.t = tm->t_norm + plan.t0;
      if (const auto* r = t.road_value()) p.road = roadnet::RoadPosition{r->segment, r->fraction};
      out.push_back(p);
    }
  }
  return out;
}

}  // namespace uvtm::tokenizer
