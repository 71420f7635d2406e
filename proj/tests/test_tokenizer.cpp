#include <algorithm>
#include <random>
#include <tuple>

#include "doctest.h"
#include "fixtures.hpp"
#include "uvtm/error.hpp"
#include "uvtm/tokenizer.hpp"

using namespace uvtm;
using namespace uvtm::tokenizer;

namespace {

// First synthetic trip with at least n points, cut to n, with its exact ground truth.
struct Line {
  Trajectory dense;
  MatchedTrajectory matched;
};

Line line_of(const roadnet::RoadNetwork& net, std::size_t n) {
  const auto data = fixtures::trips(net, 200, 99);
  for (std::size_t i = 0; i < data.dataset.trajectories.size(); ++i)
    if (data.dataset.trajectories[i].points.size() >= n) {
      Line l{data.dataset.trajectories[i], data.ground_truth[i]};
      l.dense.points.resize(n);
      l.matched.points.resize(n);
      return l;
    }
  FAIL("no trajectory long enough");
  return {};
}

// Expected input layout for a sparse trajectory: 'k' kept point, 'm' gap mask.
std::string layout(const std::vector<std::size_t>& kept) {
  std::string s;
  for (std::size_t j = 0; j < kept.size(); ++j) {
    if (j > 0 && kept[j] > kept[j - 1] + 1) s += 'm';
    s += 'k';
  }
  return s;
}

}  // namespace

TEST_CASE("point tuple from complete inputs") {
  const auto net = fixtures::grid();
  const LngLat c = net.locate(3, 0.5);
  const Tuple t = point_tuple(c, 130.0, roadnet::RoadPosition{3, 0.5}, net, 100.0, 100.0);
  REQUIRE(t.spatial_value());
  CHECK(t.spatial_value()->lng == c.lng);
  const auto& omega = t.spatial_value()->omega;
  CHECK(std::find(omega.begin(), omega.end(), 3) != omega.end());
  CHECK(omega == net.neighbors_within(c, 100.0));
  REQUIRE(t.temporal_value());
  CHECK(t.temporal_value()->t_norm == 30.0);
  REQUIRE(t.road_value());
  CHECK(t.road_value()->segment == 3);
  CHECK(t.road_value()->fraction == 0.5);
  CHECK_FALSE(t.has_mask());
}

TEST_CASE("missing domains become mask tokens and the first point has zero time") {
  const auto net = fixtures::grid();
  const LngLat c = net.locate(1, 0.2);
  const Tuple t = point_tuple(c, 50.0, std::nullopt, net, 100.0, 50.0);
  CHECK(std::get<Token>(t.road) == Token::Mask);
  CHECK(t.temporal_value()->t_norm == 0.0);
  CHECK(t.has_mask());
  CHECK_FALSE(t.is(Token::Mask));
  CHECK(Tuple::special(Token::Mask).is(Token::Mask));
  CHECK(Tuple::special(Token::End).is(Token::End));
  CHECK_THROWS_AS(point_tuple(c, 1.0, std::nullopt, net, 0.0, 0.0), Error);
}

TEST_CASE("nine dense points at four-step resampling") {
  const auto net = fixtures::grid();
  const auto l = line_of(net, 9);
  const auto sparse = trajdata::resample(l.dense, 15, 60);
  std::mt19937_64 rng(0);
  const auto plan = build_pretrain_plan(l.dense, l.matched, sparse, false, rng, net, 100.0);
  REQUIRE(plan.inputs.size() == 5);
  CHECK_FALSE(plan.inputs[0].tuple.is(Token::Mask));
  CHECK(plan.inputs[1].tuple.is(Token::Mask));
  CHECK_FALSE(plan.inputs[2].tuple.is(Token::Mask));
  CHECK(plan.inputs[3].tuple.is(Token::Mask));
  CHECK_FALSE(plan.inputs[4].tuple.is(Token::Mask));
  REQUIRE(plan.blocks.size() == 5);
  CHECK(plan.block_order == std::vector<std::size_t>{0, 1, 2, 3, 4});
  for (const auto& b : plan.blocks) {
    const bool gap = plan.inputs[b.anchor].tuple.is(Token::Mask);
    CHECK(b.targets.size() == (gap ? 4u : 2u));
    CHECK(b.targets.back().is(Token::End));
  }
  for (std::size_t k : {0u, 2u, 4u}) CHECK(std::get<Token>(plan.inputs[k].tuple.road) == Token::Mask);
}

TEST_CASE("input layout and block sizes follow an independent enumerator") {
  const auto net = fixtures::grid();
  const auto data = fixtures::trips(net, 60, 12);
  std::mt19937_64 rng(4);
  for (std::size_t i = 0; i < data.dataset.trajectories.size(); ++i) {
    const auto& dense = data.dataset.trajectories[i];
    for (double mu : {15.0, 30.0, 60.0, 120.0}) {
      const auto sparse = trajdata::resample(dense, 15, mu);
      const auto plan = build_pretrain_plan(dense, data.ground_truth[i], sparse, false, rng, net, 100.0);
      std::vector<std::size_t> kept;
      for (const auto& e : sparse.entries) kept.push_back(e.dense_index);
      std::string got;
      for (const auto& in : plan.inputs) got += in.tuple.is(Token::Mask) ? 'm' : 'k';
      CHECK(got == layout(kept));
      std::size_t supervised = 0;
      for (const auto& b : plan.blocks) supervised += b.targets.size() - 1;
      CHECK(supervised == dense.points.size());
      std::vector<int> per_anchor(plan.inputs.size(), 0);
      for (const auto& b : plan.blocks) per_anchor[b.anchor]++;
      for (std::size_t k = 0; k < plan.inputs.size(); ++k) CHECK(per_anchor[k] == (plan.inputs[k].tuple.has_mask() ? 1 : 0));
    }
  }
}

TEST_CASE("dropped features appear as masked slots of the kept tuples") {
  const auto net = fixtures::grid();
  const auto l = line_of(net, 9);
  auto sparse = trajdata::resample(l.dense, 15, 30);
  sparse.entries[1].coord.reset();
  sparse.entries[2].t.reset();
  std::mt19937_64 rng(0);
  const auto plan = build_pretrain_plan(l.dense, l.matched, sparse, false, rng, net, 100.0);
  // inputs: k m k m k ...
  CHECK(std::get<Token>(plan.inputs[2].tuple.spatial) == Token::Mask);
  CHECK(plan.inputs[2].tuple.temporal_value());
  CHECK(std::get<Token>(plan.inputs[4].tuple.temporal) == Token::Mask);
  CHECK(plan.inputs[4].tuple.spatial_value());
  // The blocks still carry the complete ground truth.
  CHECK_FALSE(plan.blocks[2].targets[0].has_mask());
}

TEST_CASE("misaligned sparse trajectories are rejected") {
  const auto net = fixtures::grid();
  const auto l = line_of(net, 9);
  std::mt19937_64 rng(0);
  auto sparse = trajdata::resample(l.dense, 15, 60);
  sparse.entries[1].dense_index = 20;
  CHECK_THROWS_AS(build_pretrain_plan(l.dense, l.matched, sparse, false, rng, net, 100.0), Error);
  sparse = trajdata::resample(l.dense, 15, 60);
  std::swap(sparse.entries[0], sparse.entries[1]);
  CHECK_THROWS_AS(build_pretrain_plan(l.dense, l.matched, sparse, false, rng, net, 100.0), Error);
  sparse = trajdata::resample(l.dense, 15, 60);
  sparse.entries.pop_back();
  CHECK_THROWS_AS(build_pretrain_plan(l.dense, l.matched, sparse, false, rng, net, 100.0), Error);
}

TEST_CASE("a gap block shares the first-layer position of its anchor") {
  const auto net = fixtures::grid();
  const auto l = line_of(net, 4);
  // Kept dense points 1 and 4 (0-based 0 and 3): input <g1, [m], g4>.
  const auto sparse = trajdata::resample(l.dense, 15, 45);
  std::mt19937_64 rng(0);
  const auto plan = build_pretrain_plan(l.dense, l.matched, sparse, false, rng, net, 100.0);
  REQUIRE(plan.inputs.size() == 3);
  const auto seq = assign_positions(plan);
  std::vector<int> gap_p2;
  for (const auto& it : seq.items) {
    if (it.role == ItemRole::Input) CHECK(it.p2 == 0);
    if (it.role == ItemRole::Generated && it.p1 == 2) gap_p2.push_back(it.p2);
  }
  CHECK(gap_p2 == std::vector<int>{1, 2, 3});
  CHECK(seq.items.size() == 3 + 2 + 3 + 2);
}

TEST_CASE("positions, start shift and class token") {
  const auto net = fixtures::grid();
  const auto l = line_of(net, 10);
  const auto sparse = trajdata::resample(l.dense, 15, 60);
  std::mt19937_64 rng(7);
  const auto plan = build_pretrain_plan(l.dense, l.matched, sparse, true, rng, net, 100.0, true);
  const auto seq = assign_positions(plan);
  std::size_t expect = 1 + plan.inputs.size();
  for (const auto& b : plan.blocks) expect += b.targets.size();
  CHECK(seq.items.size() == expect);
  CHECK(seq.num_inputs == 1 + plan.inputs.size());
  CHECK(seq.items[0].role == ItemRole::Cls);
  CHECK(seq.items[0].p1 == 0);
  for (std::size_t k = 0; k < plan.inputs.size(); ++k) {
    CHECK(seq.items[k + 1].p1 == static_cast<int>(k) + 1);
    CHECK(seq.items[k + 1].p2 == 0);
  }
  std::size_t pos = seq.num_inputs;
  for (std::size_t b : plan.block_order) {
    const auto& block = plan.blocks[b];
    for (std::size_t j = 0; j < block.targets.size(); ++j, ++pos) {
      const auto& it = seq.items[pos];
      CHECK(it.role == ItemRole::Generated);
      CHECK(it.p1 == static_cast<int>(block.anchor) + 1);
      CHECK(it.p2 == static_cast<int>(j) + 1);
      CHECK(*it.target == block.targets[j]);
      CHECK(it.tuple == (j == 0 ? Tuple::special(Token::Start) : block.targets[j - 1]));
    }
  }
}

TEST_CASE("shuffle permutes blocks without changing the position-target multiset") {
  const auto net = fixtures::grid();
  const auto data = fixtures::trips(net, 30, 31);
  for (std::size_t i = 0; i < data.dataset.trajectories.size(); ++i) {
    const auto& dense = data.dataset.trajectories[i];
    const auto sparse = trajdata::resample(dense, 15, 30);
    std::mt19937_64 a(1), b(i + 100);
    const auto plain = build_pretrain_plan(dense, data.ground_truth[i], sparse, false, a, net, 100.0);
    const auto shuffled = build_pretrain_plan(dense, data.ground_truth[i], sparse, true, b, net, 100.0);
    auto order = shuffled.block_order;
    std::sort(order.begin(), order.end());
    CHECK(order == plain.block_order);
    auto triples = [](const PositionedSequence& s) {
      std::vector<std::tuple<int, int, std::size_t>> out;
      std::vector<Tuple> targets;
      for (const auto& it : s.items)
        if (it.target) {
          std::size_t idx = std::find(targets.begin(), targets.end(), *it.target) - targets.begin();
          if (idx == targets.size()) targets.push_back(*it.target);
          out.emplace_back(it.p1, it.p2, idx);
        }
      return std::make_pair(out, targets);
    };
    auto [ta, ua] = triples(assign_positions(plain));
    auto [tb, ub] = triples(assign_positions(shuffled));
    // Re-key the shuffled indices onto the plain target list.
    for (auto& t : tb) {
      const Tuple& tuple = ub[std::get<2>(t)];
      std::get<2>(t) = std::find(ua.begin(), ua.end(), tuple) - ua.begin();
    }
    std::sort(ta.begin(), ta.end());
    std::sort(tb.begin(), tb.end());
    CHECK(ta == tb);
  }
}

TEST_CASE("normalize_plan rejects broken plans") {
  SequencePlan plan;
  plan.inputs.push_back(InputItem{Tuple::special(Token::Mask), 0});
  plan.blocks.push_back(TargetBlock{3, {Tuple::special(Token::End)}});
  CHECK_THROWS_AS(normalize_plan(plan), Error);
  CHECK_THROWS_AS(assign_positions(plan), Error);
  plan.blocks[0].anchor = 0;
  plan.blocks[0].targets = {Tuple::special(Token::Mask)};
  CHECK_THROWS_AS(normalize_plan(plan), Error);
  plan.blocks[0].targets = {Tuple::special(Token::End)};
  plan.block_order = {0, 0};
  CHECK_THROWS_AS(normalize_plan(plan), Error);
  plan.block_order.clear();
  normalize_plan(plan);
  CHECK(plan.block_order == std::vector<std::size_t>{0});
  CHECK(plan.inputs[0].p1 == 1);
}

TEST_CASE("detokenization reproduces the dense matched trajectory") {
  const auto net = fixtures::grid();
  const auto data = fixtures::trips(net, 1000, 2718);
  std::mt19937_64 rng(3);
  for (double mu : {60.0, 120.0, 240.0}) {
    std::size_t exact = 0;
    for (std::size_t i = 0; i < data.dataset.trajectories.size(); ++i) {
      const auto& dense = data.dataset.trajectories[i];
      const auto& matched = data.ground_truth[i];
      const auto plan =
          build_pretrain_plan(dense, matched, trajdata::resample(dense, 15, mu), true, rng, net, 100.0, true);
      const auto pts = detokenize(plan);
      bool ok = pts.size() == dense.points.size();
      for (std::size_t k = 0; ok && k < pts.size(); ++k) {
        ok = pts[k].coord == dense.points[k].coord() && pts[k].t == dense.points[k].t &&
             pts[k].road == matched.points[k].position();
      }
      exact += ok;
    }
    CHECK(exact == data.dataset.trajectories.size());
  }
}

TEST_CASE("dense plan carries every ground-truth tuple and no blocks") {
  const auto net = fixtures::grid();
  const auto l = line_of(net, 8);
  const auto plan = build_dense_plan(l.dense, l.matched, net, 100.0, true);
  CHECK(plan.with_cls);
  CHECK(plan.blocks.empty());
  REQUIRE(plan.inputs.size() == 8);
  for (std::size_t i = 0; i < 8; ++i)
    CHECK(plan.inputs[i].tuple == ground_truth_tuple(l.dense, l.matched, i, net, 100.0, l.dense.points[0].t));
}
