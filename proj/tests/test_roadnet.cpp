#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <set>

#include "doctest.h"
#include "fixtures.hpp"
#include "uvtm/error.hpp"
#include "uvtm/roadnet.hpp"

using namespace uvtm;
using namespace uvtm::roadnet;

namespace {

// Independent planar distance from a point to a polyline, projected around the point.
double oracle_distance(LngLat p, const std::vector<LngLat>& line) {
  const double mx = kEarthRadiusM * kDegToRad * std::cos(p.lat * kDegToRad);
  const double my = kEarthRadiusM * kDegToRad;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < line.size(); ++i) {
    const double ax = (line[i].lng - p.lng) * mx, ay = (line[i].lat - p.lat) * my;
    const double bx = (line[i + 1].lng - p.lng) * mx, by = (line[i + 1].lat - p.lat) * my;
    const double dx = bx - ax, dy = by - ay;
    double t = -(ax * dx + ay * dy) / (dx * dx + dy * dy);
    t = std::clamp(t, 0.0, 1.0);
    best = std::min(best, std::hypot(ax + t * dx, ay + t * dy));
  }
  return best;
}

// Brute-force projection: walk the polyline in ~1 m steps.
std::pair<SegmentId, double> oracle_project(const RoadNetwork& net, LngLat p) {
  SegmentId best_id = -1;
  double best_d = std::numeric_limits<double>::infinity();
  double best_r = 0.0;
  for (const auto& s : net.segments()) {
    const int steps = static_cast<int>(std::ceil(s.length_m));
    for (int k = 0; k <= steps; ++k) {
      const double r = static_cast<double>(k) / steps;
      const LngLat q{s.polyline.front().lng + r * (s.polyline.back().lng - s.polyline.front().lng),
                     s.polyline.front().lat + r * (s.polyline.back().lat - s.polyline.front().lat)};
      const double d = haversine_m(p, q);
      if (d < best_d - 1e-9) {
        best_d = d;
        best_id = s.id;
        best_r = r;
      }
    }
  }
  return {best_id, best_r};
}

// Every simple node path between two nodes, shortest total length.
double enumerate_paths(const RoadNetwork& net, NodeId at, NodeId goal, std::set<NodeId>& seen) {
  if (at == goal) return 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (SegmentId s : net.out_segments(at)) {
    const auto& seg = net.segment(s);
    if (seen.count(seg.to_node)) continue;
    seen.insert(seg.to_node);
    best = std::min(best, seg.length_m + enumerate_paths(net, seg.to_node, goal, seen));
    seen.erase(seg.to_node);
  }
  return best;
}

LngLat random_point(const RoadNetwork& net, std::mt19937_64& rng, double pad_deg = 0.002) {
  const auto b = net.bounds();
  std::uniform_real_distribution<double> x(b.min_lng - pad_deg, b.max_lng + pad_deg);
  std::uniform_real_distribution<double> y(b.min_lat - pad_deg, b.max_lat + pad_deg);
  return {x(rng), y(rng)};
}

Segment straight(SegmentId id, const Node& a, const Node& b) {
  Segment s{id, a.id, b.id, {a.coord(), b.coord()}, 0.0};
  s.length_m = polyline_length_m(s.polyline);
  return s;
}

}  // namespace

TEST_CASE("minimal network has one segment in the adjacency of its origin") {
  const Node n0{0, 104.0, 30.0}, n1{1, 104.001, 30.0};
  const auto net = build_network({n0, n1}, {straight(0, n0, n1)});
  CHECK(net.num_segments() == 1);
  CHECK(net.out_segments(0) == std::vector<SegmentId>{0});
  CHECK(net.out_segments(1).empty());
}

TEST_CASE("dangling node reference names the node") {
  const Node n0{0, 104.0, 30.0}, n1{1, 104.001, 30.0};
  Segment s = straight(0, n0, n1);
  s.to_node = 99;
  try {
    build_network({n0, n1}, {s});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("unknown node 99") != std::string::npos);
  }
}

TEST_CASE("duplicate ids are rejected") {
  const Node n0{0, 104.0, 30.0}, n1{1, 104.001, 30.0};
  CHECK_THROWS_AS(build_network({n0, n0, n1}, {straight(0, n0, n1)}), Error);
  CHECK_THROWS_AS(build_network({n0, n1}, {straight(0, n0, n1), straight(0, n1, n0)}), Error);
}

TEST_CASE("grid segment counts follow the lattice formula") {
  CHECK(synth_grid_network(2, 2, 100, 104, 30, 0).num_segments() == 8);
  CHECK(synth_grid_network(3, 3, 100, 104, 30, 0).num_segments() == 24);
  CHECK(synth_grid_network(2, 2, 100, 104, 30, 0).num_nodes() == 4);
  for (int r = 2; r <= 5; ++r)
    for (int c = 2; c <= 5; ++c)
      CHECK(synth_grid_network(r, c, 50, 104, 30, 3).num_segments() ==
            static_cast<std::size_t>(2 * (r * (c - 1) + c * (r - 1))));
  CHECK_THROWS_AS(synth_grid_network(1, 4, 100, 104, 30, 0), Error);
  CHECK_THROWS_AS(synth_grid_network(3, 3, 0, 104, 30, 0), Error);
}

TEST_CASE("grid segment lengths match spacing and endpoints") {
  const auto net = fixtures::grid();
  for (const auto& s : net.segments()) {
    const double h = haversine_m(s.polyline.front(), s.polyline.back());
    CHECK(std::abs(h - 100.0) <= 0.5);
    CHECK(std::abs(s.length_m - h) <= 1e-3 * h);
    CHECK(s.polyline.front() == net.node(s.from_node).coord());
    CHECK(s.polyline.back() == net.node(s.to_node).coord());
  }
}

TEST_CASE("grid generation is deterministic and rebuilds unchanged") {
  const auto a = fixtures::grid(3, 3, 7);
  const auto b = fixtures::grid(3, 3, 7);
  CHECK(a.segments() == b.segments());
  CHECK(a.nodes() == b.nodes());
  const auto c = build_network(a.nodes(), a.segments());
  CHECK(c.segments() == a.segments());
  CHECK(c.nodes() == a.nodes());
  for (const auto& n : a.nodes()) CHECK(c.out_segments(n.id) == a.out_segments(n.id));
}

TEST_CASE("neighbors_within on simple cases") {
  const auto net = fixtures::grid();
  const auto& s = net.segment(5);
  const LngLat mid = net.locate(5, 0.5);
  const auto on = net.neighbors_within(mid, 100.0);
  REQUIRE_FALSE(on.empty());
  // The reverse twin lies at the same distance; the lower id comes first.
  const double d0 = oracle_distance(mid, net.segment(on[0]).polyline);
  CHECK(d0 < 1e-6);
  CHECK(std::find(on.begin(), on.begin() + 2, s.id) != on.begin() + 2);

  const auto b = net.bounds();
  CHECK(net.neighbors_within({b.max_lng + 0.01, b.max_lat + 0.01}, 100.0).empty());
}

TEST_CASE("interior node sees exactly its eight incident segments") {
  const auto net = fixtures::grid();
  for (const auto& n : net.nodes()) {
    std::set<SegmentId> incident;
    for (const auto& s : net.segments())
      if (s.from_node == n.id || s.to_node == n.id) incident.insert(s.id);
    if (incident.size() != 8) continue;
    const auto got = net.neighbors_within(n.coord(), 50.0);
    CHECK(std::set<SegmentId>(got.begin(), got.end()) == incident);
  }
}

TEST_CASE("neighbors_within equals a brute-force scan on random queries") {
  const auto net = fixtures::grid(6, 6, 4);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> delta(5.0, 200.0);
  int compared = 0;
  for (int q = 0; q < 1000; ++q) {
    const LngLat p = random_point(net, rng);
    const double d = delta(rng);
    std::vector<std::pair<double, SegmentId>> expect;
    bool borderline = false;
    for (const auto& s : net.segments()) {
      const double dist = oracle_distance(p, s.polyline);
      if (std::abs(dist - d) < 1e-6) borderline = true;
      if (dist <= d) expect.push_back({dist, s.id});
    }
    if (borderline) continue;
    std::sort(expect.begin(), expect.end());
    const auto got = net.neighbors_within(p, d);
    REQUIRE(got.size() == expect.size());
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(std::abs(oracle_distance(p, net.segment(got[i]).polyline) - expect[i].first) < 1e-6);
    ++compared;
  }
  CHECK(compared > 990);
}

TEST_CASE("projection simple cases") {
  const auto net = fixtures::grid();
  const auto& s = net.segment(0);
  const auto mid = net.project(net.locate(0, 0.5));
  CHECK(mid.offset_m < 1e-6);
  // Midpoint projects onto s or its twin; the lower id wins and both give 0.5.
  CHECK(mid.fraction == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(mid.segment <= s.id);

  const auto at_from = net.project_onto(s.polyline.front(), s.id);
  CHECK(at_from.fraction == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(build_network({}, {}).project({0, 0}), Error);
}

TEST_CASE("projection agrees with a brute-force subdivision oracle") {
  const auto net = fixtures::grid(4, 4, 2);
  std::mt19937_64 rng(5);
  for (int q = 0; q < 200; ++q) {
    const LngLat p = random_point(net, rng, 0.0005);
    const auto got = net.project(p);
    const auto [oid, orr] = oracle_project(net, p);
    const auto& gs = net.segment(got.segment);
    const auto& os = net.segment(oid);
    // Twins share geometry with reversed direction.
    const bool same = got.segment == oid;
    const bool twin = gs.from_node == os.to_node && gs.to_node == os.from_node;
    const double gd = oracle_distance(p, gs.polyline);
    const double od = oracle_distance(p, os.polyline);
    if (!same && !twin) {
      CHECK(std::abs(gd - od) < 0.05);  // a genuine near-tie between distinct roads
      continue;
    }
    CHECK(std::abs(got.fraction - (same ? orr : 1.0 - orr)) <= 0.01);
    CHECK(std::abs(got.offset_m - gd) < 0.05);
  }
}

TEST_CASE("locate endpoints and round trip") {
  const auto net = fixtures::grid();
  for (const auto& s : net.segments()) {
    CHECK(net.locate(s.id, 0.0) == s.polyline.front());
    CHECK(net.locate(s.id, 1.0) == s.polyline.back());
    const auto p = net.project_onto(net.locate(s.id, 0.3), s.id);
    CHECK(std::abs(p.fraction - 0.3) <= 0.01);
    CHECK(p.offset_m < 1e-6);
  }
  CHECK_THROWS_AS(net.locate(9999, 0.5), Error);
  CHECK_THROWS_AS(net.locate(0, 1.5), Error);
  CHECK_THROWS_AS(net.locate(0, -0.1), Error);
}

TEST_CASE("locate after project is idempotent for on-network points") {
  const auto net = fixtures::grid(5, 5, 9);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(net.num_segments()) - 1);
  for (int i = 0; i < 300; ++i) {
    const LngLat p = net.locate(pick(rng), u(rng));
    const auto pr = net.project(p);
    CHECK(pr.offset_m < 1e-6);
    const LngLat q = net.locate(pr.segment, pr.fraction);
    CHECK(std::abs(q.lng - p.lng) <= 1e-9);
    CHECK(std::abs(q.lat - p.lat) <= 1e-9);
  }
}

TEST_CASE("shortest path simple cases") {
  const auto net = fixtures::grid();
  const auto& s = net.segment(3);
  const auto same = net.shortest_path({3, 0.4}, {3, 0.4});
  REQUIRE(same);
  CHECK(same->distance_m == 0.0);
  CHECK(same->segments.empty());

  const auto fwd = net.shortest_path({3, 0.2}, {3, 0.7});
  REQUIRE(fwd);
  CHECK(fwd->distance_m == doctest::Approx(0.5 * s.length_m).epsilon(1e-12));
}

TEST_CASE("opposite corners of a 3x3 grid agree with exhaustive path enumeration") {
  const auto net = fixtures::grid(3, 3, 2);
  const auto b = net.bounds();
  NodeId lo = -1, hi = -1;
  for (const auto& n : net.nodes()) {
    if (n.lng == b.min_lng && n.lat == b.min_lat) lo = n.id;
    if (n.lng == b.max_lng && n.lat == b.max_lat) hi = n.id;
  }
  REQUIRE(lo >= 0);
  REQUIRE(hi >= 0);
  std::set<NodeId> seen{lo};
  const double brute = enumerate_paths(net, lo, hi, seen);
  const auto d = net.node_distance(lo, hi);
  REQUIRE(d);
  CHECK(*d == doctest::Approx(brute).epsilon(1e-9));
  CHECK(std::abs(*d - 400.0) <= 2.0);

  for (const auto& a : net.nodes())
    for (const auto& c : net.nodes()) {
      std::set<NodeId> s{a.id};
      CHECK(*net.node_distance(a.id, c.id) == doctest::Approx(enumerate_paths(net, a.id, c.id, s)).epsilon(1e-9));
    }
}

TEST_CASE("partial segment path accounts for both ends") {
  const auto net = fixtures::grid(3, 3, 2);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(net.num_segments()) - 1);
  for (int i = 0; i < 200; ++i) {
    const RoadPosition a{pick(rng), u(rng)}, c{pick(rng), u(rng)};
    if (a.segment == c.segment) continue;
    const auto& sa = net.segment(a.segment);
    const auto& sc = net.segment(c.segment);
    const double via_nodes = (1.0 - a.fraction) * sa.length_m + *net.node_distance(sa.to_node, sc.from_node) +
                             c.fraction * sc.length_m;
    const auto p = net.shortest_path(a, c);
    REQUIRE(p);
    CHECK(p->distance_m == doctest::Approx(via_nodes).epsilon(1e-9));
    CHECK(p->segments.front() == a.segment);
    CHECK(p->segments.back() == c.segment);
  }
}

TEST_CASE("unreachable target gives no path and road_distance throws") {
  const Node n0{0, 104.0, 30.0}, n1{1, 104.001, 30.0}, n2{2, 104.01, 30.01}, n3{3, 104.011, 30.01};
  const auto net = build_network({n0, n1, n2, n3}, {straight(0, n0, n1), straight(1, n2, n3)});
  CHECK_FALSE(net.shortest_path({0, 0.1}, {1, 0.5}).has_value());
  CHECK_THROWS_AS(net.road_distance({0, 0.1}, {1, 0.5}), Error);
  // Backward on a one-way segment is also unreachable.
  CHECK_FALSE(net.shortest_path({0, 0.8}, {0, 0.2}).has_value());
  CHECK(net.road_distance({0, 0.8}, {0, 0.2}) == doctest::Approx(0.6 * net.segment(0).length_m));
}

TEST_CASE("road distance properties") {
  const auto net = fixtures::grid();
  CHECK(net.road_distance({4, 0.3}, {4, 0.3}) == 0.0);
  // Adjacent grid nodes.
  const auto& s = net.segment(0);
  CHECK(std::abs(net.road_distance({s.id, 0.0}, {s.id, 1.0}) - 100.0) <= 0.5);

  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(net.num_segments()) - 1);
  for (int i = 0; i < 300; ++i) {
    const RoadPosition a{pick(rng), u(rng)}, b{pick(rng), u(rng)}, c{pick(rng), u(rng)};
    CHECK(net.road_distance(a, b) == net.road_distance(b, a));
    const double ab = net.shortest_path(a, b)->distance_m;
    const double bc = net.shortest_path(b, c)->distance_m;
    const double ac = net.shortest_path(a, c)->distance_m;
    CHECK(ac <= ab + bc + 1e-6);
  }
}

TEST_CASE("network files round trip") {
  const auto net = fixtures::grid(3, 4, 5);
  const auto dir = std::filesystem::temp_directory_path() / "uvtm_roadnet_rt";
  std::filesystem::remove_all(dir);
  save_network(net, dir);
  CHECK(std::filesystem::exists(dir / "nodes.csv"));
  CHECK(std::filesystem::exists(dir / "edges.csv"));
  const auto back = load_network(dir);
  CHECK(back.nodes() == net.nodes());
  REQUIRE(back.num_segments() == net.num_segments());
  for (std::size_t i = 0; i < net.num_segments(); ++i) {
    CHECK(back.segments()[i].polyline == net.segments()[i].polyline);
    CHECK(back.segments()[i].length_m == doctest::Approx(net.segments()[i].length_m).epsilon(1e-12));
  }
  CHECK_THROWS_AS(load_network(dir / "missing"), Error);
  std::filesystem::remove_all(dir);
}
