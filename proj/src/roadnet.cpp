#include "uvtm/roadnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>

#include "uvtm/csv.hpp"
#include "uvtm/error.hpp"

namespace uvtm::roadnet {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
// Networks up to this many nodes get an all-pairs distance table at build time.
constexpr std::size_t kMaxTableNodes = 2048;
// Distances are compared at micrometre resolution so that exact geometric ties
// (e.g. the two directions of one road) fall back to the segment id.
constexpr double kTieResolutionM = 1e-6;

[[noreturn]] void fail(const std::string& msg) { throw Error("roadnet", msg); }

double quantize(double d) { return std::round(d / kTieResolutionM); }

}  // namespace

double polyline_length_m(const std::vector<LngLat>& polyline) {
  double total = 0.0;
  for (std::size_t i = 1; i < polyline.size(); ++i) total += haversine_m(polyline[i - 1], polyline[i]);
  return total;
}

const Segment& RoadNetwork::segment(SegmentId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= segments_.size()) fail("unknown segment " + std::to_string(id));
  return segments_[static_cast<std::size_t>(id)];
}

const Node& RoadNetwork::node(NodeId id) const {
  const auto it = node_index_.find(id);
  if (it == node_index_.end()) fail("unknown node " + std::to_string(id));
  return nodes_[it->second];
}

const std::vector<SegmentId>& RoadNetwork::out_segments(NodeId id) const {
  const auto it = node_index_.find(id);
  if (it == node_index_.end()) fail("unknown node " + std::to_string(id));
  return adjacency_[it->second];
}

Projection RoadNetwork::project_onto(LngLat point, SegmentId id) const {
  const Segment& seg = segment(id);
  const LocalFrame frame(point);
  const Vec2 origin{0.0, 0.0};
  double best = kInf;
  std::size_t best_k = 0;
  double best_t = 0.0;
  for (std::size_t k = 1; k < seg.polyline.size(); ++k) {
    const Vec2 a = frame.to_xy(seg.polyline[k - 1]);
    const Vec2 b = frame.to_xy(seg.polyline[k]);
    const double t = closest_param(origin, a, b);
    const double x = a.x + t * (b.x - a.x);
    const double y = a.y + t * (b.y - a.y);
    const double d = std::hypot(x, y);
    if (d < best) {
      best = d;
      best_k = k;
      best_t = t;
    }
  }
  double along = 0.0;
  for (std::size_t k = 1; k < best_k; ++k) along += haversine_m(seg.polyline[k - 1], seg.polyline[k]);
  along += best_t * haversine_m(seg.polyline[best_k - 1], seg.polyline[best_k]);
  const double fraction = std::clamp(along / seg.length_m, 0.0, 1.0);
  return {id, fraction, best};
}

double RoadNetwork::point_segment_distance(LngLat point, const Segment& seg) const {
  return project_onto(point, seg.id).offset_m;
}

void RoadNetwork::build_index() {
  cells_.clear();
  if (segments_.empty()) {
    frame_.reset();
    grid_cols_ = grid_rows_ = 0;
    return;
  }
  frame_.emplace(LngLat{(bounds_.min_lng + bounds_.max_lng) / 2.0, (bounds_.min_lat + bounds_.max_lat) / 2.0});
  const Vec2 lo = frame_->to_xy({bounds_.min_lng, bounds_.min_lat});
  const Vec2 hi = frame_->to_xy({bounds_.max_lng, bounds_.max_lat});
  grid_min_x_ = lo.x;
  grid_min_y_ = lo.y;
  grid_cols_ = std::max(1, static_cast<int>(std::floor((hi.x - lo.x) / cell_m_)) + 1);
  grid_rows_ = std::max(1, static_cast<int>(std::floor((hi.y - lo.y) / cell_m_)) + 1);
  cells_.assign(static_cast<std::size_t>(grid_cols_) * static_cast<std::size_t>(grid_rows_), {});
  for (const Segment& seg : segments_) {
    double x0 = kInf, y0 = kInf, x1 = -kInf, y1 = -kInf;
    for (const LngLat& p : seg.polyline) {
      const Vec2 v = frame_->to_xy(p);
      x0 = std::min(x0, v.x);
      y0 = std::min(y0, v.y);
      x1 = std::max(x1, v.x);
      y1 = std::max(y1, v.y);
    }
    const int c0 = std::clamp(static_cast<int>(std::floor((x0 - grid_min_x_) / cell_m_)), 0, grid_cols_ - 1);
    const int c1 = std::clamp(static_cast<int>(std::floor((x1 - grid_min_x_) / cell_m_)), 0, grid_cols_ - 1);
    const int r0 = std::clamp(static_cast<int>(std::floor((y0 - grid_min_y_) / cell_m_)), 0, grid_rows_ - 1);
    const int r1 = std::clamp(static_cast<int>(std::floor((y1 - grid_min_y_) / cell_m_)), 0, grid_rows_ - 1);
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) cells_[static_cast<std::size_t>(r * grid_cols_ + c)].push_back(seg.id);
  }
}

std::vector<SegmentId> RoadNetwork::index_candidates(LngLat point, double delta_m) const {
  std::vector<SegmentId> out;
  if (!frame_) return out;
  // The query frame differs slightly from the index frame; widen the box.
  const double reach = delta_m * 1.01 + 1.0;
  const Vec2 p = frame_->to_xy(point);
  const int c0 = static_cast<int>(std::floor((p.x - reach - grid_min_x_) / cell_m_));
  const int c1 = static_cast<int>(std::floor((p.x + reach - grid_min_x_) / cell_m_));
  const int r0 = static_cast<int>(std::floor((p.y - reach - grid_min_y_) / cell_m_));
  const int r1 = static_cast<int>(std::floor((p.y + reach - grid_min_y_) / cell_m_));
  if (c1 < 0 || r1 < 0 || c0 >= grid_cols_ || r0 >= grid_rows_) return out;
  std::vector<char> seen(segments_.size(), 0);
  for (int r = std::max(r0, 0); r <= std::min(r1, grid_rows_ - 1); ++r) {
    for (int c = std::max(c0, 0); c <= std::min(c1, grid_cols_ - 1); ++c) {
      for (SegmentId id : cells_[static_cast<std::size_t>(r * grid_cols_ + c)]) {
        if (!seen[static_cast<std::size_t>(id)]) {
          seen[static_cast<std::size_t>(id)] = 1;
          out.push_back(id);
        }
      }
    }
  }
  return out;
}

std::vector<Projection> RoadNetwork::candidates_within(LngLat point, double delta_m) const {
  std::vector<Projection> out;
  for (SegmentId id : index_candidates(point, delta_m)) {
    Projection p = project_onto(point, id);
    if (p.offset_m <= delta_m) out.push_back(p);
  }
  std::sort(out.begin(), out.end(), [](const Projection& a, const Projection& b) {
    const double qa = quantize(a.offset_m);
    const double qb = quantize(b.offset_m);
    if (qa != qb) return qa < qb;
    return a.segment < b.segment;
  });
  return out;
}

std::vector<SegmentId> RoadNetwork::neighbors_within(LngLat point, double delta_m) const {
  std::vector<SegmentId> out;
  for (const Projection& p : candidates_within(point, delta_m)) out.push_back(p.segment);
  return out;
}

Projection RoadNetwork::project(LngLat point) const {
  if (segments_.empty()) fail("cannot project onto an empty network");
  // Every segment lies within this radius, so the search always terminates.
  const LngLat centre = frame_->origin();
  const double diag = haversine_m({bounds_.min_lng, bounds_.min_lat}, {bounds_.max_lng, bounds_.max_lat});
  const double reach_all = haversine_m(point, centre) + diag + 1.0;
  double radius = cell_m_ / 2.0;
  while (true) {
    const auto cands = candidates_within(point, radius);
    if (!cands.empty()) return cands.front();
    if (radius > reach_all) break;
    radius *= 2.0;
  }
  fail("projection search failed");
}

LngLat RoadNetwork::locate(SegmentId id, double fraction) const {
  const Segment& seg = segment(id);
  if (!(fraction >= 0.0 && fraction <= 1.0)) fail("fraction outside [0,1]: " + std::to_string(fraction));
  if (fraction == 0.0) return seg.polyline.front();
  if (fraction == 1.0) return seg.polyline.back();
  const double target = fraction * seg.length_m;
  double along = 0.0;
  for (std::size_t k = 1; k < seg.polyline.size(); ++k) {
    const double piece = haversine_m(seg.polyline[k - 1], seg.polyline[k]);
    if (along + piece >= target || k + 1 == seg.polyline.size()) {
      const double t = piece > 0.0 ? std::clamp((target - along) / piece, 0.0, 1.0) : 0.0;
      const LngLat& a = seg.polyline[k - 1];
      const LngLat& b = seg.polyline[k];
      return {a.lng + t * (b.lng - a.lng), a.lat + t * (b.lat - a.lat)};
    }
    along += piece;
  }
  return seg.polyline.back();
}

RoadNetwork::Dijkstra RoadNetwork::run_dijkstra(std::size_t src_index) const {
  Dijkstra out;
  out.dist.assign(nodes_.size(), kInf);
  out.pred.assign(nodes_.size(), -1);
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> queue;
  out.dist[src_index] = 0.0;
  queue.emplace(0.0, src_index);
  while (!queue.empty()) {
    const auto [d, u] = queue.top();
    queue.pop();
    if (d > out.dist[u]) continue;
    for (SegmentId sid : adjacency_[u]) {
      const Segment& seg = segments_[static_cast<std::size_t>(sid)];
      const std::size_t v = node_index_.at(seg.to_node);
      const double nd = d + seg.length_m;
      if (nd < out.dist[v]) {
        out.dist[v] = nd;
        out.pred[v] = sid;
        queue.emplace(nd, v);
      }
    }
  }
  return out;
}

void RoadNetwork::build_distance_table() {
  table_dist_.clear();
  table_pred_.clear();
  const std::size_t n = nodes_.size();
  if (n == 0 || n > kMaxTableNodes) return;
  table_dist_.resize(n * n);
  table_pred_.resize(n * n);
  for (std::size_t s = 0; s < n; ++s) {
    const Dijkstra dj = run_dijkstra(s);
    std::copy(dj.dist.begin(), dj.dist.end(), table_dist_.begin() + static_cast<std::ptrdiff_t>(s * n));
    std::copy(dj.pred.begin(), dj.pred.end(), table_pred_.begin() + static_cast<std::ptrdiff_t>(s * n));
  }
}

std::optional<Path> RoadNetwork::node_path(NodeId from, NodeId to) const {
  const auto fi = node_index_.find(from);
  const auto ti = node_index_.find(to);
  if (fi == node_index_.end()) fail("unknown node " + std::to_string(from));
  if (ti == node_index_.end()) fail("unknown node " + std::to_string(to));
  const std::size_t n = nodes_.size();
  const std::size_t s = fi->second;
  const std::size_t t = ti->second;
  std::vector<double> dist_row;
  std::vector<SegmentId> pred_row;
  const double* dist = nullptr;
  const SegmentId* pred = nullptr;
  if (!table_dist_.empty()) {
    dist = table_dist_.data() + s * n;
    pred = table_pred_.data() + s * n;
  } else {
    Dijkstra dj = run_dijkstra(s);
    dist_row = std::move(dj.dist);
    pred_row = std::move(dj.pred);
    dist = dist_row.data();
    pred = pred_row.data();
  }
  if (!std::isfinite(dist[t])) return std::nullopt;
  Path path;
  path.distance_m = dist[t];
  std::size_t cur = t;
  while (cur != s) {
    const SegmentId sid = pred[cur];
    path.segments.push_back(sid);
    cur = node_index_.at(segments_[static_cast<std::size_t>(sid)].from_node);
  }
  std::reverse(path.segments.begin(), path.segments.end());
  return path;
}

std::optional<double> RoadNetwork::node_distance(NodeId from, NodeId to) const {
  if (!table_dist_.empty()) {
    const auto fi = node_index_.find(from);
    const auto ti = node_index_.find(to);
    if (fi == node_index_.end()) fail("unknown node " + std::to_string(from));
    if (ti == node_index_.end()) fail("unknown node " + std::to_string(to));
    const double d = table_dist_[fi->second * nodes_.size() + ti->second];
    if (!std::isfinite(d)) return std::nullopt;
    return d;
  }
  const auto p = node_path(from, to);
  if (!p) return std::nullopt;
  return p->distance_m;
}

std::optional<Path> RoadNetwork::shortest_path(RoadPosition src, RoadPosition dst) const {
  const Segment& s = segment(src.segment);
  const Segment& d = segment(dst.segment);
  if (!(src.fraction >= 0.0 && src.fraction <= 1.0) || !(dst.fraction >= 0.0 && dst.fraction <= 1.0))
    fail("fraction outside [0,1]");
  if (src == dst) return Path{{}, 0.0};
  if (s.id == d.id && dst.fraction >= src.fraction) {
    return Path{{s.id}, s.length_m * (dst.fraction - src.fraction)};
  }
  const double head = (1.0 - src.fraction) * s.length_m;
  const double tail = dst.fraction * d.length_m;
  auto middle = node_path(s.to_node, d.from_node);
  if (!middle) return std::nullopt;
  Path path;
  path.segments.reserve(middle->segments.size() + 2);
  path.segments.push_back(s.id);
  path.segments.insert(path.segments.end(), middle->segments.begin(), middle->segments.end());
  path.segments.push_back(d.id);
  path.distance_m = head + middle->distance_m + tail;
  return path;
}

double RoadNetwork::road_distance(RoadPosition a, RoadPosition b) const {
  const auto ab = shortest_path(a, b);
  const auto ba = shortest_path(b, a);
  if (!ab && !ba) {
    fail("segments " + std::to_string(a.segment) + " and " + std::to_string(b.segment) +
         " are disconnected in both directions");
  }
  double best = kInf;
  if (ab) best = std::min(best, ab->distance_m);
  if (ba) best = std::min(best, ba->distance_m);
  return best;
}

RoadNetwork build_network(std::vector<Node> nodes, std::vector<Segment> segments) {
  RoadNetwork net;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    if (!(n.lng >= -180.0 && n.lng <= 180.0) || !(n.lat >= -90.0 && n.lat <= 90.0))
      fail("node " + std::to_string(n.id) + " has coordinates out of range");
    if (!net.node_index_.emplace(n.id, i).second) fail("duplicate node id " + std::to_string(n.id));
  }
  net.nodes_ = std::move(nodes);

  const std::size_t m = segments.size();
  std::vector<char> seen(m, 0);
  for (Segment& seg : segments) {
    if (seg.id < 0 || static_cast<std::size_t>(seg.id) >= m)
      fail("segment id " + std::to_string(seg.id) + " outside [0, " + std::to_string(m) + ")");
    if (seen[static_cast<std::size_t>(seg.id)]) fail("duplicate segment id " + std::to_string(seg.id));
    seen[static_cast<std::size_t>(seg.id)] = 1;
    for (NodeId endpoint : {seg.from_node, seg.to_node}) {
      if (!net.node_index_.count(endpoint))
        fail("unknown node " + std::to_string(endpoint) + " referenced by segment " + std::to_string(seg.id));
    }
    const Node& from = net.nodes_[net.node_index_[seg.from_node]];
    const Node& to = net.nodes_[net.node_index_[seg.to_node]];
    if (seg.polyline.empty()) seg.polyline = {from.coord(), to.coord()};
    if (seg.polyline.size() < 2) fail("segment " + std::to_string(seg.id) + " polyline needs >= 2 points");
    constexpr double kEndpointTolDeg = 1e-7;
    auto near = [](LngLat a, LngLat b) {
      return std::abs(a.lng - b.lng) <= kEndpointTolDeg && std::abs(a.lat - b.lat) <= kEndpointTolDeg;
    };
    if (!near(seg.polyline.front(), from.coord()) || !near(seg.polyline.back(), to.coord()))
      fail("segment " + std::to_string(seg.id) + " polyline endpoints do not match its nodes");
    seg.length_m = polyline_length_m(seg.polyline);
    if (!(seg.length_m > 0.0)) fail("segment " + std::to_string(seg.id) + " has zero length");
  }
  std::sort(segments.begin(), segments.end(), [](const Segment& a, const Segment& b) { return a.id < b.id; });
  net.segments_ = std::move(segments);

  net.adjacency_.assign(net.nodes_.size(), {});
  for (const Segment& seg : net.segments_) net.adjacency_[net.node_index_[seg.from_node]].push_back(seg.id);

  BoundingBox box{kInf, kInf, -kInf, -kInf};
  auto extend = [&box](LngLat p) {
    box.min_lng = std::min(box.min_lng, p.lng);
    box.min_lat = std::min(box.min_lat, p.lat);
    box.max_lng = std::max(box.max_lng, p.lng);
    box.max_lat = std::max(box.max_lat, p.lat);
  };
  for (const Node& n : net.nodes_) extend(n.coord());
  for (const Segment& seg : net.segments_)
    for (const LngLat& p : seg.polyline) extend(p);
  if (net.nodes_.empty()) box = {};
  net.bounds_ = box;

  net.build_index();
  net.build_distance_table();
  return net;
}

RoadNetwork synth_grid_network(int rows, int cols, double spacing_m, double origin_lng, double origin_lat,
                               std::uint64_t seed) {
  if (rows < 2 || cols < 2) fail("grid needs rows, cols >= 2");
  if (!(spacing_m > 0.0)) fail("grid spacing must be positive");
  const double dlat = spacing_m / (kEarthRadiusM * kDegToRad);
  const double dlng = spacing_m / (kEarthRadiusM * kDegToRad * std::cos(origin_lat * kDegToRad));
  std::vector<Node> nodes;
  nodes.reserve(static_cast<std::size_t>(rows * cols));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      nodes.push_back({static_cast<NodeId>(r * cols + c), origin_lng + c * dlng, origin_lat + r * dlat});

  std::vector<std::pair<NodeId, NodeId>> links;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const NodeId here = r * cols + c;
      if (c + 1 < cols) {
        links.emplace_back(here, here + 1);
        links.emplace_back(here + 1, here);
      }
      if (r + 1 < rows) {
        links.emplace_back(here, here + cols);
        links.emplace_back(here + cols, here);
      }
    }
  }
  std::vector<SegmentId> ids(links.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);

  std::vector<Segment> segments;
  segments.reserve(links.size());
  for (std::size_t i = 0; i < links.size(); ++i) {
    const Node& a = nodes[static_cast<std::size_t>(links[i].first)];
    const Node& b = nodes[static_cast<std::size_t>(links[i].second)];
    segments.push_back({ids[i], a.id, b.id, {a.coord(), b.coord()}, 0.0});
  }
  return build_network(std::move(nodes), std::move(segments));
}

void save_network(const RoadNetwork& network, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream nodes(dir / "nodes.csv");
  if (!nodes) fail("cannot write " + (dir / "nodes.csv").string());
  nodes << "node_id,lng,lat\n";
  for (const Node& n : network.nodes()) nodes << n.id << ',' << csv::format(n.lng) << ',' << csv::format(n.lat) << '\n';
  std::ofstream edges(dir / "edges.csv");
  if (!edges) fail("cannot write " + (dir / "edges.csv").string());
  edges << "edge_id,from_node,to_node,polyline\n";
  for (const Segment& s : network.segments()) {
    edges << s.id << ',' << s.from_node << ',' << s.to_node << ',';
    for (std::size_t i = 0; i < s.polyline.size(); ++i) {
      if (i) edges << ';';
      edges << csv::format(s.polyline[i].lng) << ' ' << csv::format(s.polyline[i].lat);
    }
    edges << '\n';
  }
}

RoadNetwork load_network(const std::filesystem::path& dir) {
  const auto nodes_path = dir / "nodes.csv";
  const auto edges_path = dir / "edges.csv";
  std::ifstream nodes_in(nodes_path);
  if (!nodes_in) fail("cannot open " + nodes_path.string());
  std::ifstream edges_in(edges_path);
  if (!edges_in) fail("cannot open " + edges_path.string());

  std::vector<Node> nodes;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(nodes_in, line)) fail(nodes_path.string() + ": missing header");
  ++lineno;
  while (std::getline(nodes_in, line)) {
    ++lineno;
    if (csv::trim(line).empty()) continue;
    const auto f = csv::split(line, ',');
    Node n;
    if (f.size() != 3 || !csv::parse(f[0], n.id) || !csv::parse(f[1], n.lng) || !csv::parse(f[2], n.lat))
      fail(nodes_path.string() + ":" + std::to_string(lineno) + ": malformed row");
    nodes.push_back(n);
  }

  std::vector<Segment> segments;
  lineno = 0;
  if (!std::getline(edges_in, line)) fail(edges_path.string() + ": missing header");
  ++lineno;
  while (std::getline(edges_in, line)) {
    ++lineno;
    if (csv::trim(line).empty()) continue;
    const auto f = csv::split(line, ',');
    Segment s;
    const std::string where = edges_path.string() + ":" + std::to_string(lineno);
    if (f.size() != 4 || !csv::parse(f[0], s.id) || !csv::parse(f[1], s.from_node) || !csv::parse(f[2], s.to_node))
      fail(where + ": malformed row");
    for (std::string_view pt : csv::split(csv::trim(f[3]), ';')) {
      const auto xy = csv::split(csv::trim(pt), ' ');
      LngLat p;
      if (xy.size() != 2 || !csv::parse(xy[0], p.lng) || !csv::parse(xy[1], p.lat))
        fail(where + ": malformed polyline");
      s.polyline.push_back(p);
    }
    segments.push_back(std::move(s));
  }
  return build_network(std::move(nodes), std::move(segments));
}

}  // namespace uvtm::roadnet
