#include "uvtm/mapmatch.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <string>

#include "uvtm/csv.hpp"
#include "uvtm/error.hpp"

namespace uvtm::mapmatch {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

[[noreturn]] void fail(const std::string& msg) { throw Error("mapmatch", msg); }

}  // namespace

Lattice build_lattice(const roadnet::RoadNetwork& network, const Trajectory& trajectory, const MatchParams& params) {
  const auto& pts = trajectory.points;
  if (pts.size() < 2) fail("trajectory " + std::to_string(trajectory.id) + " needs at least 2 points");
  Lattice lat;
  lat.candidates.resize(pts.size());
  lat.emission.resize(pts.size());
  lat.transition.resize(pts.size());
  const double inv_two_var = 1.0 / (2.0 * params.emission_sigma_m * params.emission_sigma_m);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    auto cands = network.candidates_within(pts[i].coord(), params.candidate_radius_m);
    if (cands.empty()) {
      fail("point " + std::to_string(i) + " of trajectory " + std::to_string(trajectory.id) +
           " has no candidate segment within " + csv::format(params.candidate_radius_m) + " m");
    }
    if (cands.size() > params.max_candidates) cands.resize(params.max_candidates);
    for (const auto& c : cands) lat.emission[i].push_back(-c.offset_m * c.offset_m * inv_two_var);
    lat.candidates[i] = std::move(cands);
  }
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const double gc = haversine_m(pts[i - 1].coord(), pts[i].coord());
    const auto& prev = lat.candidates[i - 1];
    const auto& cur = lat.candidates[i];
    lat.transition[i].assign(prev.size(), std::vector<double>(cur.size(), kNegInf));
    for (std::size_t a = 0; a < prev.size(); ++a) {
      for (std::size_t b = 0; b < cur.size(); ++b) {
        const auto path = network.shortest_path({prev[a].segment, prev[a].fraction}, {cur[b].segment, cur[b].fraction});
        if (!path) continue;
        lat.transition[i][a][b] = -params.transition_beta * std::abs(path->distance_m - gc) -
                                  params.segment_penalty * static_cast<double>(path->segments.size());
      }
    }
  }
  return lat;
}

std::vector<std::size_t> viterbi(const Lattice& lattice) {
  const std::size_t n = lattice.candidates.size();
  if (n == 0) return {};
  std::vector<std::vector<double>> score(n);
  std::vector<std::vector<std::size_t>> back(n);
  score[0] = lattice.emission[0];
  back[0].assign(score[0].size(), 0);
  for (std::size_t i = 1; i < n; ++i) {
    const std::size_t m = lattice.candidates[i].size();
    score[i].assign(m, kNegInf);
    back[i].assign(m, 0);
    bool any = false;
    for (std::size_t b = 0; b < m; ++b) {
      for (std::size_t a = 0; a < score[i - 1].size(); ++a) {
        if (score[i - 1][a] == kNegInf || lattice.transition[i][a][b] == kNegInf) continue;
        const double s = score[i - 1][a] + lattice.transition[i][a][b] + lattice.emission[i][b];
        if (s > score[i][b]) {
          score[i][b] = s;
          back[i][b] = a;
        }
      }
      any = any || score[i][b] != kNegInf;
    }
    if (!any) fail("no connected candidate path reaches point " + std::to_string(i));
  }
  std::vector<std::size_t> out(n, 0);
  double best = kNegInf;
  for (std::size_t b = 0; b < score[n - 1].size(); ++b) {
    if (score[n - 1][b] > best) {
      best = score[n - 1][b];
      out[n - 1] = b;
    }
  }
  for (std::size_t i = n - 1; i > 0; --i) out[i - 1] = back[i][out[i]];
  return out;
}

double assignment_score(const Lattice& lattice, const std::vector<std::size_t>& assignment) {
  double s = lattice.emission[0][assignment[0]];
  for (std::size_t i = 1; i < assignment.size(); ++i) {
    s += lattice.transition[i][assignment[i - 1]][assignment[i]] + lattice.emission[i][assignment[i]];
  }
  return s;
}

MatchedTrajectory hmm_match(const roadnet::RoadNetwork& network, const Trajectory& trajectory,
                            const MatchParams& params) {
  const Lattice lattice = build_lattice(network, trajectory, params);
  const auto choice = viterbi(lattice);
  MatchedTrajectory out;
  out.source_id = trajectory.id;
  out.points.reserve(choice.size());
  for (std::size_t i = 0; i < choice.size(); ++i) {
    const auto& c = lattice.candidates[i][choice[i]];
    out.points.push_back({c.segment, c.fraction, trajectory.points[i].t});
  }
  return out;
}

void write_matched_csv(const std::vector<MatchedTrajectory>& matched, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail("cannot write " + path.string());
  out << "traj_id,point_idx,segment_id,fraction,timestamp\n";
  for (const auto& m : matched) {
    for (std::size_t i = 0; i < m.points.size(); ++i) {
      const auto& p = m.points[i];
      out << m.source_id << ',' << i << ',' << p.segment << ',' << csv::format(p.fraction) << ','
          << csv::format(p.t) << '\n';
    }
  }
}

std::vector<MatchedTrajectory> read_matched_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) fail(path.string() + ": missing header");
  std::map<TrajectoryId, std::map<std::int64_t, MatchedPoint>> rows;
  std::vector<TrajectoryId> order;
  while (std::getline(in, line)) {
    ++lineno;
    if (csv::trim(line).empty()) continue;
    const auto f = csv::split(line, ',');
    TrajectoryId id = 0;
    std::int64_t idx = 0;
    MatchedPoint p;
    if (f.size() != 5 || !csv::parse(f[0], id) || !csv::parse(f[1], idx) || !csv::parse(f[2], p.segment) ||
        !csv::parse(f[3], p.fraction) || !csv::parse(f[4], p.t))
      fail(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    if (!rows.count(id)) order.push_back(id);
    rows[id][idx] = p;
  }
  std::vector<MatchedTrajectory> out;
  for (TrajectoryId id : order) {
    MatchedTrajectory m;
    m.source_id = id;
    for (const auto& [idx, p] : rows[id]) m.points.push_back(p);
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace uvtm::mapmatch
