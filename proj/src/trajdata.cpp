#include "uvtm/trajdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>

#include "uvtm/csv.hpp"
#include "uvtm/error.hpp"

namespace uvtm::trajdata {

namespace {

constexpr double kGapTolerance = 1e-6;

[[noreturn]] void fail(const std::string& msg) { throw Error("trajdata", msg); }

}  // namespace

roadnet::BoundingBox compute_bbox(const std::vector<Trajectory>& trajectories) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  roadnet::BoundingBox box{kInf, kInf, -kInf, -kInf};
  bool any = false;
  for (const auto& tr : trajectories) {
    for (const auto& p : tr.points) {
      any = true;
      box.min_lng = std::min(box.min_lng, p.lng);
      box.min_lat = std::min(box.min_lat, p.lat);
      box.max_lng = std::max(box.max_lng, p.lng);
      box.max_lat = std::max(box.max_lat, p.lat);
    }
  }
  return any ? box : roadnet::BoundingBox{};
}

Dataset make_dataset(std::vector<Trajectory> trajectories, double eta, double time_scale) {
  Dataset ds;
  ds.bbox = compute_bbox(trajectories);
  ds.trajectories = std::move(trajectories);
  ds.eta = eta;
  ds.time_scale = time_scale;
  return ds;
}

Dataset ingest_csv(const std::filesystem::path& path, IngestReport* report) {
  std::ifstream in(path);
  if (!in) fail("cannot open " + path.string());
  IngestReport rep;
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) fail(path.string() + ": missing header");

  std::vector<TrajectoryId> order;
  std::unordered_map<TrajectoryId, std::map<std::int64_t, TrajPoint>> grouped;
  while (std::getline(in, line)) {
    ++lineno;
    if (csv::trim(line).empty()) continue;
    const auto f = csv::split(line, ',');
    TrajectoryId id = 0;
    std::int64_t idx = 0;
    TrajPoint p;
    if (f.size() != 5 || !csv::parse(f[0], id) || !csv::parse(f[1], idx) || !csv::parse(f[2], p.lng) ||
        !csv::parse(f[3], p.lat) || !csv::parse(f[4], p.t))
      fail(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    auto& points = grouped[id];
    if (points.empty()) order.push_back(id);
    if (!points.emplace(idx, p).second)
      fail(path.string() + ":" + std::to_string(lineno) + ": duplicate point_idx " + std::to_string(idx));
    ++rep.rows;
  }

  std::vector<Trajectory> candidates;
  for (TrajectoryId id : order) {
    Trajectory tr;
    tr.id = id;
    for (const auto& [idx, p] : grouped[id]) tr.points.push_back(p);
    if (tr.points.size() < kMinPoints) {
      ++rep.dropped_short;
      continue;
    }
    candidates.push_back(std::move(tr));
  }

  // eta is the most common first gap; ties resolve to the smaller gap.
  std::map<double, std::size_t> votes;
  for (const auto& tr : candidates) votes[tr.points[1].t - tr.points[0].t]++;
  double eta = 0.0;
  std::size_t best = 0;
  for (const auto& [gap, count] : votes) {
    if (count > best) {
      best = count;
      eta = gap;
    }
  }

  std::vector<Trajectory> kept;
  for (auto& tr : candidates) {
    bool regular = eta > 0.0;
    for (std::size_t i = 1; i < tr.points.size() && regular; ++i) {
      regular = std::abs((tr.points[i].t - tr.points[i - 1].t) - eta) <= kGapTolerance;
    }
    if (!regular) {
      ++rep.rejected_irregular;
      continue;
    }
    kept.push_back(std::move(tr));
  }
  if (report) *report = rep;
  return make_dataset(std::move(kept), eta);
}

void write_csv(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail("cannot write " + path.string());
  out << "traj_id,point_idx,lng,lat,timestamp\n";
  for (const auto& tr : dataset.trajectories) {
    for (std::size_t i = 0; i < tr.points.size(); ++i) {
      const auto& p = tr.points[i];
      out << tr.id << ',' << i << ',' << csv::format(p.lng) << ',' << csv::format(p.lat) << ',' << csv::format(p.t)
          << '\n';
    }
  }
}

Trip simulate_trip(const roadnet::RoadNetwork& network, const std::vector<roadnet::SegmentId>& path,
                   const std::vector<double>& speeds_mps, double eta, double departure_s, TrajectoryId id) {
  if (path.empty()) fail("trip path is empty");
  if (speeds_mps.size() != path.size()) fail("one speed per path segment required");
  if (!(eta > 0.0)) fail("eta must be positive");
  // enter[i] = time the vehicle enters path[i], relative to departure.
  std::vector<double> enter(path.size() + 1, 0.0);
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (!(speeds_mps[i] > 0.0)) fail("speeds must be positive");
    enter[i + 1] = enter[i] + network.segment(path[i]).length_m / speeds_mps[i];
  }
  const double arrival = enter.back();

  Trip trip;
  trip.raw.id = id;
  trip.matched.source_id = id;
  trip.travel_time_s = arrival;
  std::size_t seg = 0;
  std::size_t k = 0;
  for (; static_cast<double>(k) * eta < arrival; ++k) {
    const double t = static_cast<double>(k) * eta;
    while (seg + 1 < path.size() && t >= enter[seg + 1]) ++seg;
    const double frac = std::clamp((t - enter[seg]) / (enter[seg + 1] - enter[seg]), 0.0, 1.0);
    const LngLat c = network.locate(path[seg], frac);
    trip.raw.points.push_back({c.lng, c.lat, departure_s + t});
    trip.matched.points.push_back({path[seg], frac, departure_s + t});
  }
  const LngLat dest = network.locate(path.back(), 1.0);
  const double t_end = departure_s + static_cast<double>(k) * eta;
  trip.raw.points.push_back({dest.lng, dest.lat, t_end});
  trip.matched.points.push_back({path.back(), 1.0, t_end});
  return trip;
}

SynthResult synth_trajectories(const roadnet::RoadNetwork& network, std::size_t n, const SynthConfig& config) {
  if (n < 1) fail("need at least one trajectory");
  if (!(config.eta > 0.0)) fail("eta must be positive");
  if (!(config.speed.min_mps > 0.0) || config.speed.max_mps < config.speed.min_mps) fail("invalid speed model");
  if (network.num_nodes() < 2) fail("network needs at least two nodes");
  constexpr int kMaxDisconnected = 10;
  constexpr int kMaxShort = 10000;

  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> pick(0, network.num_nodes() - 1);
  std::uniform_real_distribution<double> speed(config.speed.min_mps, config.speed.max_mps);
  std::uniform_real_distribution<double> depart(0.0, config.departure_window_s);
  std::normal_distribution<double> noise(0.0, 1.0);

  SynthResult out;
  std::vector<Trajectory> raw;
  raw.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    int disconnected = 0;
    int too_short = 0;
    while (true) {
      const auto& o = network.nodes()[pick(rng)];
      const auto& d = network.nodes()[pick(rng)];
      if (o.id == d.id) continue;
      const auto path = network.node_path(o.id, d.id);
      if (!path) {
        if (++disconnected >= kMaxDisconnected)
          fail("no connected origin/destination pair after " + std::to_string(kMaxDisconnected) + " draws");
        continue;
      }
      std::vector<double> speeds(path->segments.size());
      for (double& s : speeds) s = speed(rng);
      const double departure = std::floor(depart(rng));
      Trip trip = simulate_trip(network, path->segments, speeds, config.eta, departure, static_cast<TrajectoryId>(i));
      if (trip.raw.points.size() < config.min_points) {
        if (++too_short >= kMaxShort) fail("network too small to produce trips of the requested length");
        continue;
      }
      if (config.noise_sigma_m > 0.0) {
        for (auto& p : trip.raw.points) {
          const LocalFrame frame(p.coord());
          const LngLat moved = frame.to_lnglat({noise(rng) * config.noise_sigma_m, noise(rng) * config.noise_sigma_m});
          p.lng = moved.lng;
          p.lat = moved.lat;
        }
      }
      raw.push_back(std::move(trip.raw));
      out.ground_truth.push_back(std::move(trip.matched));
      break;
    }
  }
  out.dataset = make_dataset(std::move(raw), config.eta);
  return out;
}

std::vector<std::size_t> resample_indices(std::size_t length, double eta, double mu) {
  if (!(eta > 0.0) || !(mu > 0.0)) fail("eta and mu must be positive");
  const double ratio = mu / eta;
  const double step_f = std::round(ratio);
  if (step_f < 1.0 || std::abs(ratio - step_f) > 1e-9 * ratio) {
    fail("mu=" + csv::format(mu) + " is not divisible by eta=" + csv::format(eta));
  }
  const auto step = static_cast<std::size_t>(step_f);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < length; i += step) idx.push_back(i);
  if (length > 0 && idx.back() != length - 1) idx.push_back(length - 1);
  return idx;
}

SparseTrajectory resample(const Trajectory& trajectory, double eta, double mu) {
  SparseTrajectory out;
  out.id = trajectory.id;
  out.mu = mu;
  for (std::size_t i : resample_indices(trajectory.points.size(), eta, mu)) {
    const auto& p = trajectory.points[i];
    out.entries.push_back({p.coord(), p.t, i});
  }
  return out;
}

SparseTrajectory drop_features(SparseTrajectory sparse, double phi, std::mt19937_64& rng) {
  if (!(phi >= 0.0 && phi < 1.0)) fail("removal probability must lie in [0,1)");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < sparse.entries.size(); ++i) {
    auto& e = sparse.entries[i];
    const bool remove = u(rng) < phi;
    const bool drop_time = u(rng) < 0.5;
    if (!remove || !e.coord || !e.t) continue;
    if (drop_time && i != 0) {
      e.t.reset();
    } else {
      e.coord.reset();
    }
  }
  return sparse;
}

DatasetSplit chronological_split(const Dataset& dataset) {
  std::vector<Trajectory> sorted = dataset.trajectories;
  std::stable_sort(sorted.begin(), sorted.end(), [](const Trajectory& a, const Trajectory& b) {
    const double ta = a.points.empty() ? 0.0 : a.points.front().t;
    const double tb = b.points.empty() ? 0.0 : b.points.front().t;
    if (ta != tb) return ta < tb;
    return a.id < b.id;
  });
  const std::size_t n = sorted.size();
  const auto n_valid = static_cast<std::size_t>(std::round(0.1 * static_cast<double>(n)));
  const std::size_t n_test = n_valid;
  const std::size_t n_train = n - n_valid - n_test;
  auto slice = [&](std::size_t from, std::size_t count) {
    std::vector<Trajectory> part(sorted.begin() + static_cast<std::ptrdiff_t>(from),
                                 sorted.begin() + static_cast<std::ptrdiff_t>(from + count));
    Dataset ds = make_dataset(std::move(part), dataset.eta, dataset.time_scale);
    return ds;
  };
  return {slice(0, n_train), slice(n_train, n_valid), slice(n_train + n_valid, n_test)};
}

void write_split_manifest(const DatasetSplit& split, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::pair<const char*, const Dataset*> parts[] = {
      {"train_ids.txt", &split.train}, {"valid_ids.txt", &split.valid}, {"test_ids.txt", &split.test}};
  for (const auto& [name, ds] : parts) {
    std::ofstream out(dir / name);
    if (!out) fail("cannot write " + (dir / name).string());
    for (const auto& tr : ds->trajectories) out << tr.id << '\n';
  }
}

Corpus make_corpus(const Dataset& dataset, const std::vector<MatchedTrajectory>& matched) {
  std::unordered_map<TrajectoryId, const MatchedTrajectory*> by_id;
  for (const auto& m : matched) by_id.emplace(m.source_id, &m);
  Corpus out;
  out.eta = dataset.eta;
  for (const auto& tr : dataset.trajectories) {
    const auto it = by_id.find(tr.id);
    if (it == by_id.end()) fail("trajectory " + std::to_string(tr.id) + " has no matched counterpart");
    if (it->second->points.size() != tr.points.size())
      fail("trajectory " + std::to_string(tr.id) + " and its matched counterpart differ in length");
    out.trajectories.push_back(tr);
    out.matched.push_back(*it->second);
  }
  return out;
}

}  // namespace uvtm::trajdata
