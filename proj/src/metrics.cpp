#include "uvtm/metrics.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_map>

#include "json.hpp"
#include "uvtm/error.hpp"

namespace uvtm::metrics {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error("metrics", msg); }

}  // namespace

Regression regression_metrics(const std::vector<double>& predictions, const std::vector<double>& truths) {
  if (predictions.size() != truths.size()) fail("predictions and truths differ in length");
  if (predictions.empty()) fail("regression metrics need at least one sample");
  Regression r;
  double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
  std::size_t pct_n = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double e = predictions[i] - truths[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
    if (truths[i] == 0.0) {
      r.mape_excluded++;
    } else {
      pct_sum += std::abs(e / truths[i]);
      pct_n++;
    }
  }
  const double n = static_cast<double>(predictions.size());
  r.mae = abs_sum / n;
  r.rmse = std::sqrt(sq_sum / n);
  r.mape_pct = pct_n > 0 ? 100.0 * pct_sum / static_cast<double>(pct_n) : 0.0;
  return r;
}

std::pair<double, double> seg_precision_recall(const std::set<roadnet::SegmentId>& recovered,
                                               const std::set<roadnet::SegmentId>& truth) {
  if (recovered.empty()) fail("recovered segment set is empty");
  if (truth.empty()) fail("truth segment set is empty");
  std::size_t hit = 0;
  for (auto s : recovered) hit += truth.count(s);
  return {static_cast<double>(hit) / static_cast<double>(recovered.size()),
          static_cast<double>(hit) / static_cast<double>(truth.size())};
}

PrecisionRecall mean_precision_recall(const std::vector<std::set<roadnet::SegmentId>>& recovered,
                                      const std::vector<std::set<roadnet::SegmentId>>& truth) {
  if (recovered.size() != truth.size()) fail("recovered and truth lists differ in length");
  PrecisionRecall out;
  for (std::size_t i = 0; i < recovered.size(); ++i) {
    if (recovered[i].empty() || truth[i].empty()) {
      out.excluded++;
      continue;
    }
    const auto [p, r] = seg_precision_recall(recovered[i], truth[i]);
    out.precision += p;
    out.recall += r;
    out.samples++;
  }
  if (out.samples > 0) {
    out.precision /= static_cast<double>(out.samples);
    out.recall /= static_cast<double>(out.samples);
  }
  return out;
}

Ranking rank_metrics(const std::vector<std::vector<std::int64_t>>& rankings, const std::vector<std::int64_t>& truths) {
  if (rankings.size() != truths.size()) fail("rankings and truths differ in length");
  if (rankings.empty()) fail("rank metrics need at least one query");
  Ranking out;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    std::size_t rank = 0;
    for (std::size_t k = 0; k < rankings[q].size(); ++k) {
      if (rankings[q][k] == truths[q]) {
        rank = k + 1;
        break;
      }
    }
    if (rank == 0) fail("truth id " + std::to_string(truths[q]) + " missing from ranking of query " + std::to_string(q));
    out.mean_rank += static_cast<double>(rank);
    if (rank == 1) out.top1_acc_pct += 1.0;
  }
  const double n = static_cast<double>(rankings.size());
  out.mean_rank /= n;
  out.top1_acc_pct = 100.0 * out.top1_acc_pct / n;
  return out;
}

std::optional<std::size_t> nearest_time(const std::vector<double>& times, double t, double tolerance) {
  std::optional<std::size_t> best;
  double best_gap = 0.0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    const double gap = std::abs(times[i] - t);
    if (gap > tolerance) continue;
    if (!best || gap < best_gap) {
      best = i;
      best_gap = gap;
    }
  }
  return best;
}

AlignedErrors aligned_errors(const std::vector<RecoveredPoint>& recovered, const Trajectory& truth,
                             const MatchedTrajectory& truth_matched, const roadnet::RoadNetwork& network,
                             double tolerance) {
  if (truth.points.size() != truth_matched.points.size()) fail("truth and matched truth differ in length");
  std::vector<double> times;
  times.reserve(recovered.size());
  for (const auto& p : recovered) times.push_back(p.t ? *p.t : std::numeric_limits<double>::infinity());
  AlignedErrors out;
  for (std::size_t k = 0; k < truth.points.size(); ++k) {
    const auto j = nearest_time(times, truth.points[k].t, tolerance);
    if (!j) continue;
    const auto& p = recovered[*j];
    out.aligned++;
    out.time_sum_s += std::abs(*p.t - truth.points[k].t);
    if (p.coord) {
      out.coor_sum_m += haversine(*p.coord, truth.points[k].coord());
      out.coor_n++;
    }
    if (p.road) {
      out.road_sum_m += network.road_distance(*p.road, truth_matched.points[k].position());
      out.road_n++;
    }
  }
  return out;
}

void MetricReport::validate() const {
  if (samples == 0) fail("metric report for " + task + " has no samples");
  for (const auto& [k, v] : values)
    if (!std::isfinite(v)) fail("metric " + k + " of " + task + " is not finite");
}

std::string to_json(const MetricReport& report) {
  nlohmann::ordered_json j;
  j["task"] = report.task;
  j["samples"] = report.samples;
  for (const auto& [k, v] : report.values) j[k] = v;
  return j.dump(2);
}

void write_json(const MetricReport& report, const std::filesystem::path& path) {
  report.validate();
  std::ofstream out(path);
  if (!out) fail("cannot write " + path.string());
  out << to_json(report) << '\n';
}

}  // namespace uvtm::metrics
