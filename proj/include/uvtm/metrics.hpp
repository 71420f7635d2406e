#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "uvtm/geo.hpp"
#include "uvtm/roadnet.hpp"
#include "uvtm/trajectory.hpp"

namespace uvtm::metrics {

struct Regression {
  double mae = 0.0;
  double rmse = 0.0;
  double mape_pct = 0.0;
  std::size_t mape_excluded = 0;  // samples with zero truth
};

Regression regression_metrics(const std::vector<double>& predictions, const std::vector<double>& truths);

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  std::size_t samples = 0;
  std::size_t excluded = 0;  // samples with an empty recovered or truth set
};

/// Set precision and recall for a single sample. Throws when either set is empty.
std::pair<double, double> seg_precision_recall(const std::set<roadnet::SegmentId>& recovered,
                                               const std::set<roadnet::SegmentId>& truth);

/// Per-sample precision/recall averaged over samples; empty sets are excluded and counted.
PrecisionRecall mean_precision_recall(const std::vector<std::set<roadnet::SegmentId>>& recovered,
                                      const std::vector<std::set<roadnet::SegmentId>>& truth);

inline double haversine(LngLat a, LngLat b) { return haversine_m(a, b); }

struct Ranking {
  double mean_rank = 0.0;
  double top1_acc_pct = 0.0;
};

/// rankings[q] is the ordered candidate list for query q; truths[q] must occur in it.
Ranking rank_metrics(const std::vector<std::vector<std::int64_t>>& rankings, const std::vector<std::int64_t>& truths);

/// Index of the recovered time nearest to `t`, when within `tolerance`; ties go
/// to the earlier entry.
std::optional<std::size_t> nearest_time(const std::vector<double>& times, double t, double tolerance);

/// One recovered point; any field may be missing.
struct RecoveredPoint {
  std::optional<double> t;
  std::optional<LngLat> coord;
  std::optional<roadnet::RoadPosition> road;
};

/// Error sums over truth points that have a recovered point within `tolerance`
/// seconds (nearest time wins).
struct AlignedErrors {
  double coor_sum_m = 0.0;
  double road_sum_m = 0.0;
  double time_sum_s = 0.0;
  std::size_t aligned = 0;
  std::size_t coor_n = 0;
  std::size_t road_n = 0;
};

AlignedErrors aligned_errors(const std::vector<RecoveredPoint>& recovered, const Trajectory& truth,
                             const MatchedTrajectory& truth_matched, const roadnet::RoadNetwork& network,
                             double tolerance);

/// Named metric values with the task they belong to.
struct MetricReport {
  std::string task;
  std::map<std::string, double> values;
  std::size_t samples = 0;

  /// Throws when a value is not finite or no sample was evaluated.
  void validate() const;
};

std::string to_json(const MetricReport& report);
void write_json(const MetricReport& report, const std::filesystem::path& path);

}  // namespace uvtm::metrics
