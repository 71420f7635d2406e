#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "json.hpp"
#include "uvtm/error.hpp"
#include "uvtm/metrics.hpp"

using namespace uvtm;
using namespace uvtm::metrics;

TEST_CASE("regression metrics on simple inputs") {
  auto r = regression_metrics({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0});
  CHECK(r.mae == 0.0);
  CHECK(r.rmse == 0.0);
  CHECK(r.mape_pct == 0.0);
  r = regression_metrics({1.1}, {1.0});
  CHECK(r.mae == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(r.rmse == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(r.mape_pct == doctest::Approx(10.0).epsilon(1e-12));
  CHECK_THROWS_AS(regression_metrics({}, {}), Error);
  CHECK_THROWS_AS(regression_metrics({1.0}, {1.0, 2.0}), Error);
}

TEST_CASE("zero truths are excluded from MAPE and counted") {
  const auto r = regression_metrics({1.0, 2.0, 5.0}, {0.0, 1.0, 5.0});
  CHECK(r.mape_excluded == 1);
  CHECK(r.mape_pct == doctest::Approx(50.0));
  CHECK(r.mae == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("regression metrics match an independent recomputation") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.5, 100.0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + trial % 37;
    std::vector<double> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = u(rng);
      t[i] = u(rng);
    }
    double mae = 0, mse = 0, mape = 0;
    for (std::size_t i = 0; i < n; ++i) {
      mae += std::fabs(p[i] - t[i]) / n;
      mse += (p[i] - t[i]) * (p[i] - t[i]) / n;
      mape += 100.0 * std::fabs((p[i] - t[i]) / t[i]) / n;
    }
    const auto r = regression_metrics(p, t);
    CHECK(std::abs(r.mae - mae) <= 1e-9);
    CHECK(std::abs(r.rmse - std::sqrt(mse)) <= 1e-9);
    CHECK(std::abs(r.mape_pct - mape) <= 1e-9);
    CHECK(r.mae <= r.rmse + 1e-12);
  }
}

TEST_CASE("segment precision and recall") {
  auto [p, r] = seg_precision_recall({1, 2, 3}, {2, 3, 4});
  CHECK(p == doctest::Approx(2.0 / 3.0));
  CHECK(r == doctest::Approx(2.0 / 3.0));
  std::tie(p, r) = seg_precision_recall({5, 6}, {5, 6});
  CHECK(p == 1.0);
  CHECK(r == 1.0);
  std::tie(p, r) = seg_precision_recall({1}, {2});
  CHECK(p == 0.0);
  CHECK(r == 0.0);
  std::tie(p, r) = seg_precision_recall({1, 2}, {1, 2, 3, 4});
  CHECK(p == 1.0);
  CHECK(r == 0.5);
  CHECK_THROWS_AS(seg_precision_recall({}, {1}), Error);
  CHECK_THROWS_AS(seg_precision_recall({1}, {}), Error);
}

TEST_CASE("precision and recall stay in range and both reach one only for equal sets") {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> id(0, 12), size(1, 8);
  for (int trial = 0; trial < 500; ++trial) {
    std::set<roadnet::SegmentId> a, b;
    for (int k = size(rng); k > 0; --k) a.insert(id(rng));
    for (int k = size(rng); k > 0; --k) b.insert(id(rng));
    if (trial % 7 == 0) b = a;
    const auto [p, r] = seg_precision_recall(a, b);
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
    CHECK(((p == 1.0 && r == 1.0) == (a == b)));
  }
}

TEST_CASE("mean precision and recall average per sample and count empty samples") {
  const auto m = mean_precision_recall({{1, 2}, {}, {3}}, {{1, 2}, {4}, {4}});
  CHECK(m.samples == 2);
  CHECK(m.excluded == 1);
  CHECK(m.precision == doctest::Approx(0.5));
  CHECK(m.recall == doctest::Approx(0.5));
}

TEST_CASE("haversine") {
  const LngLat a{104.06, 30.66};
  CHECK(haversine(a, a) == 0.0);
  const double closed = 6371000.0 * 3.14159265358979323846 / 180.0;
  CHECK(std::abs(haversine({0, 0}, {0, 1}) - closed) <= 1.0);
  CHECK(std::abs(haversine({0, 0}, {0, 1}) - 111195.0) <= 1.0);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> lng(-180, 180), lat(-89, 89);
  for (int i = 0; i < 200; ++i) {
    const LngLat p{lng(rng), lat(rng)}, q{lng(rng), lat(rng)};
    CHECK(haversine(p, q) == haversine(q, p));
  }
}

TEST_CASE("rank metrics") {
  auto r = rank_metrics({{1, 2, 3}, {2, 1, 3}}, {1, 2});
  CHECK(r.mean_rank == 1.0);
  CHECK(r.top1_acc_pct == 100.0);
  r = rank_metrics({{7, 8, 9}, {4, 5, 6}}, {7, 6});
  CHECK(r.mean_rank == 2.0);
  CHECK(r.top1_acc_pct == 50.0);
  CHECK_THROWS_AS(rank_metrics({{1, 2}}, {3}), Error);
}

TEST_CASE("rank metrics match a brute-force rank lookup on random permutations") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + trial % 20;
    std::vector<std::vector<std::int64_t>> rankings(n);
    std::vector<std::int64_t> truths(n);
    double rank_sum = 0.0, top = 0.0;
    for (std::size_t q = 0; q < n; ++q) {
      std::vector<std::int64_t> ids(n);
      for (std::size_t k = 0; k < n; ++k) ids[k] = static_cast<std::int64_t>(100 + k);
      std::shuffle(ids.begin(), ids.end(), rng);
      rankings[q] = ids;
      truths[q] = static_cast<std::int64_t>(100 + q);
      for (std::size_t k = 0; k < n; ++k)
        if (ids[k] == truths[q]) {
          rank_sum += static_cast<double>(k + 1);
          top += k == 0;
        }
    }
    const auto r = rank_metrics(rankings, truths);
    CHECK(r.mean_rank == rank_sum / static_cast<double>(n));
    CHECK(r.top1_acc_pct == 100.0 * top / static_cast<double>(n));
  }
}

TEST_CASE("nearest time alignment") {
  const std::vector<double> times{0.0, 15.0, 30.0};
  CHECK(nearest_time(times, 14.0, 7.5) == std::optional<std::size_t>{1});
  CHECK(nearest_time(times, 7.5, 7.5) == std::optional<std::size_t>{0});
  CHECK_FALSE(nearest_time(times, 50.0, 7.5).has_value());
  CHECK_FALSE(nearest_time({}, 0.0, 7.5).has_value());
}

TEST_CASE("exact recovery has zero distance errors") {
  const auto net = fixtures::grid();
  const auto data = fixtures::trips(net, 20, 6);
  for (std::size_t i = 0; i < data.dataset.trajectories.size(); ++i) {
    const auto& tr = data.dataset.trajectories[i];
    const auto& mt = data.ground_truth[i];
    std::vector<RecoveredPoint> pts;
    for (std::size_t k = 0; k < tr.points.size(); ++k)
      pts.push_back({tr.points[k].t, tr.points[k].coord(), mt.points[k].position()});
    const auto e = aligned_errors(pts, tr, mt, net, 7.5);
    CHECK(e.aligned == tr.points.size());
    CHECK(e.coor_n == tr.points.size());
    CHECK(e.road_n == tr.points.size());
    CHECK(e.coor_sum_m == 0.0);
    CHECK(e.road_sum_m == 0.0);
    CHECK(e.time_sum_s == 0.0);
  }
}

TEST_CASE("aligned errors skip missing fields and unaligned truth points") {
  const auto net = fixtures::grid();
  const auto data = fixtures::trips(net, 1, 6);
  const auto& tr = data.dataset.trajectories[0];
  const auto& mt = data.ground_truth[0];
  const LngLat off{tr.points[1].lng + 0.001, tr.points[1].lat};
  std::vector<RecoveredPoint> pts{{tr.points[0].t + 3.0, std::nullopt, mt.points[0].position()},
                                  {tr.points[1].t, off, std::nullopt}};
  const auto e = aligned_errors(pts, tr, mt, net, 7.5);
  CHECK(e.aligned == 2);
  CHECK(e.coor_n == 1);
  CHECK(e.road_n == 1);
  CHECK(e.time_sum_s == doctest::Approx(3.0));
  CHECK(e.coor_sum_m == doctest::Approx(haversine(off, tr.points[1].coord())));
  CHECK(e.road_sum_m == 0.0);
}

TEST_CASE("metric reports validate and serialize with fixed keys") {
  MetricReport rep{"recover", {{"precision", 0.9}, {"recall", 0.8}, {"mae_coor_m", 12.0}}, 10};
  rep.validate();
  const auto j = nlohmann::json::parse(to_json(rep));
  CHECK(j["task"] == "recover");
  CHECK(j["samples"] == 10);
  CHECK(j["precision"] == 0.9);
  CHECK(j["mae_coor_m"] == 12.0);

  const auto path = std::filesystem::temp_directory_path() / "uvtm_report.json";
  write_json(rep, path);
  std::ifstream in(path);
  CHECK(nlohmann::json::parse(in)["recall"] == 0.8);
  std::filesystem::remove(path);

  MetricReport empty{"tte", {{"mae", 1.0}}, 0};
  CHECK_THROWS_AS(empty.validate(), Error);
  MetricReport bad{"tte", {{"mae", std::nan("")}}, 3};
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_THROWS_AS(write_json(bad, path), Error);
}
