#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "uvtm/error.hpp"
#include "uvtm/tasks.hpp"

using namespace uvtm;
using namespace uvtm::tasks;
using model::Model;
using tokenizer::Token;

namespace {

struct Setup {
  roadnet::RoadNetwork net = fixtures::grid();
  trajdata::SynthResult data = fixtures::trips(net, 16, 12);
  trajdata::Corpus corpus = trajdata::make_corpus(data.dataset, data.ground_truth);
  Model<float> model{config()};

  model::ModelConfig config() const {
    model::ModelConfig c;
    c.d = 16;
    c.heads = 2;
    c.layers = 1;
    c.num_segments = static_cast<int>(net.num_segments());
    c.normalizer.bbox = data.dataset.bbox;
    c.seed = 5;
    return c;
  }
};

Setup& setup() {
  static Setup s;
  return s;
}

trajdata::Corpus head(const trajdata::Corpus& c, std::size_t n) {
  trajdata::Corpus out;
  out.eta = c.eta;
  out.trajectories.assign(c.trajectories.begin(), c.trajectories.begin() + n);
  out.matched.assign(c.matched.begin(), c.matched.begin() + n);
  return out;
}

std::vector<int> p1s(const tokenizer::SequencePlan& p) {
  std::vector<int> out;
  for (const auto& in : p.inputs) out.push_back(in.p1);
  return out;
}

std::vector<int> one_to(std::size_t n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 1);
  return v;
}

}  // namespace

TEST_CASE("task names round trip") {
  for (auto k : {TaskKind::OdTte, TaskKind::Recovery, TaskKind::Prediction, TaskKind::SimilarSearch})
    CHECK(parse_task_kind(task_name(k)) == k);
  CHECK_THROWS_AS(parse_task_kind("classify"), Error);
  TaskSpec s;
  s.input_mu = 50.0;
  CHECK_THROWS_AS(s.validate(15.0), Error);
  s.kind = TaskKind::OdTte;
  CHECK_NOTHROW(s.validate(15.0));
  s.max_block_len = 0;
  CHECK_THROWS_AS(s.validate(15.0), Error);
}

TEST_CASE("travel time arrangement") {
  const auto& s = setup();
  const auto& tr = s.corpus.trajectories[0];
  const auto plan = od_tte_plan(tr.points.front().coord(), tr.points.back().coord(), tr.points.front().t, s.net, 100.0);
  REQUIRE(plan.inputs.size() == 2);
  CHECK(p1s(plan) == std::vector<int>{1, 2});
  const auto& o = plan.inputs[0].tuple;
  const auto& d = plan.inputs[1].tuple;
  CHECK(o.spatial_value());
  REQUIRE(o.temporal_value());
  CHECK(o.temporal_value()->t_norm == 0.0);
  CHECK(std::holds_alternative<Token>(o.road));
  CHECK(d.spatial_value());
  CHECK_FALSE(d.temporal_value());
  CHECK_FALSE(d.road_value());
  REQUIRE(plan.blocks.size() == 1);
  CHECK(plan.blocks[0].anchor == 1);
  CHECK(plan.blocks[0].targets.empty());

  std::mt19937_64 rng(0);
  TaskSpec spec;
  spec.kind = TaskKind::OdTte;
  const auto train = training_plan(tr, s.corpus.matched[0], 15.0, spec, s.net, 100.0, rng);
  REQUIRE(train.blocks[0].targets.size() == 2);
  CHECK(train.blocks[0].targets[0].temporal_value()->t_norm == tr.points.back().t - tr.points.front().t);
  CHECK(train.blocks[0].targets[0].road_value()->segment == s.corpus.matched[0].points.back().segment);
  CHECK(train.blocks[0].targets[1].is(Token::End));

  const auto b = s.net.bounds();
  CHECK_THROWS_AS(od_tte_plan({b.max_lng + 0.05, b.max_lat}, tr.points.back().coord(), 0.0, s.net, 100.0), Error);
}

TEST_CASE("sparse input arrangement inserts one mask per gap") {
  const auto& s = setup();
  for (double mu : {15.0, 30.0, 60.0, 120.0}) {
    for (std::size_t i = 0; i < s.corpus.size(); ++i) {
      const auto sparse = trajdata::resample(s.corpus.trajectories[i], 15.0, mu);
      std::size_t gaps = 0;
      for (std::size_t k = 1; k < sparse.entries.size(); ++k)
        gaps += sparse.entries[k].dense_index > sparse.entries[k - 1].dense_index + 1;
      const auto plan = sparse_input_plan(sparse, 15.0, s.net, 100.0);
      REQUIRE(plan.inputs.size() == sparse.entries.size() + gaps);
      CHECK(p1s(plan) == one_to(plan.inputs.size()));
      REQUIRE(plan.blocks.size() == plan.inputs.size());
      std::size_t masks = 0;
      for (std::size_t k = 0; k < plan.blocks.size(); ++k) {
        CHECK(plan.blocks[k].anchor == k);
        CHECK(plan.blocks[k].targets.empty());
        const auto& t = plan.inputs[k].tuple;
        if (t.is(Token::Mask)) {
          ++masks;
          CHECK(k > 0);
          CHECK_FALSE(plan.inputs[k - 1].tuple.is(Token::Mask));
        } else {
          CHECK(t.spatial_value());
          CHECK(t.temporal_value());
          CHECK_FALSE(t.road_value());
        }
      }
      CHECK(masks == gaps);
      if (mu == 15.0) CHECK(gaps == 0);
      CHECK(sparse_input_plan(sparse, 15.0, s.net, 100.0, true).with_cls);
    }
  }
}

TEST_CASE("prediction arrangement") {
  const auto& s = setup();
  const auto& tr = s.corpus.trajectories[1];
  const auto& mt = s.corpus.matched[1];
  const std::size_t n = 3;
  const auto plan = prediction_plan(tr, mt, n, s.net, 100.0, true);
  REQUIRE(plan.inputs.size() == n + 1);
  for (std::size_t i = 0; i < n; ++i) CHECK(plan.inputs[i].tuple == tokenizer::ground_truth_tuple(tr, mt, i, s.net, 100.0, plan.t0));
  CHECK(plan.inputs[n].tuple.is(Token::Mask));
  REQUIRE(plan.blocks.size() == 1);
  CHECK(plan.blocks[0].anchor == n);
  CHECK(plan.blocks[0].targets.size() == tr.points.size() - n + 1);
  CHECK(plan.blocks[0].targets.back().is(Token::End));
  CHECK(prediction_plan(tr, mt, n, s.net, 100.0, false).blocks[0].targets.empty());
  CHECK_THROWS_AS(prediction_plan(tr, mt, 0, s.net, 100.0, true), Error);
  CHECK_THROWS_AS(prediction_plan(tr, mt, tr.points.size(), s.net, 100.0, true), Error);

  TaskSpec spec;
  spec.kind = TaskKind::SimilarSearch;
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(training_plan(tr, mt, 15.0, spec, s.net, 100.0, rng), Error);
  spec.kind = TaskKind::Prediction;
  for (int k = 0; k < 20; ++k) {
    const auto p = training_plan(tr, mt, 15.0, spec, s.net, 100.0, rng);
    CHECK(p.inputs.size() >= 3);
    CHECK(p.inputs.size() <= tr.points.size());
    CHECK(p.inputs.size() - 1 + p.blocks[0].targets.size() - 1 == tr.points.size());
  }
}

TEST_CASE("ranking orders by cosine similarity with ties broken by id") {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> g(0.0f, 1.0f);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + trial % 12;
    std::vector<float> q(6);
    for (auto& x : q) x = g(rng);
    std::vector<std::vector<float>> c(n, std::vector<float>(6));
    std::vector<TrajectoryId> ids(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (auto& x : c[i]) x = g(rng);
      ids[i] = static_cast<TrajectoryId>(1000 - 7 * i);
    }
    const auto r = rank_candidates(q, c, ids);
    auto sorted = ids;
    auto got = r;
    std::sort(sorted.begin(), sorted.end());
    std::sort(got.begin(), got.end());
    CHECK(got == sorted);
    // Pairwise: every earlier candidate is at least as similar as every later one.
    auto cos = [&](TrajectoryId id) {
      const auto& v = c[static_cast<std::size_t>(std::find(ids.begin(), ids.end(), id) - ids.begin())];
      double dot = 0, a = 0, b = 0;
      for (std::size_t k = 0; k < 6; ++k) {
        dot += static_cast<double>(q[k]) * v[k];
        a += static_cast<double>(q[k]) * q[k];
        b += static_cast<double>(v[k]) * v[k];
      }
      return dot / std::sqrt(a * b);
    };
    for (std::size_t k = 1; k < r.size(); ++k) CHECK(cos(r[k - 1]) >= cos(r[k]) - 1e-12);
  }
  const std::vector<float> q{1, 0};
  const std::vector<std::vector<float>> same{{2, 1}, {1, 0}, {4, 2}, {3, 0}};
  CHECK(rank_candidates(q, same, {9, 8, 3, 5}) == std::vector<TrajectoryId>{5, 8, 3, 9});
  CHECK_THROWS_AS(rank_candidates(q, {}, {}), Error);
  CHECK_THROWS_AS(rank_candidates(q, same, {1}), Error);
}

TEST_CASE("travel time is clamped at zero") {
  const auto& s = setup();
  auto m = s.model;
  m.params()[m.layout().wt].value.setZero();
  m.params()[m.layout().bt].value.setConstant(-3.0f);
  const auto& tr = s.corpus.trajectories[0];
  CHECK(od_tte(m, s.net, tr.points.front().coord(), tr.points.back().coord(), tr.points.front().t) == 0.0);
  m.params()[m.layout().bt].value.setConstant(2.0f);
  const double t = od_tte(m, s.net, tr.points.front().coord(), tr.points.back().coord(), tr.points.front().t);
  CHECK(t == doctest::Approx(2.0 * s.model.config().normalizer.time_scale).epsilon(1e-5));
}

TEST_CASE("recovery keeps observed points and respects the block cap") {
  const auto& s = setup();
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& tr = s.corpus.trajectories[i];
    const auto all = trajdata::resample(tr, 15.0, 15.0);
    const auto r = recover(s.model, s.net, all, 15.0);
    REQUIRE(r.points.size() == tr.points.size());
    for (std::size_t k = 0; k < tr.points.size(); ++k) {
      CHECK(*r.points[k].t == doctest::Approx(tr.points[k].t).epsilon(1e-9));
      CHECK(r.points[k].coord->lng == doctest::Approx(tr.points[k].lng).epsilon(1e-9));
      CHECK(r.points[k].road.has_value());
    }
    const auto sparse = trajdata::resample(tr, 15.0, 60.0);
    const auto plan = sparse_input_plan(sparse, 15.0, s.net, 100.0);
    for (std::size_t cap : {1u, 2u, 5u}) {
      const auto rc = recover(s.model, s.net, sparse, 15.0, cap);
      CHECK(rc.points.size() >= plan.inputs.size());
      CHECK(rc.points.size() <= sparse.entries.size() + (plan.inputs.size() - sparse.entries.size()) * cap);
    }
  }
}

TEST_CASE("prediction output is capped") {
  const auto& s = setup();
  const auto& tr = s.corpus.trajectories[2];
  for (std::size_t cap : {1u, 3u, 8u}) {
    const auto f = predict(s.model, s.net, tr, s.corpus.matched[2], 3, cap);
    CHECK(f.size() >= 1);
    CHECK(f.size() <= cap);
    for (const auto& p : f) CHECK(p.road.has_value());
  }
}

TEST_CASE("evaluation reports every task and is independent of the worker count") {
  const auto& s = setup();
  const auto small = head(s.corpus, 6);
  for (auto kind : {TaskKind::OdTte, TaskKind::Recovery, TaskKind::Prediction, TaskKind::SimilarSearch}) {
    TaskSpec spec;
    spec.kind = kind;
    spec.max_block_len = 6;
    const auto a = evaluate(s.model, s.net, small, spec, 1);
    const auto b = evaluate(s.model, s.net, small, spec, 3);
    CHECK(a.report.samples == 6);
    CHECK(a.rows.size() == 6);
    CHECK(a.rows == b.rows);
    CHECK(a.report.values == b.report.values);
    for (const auto& row : a.rows) CHECK(row.size() == a.csv_header.size());
    const double v = validation_metric(a, kind);
    CHECK(std::isfinite(v));
    if (kind == TaskKind::SimilarSearch) {
      CHECK(a.report.values.at("mean_rank") >= 1.0);
      CHECK(a.report.values.at("mean_rank") <= 6.0);
    }
    if (kind == TaskKind::Recovery) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  TaskSpec spec;
  const auto ev = evaluate(s.model, s.net, small, spec);
  const auto path = std::filesystem::temp_directory_path() / "uvtm_eval.csv";
  write_evaluation_csv(ev, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "traj_id,precision,recall,recovered_points,dense_points,times_monotonic");
  std::filesystem::remove(path);
  CHECK_THROWS_AS(evaluate(s.model, s.net, head(s.corpus, 0), spec), Error);
}

TEST_CASE("validation metrics follow their definitions") {
  Evaluation e;
  e.report.values = {{"mape_pct", 12.5}, {"precision", 0.8}, {"recall", 0.6}, {"dest_segment_acc_pct", 40.0},
                     {"mean_rank", 1.5}};
  CHECK(validation_metric(e, TaskKind::OdTte) == 12.5);
  CHECK(validation_metric(e, TaskKind::Recovery) == doctest::Approx(0.3));
  CHECK(validation_metric(e, TaskKind::Prediction) == doctest::Approx(0.6));
  CHECK(validation_metric(e, TaskKind::SimilarSearch) == 1.5);
}

TEST_CASE("fine-tuning reduces the task loss and is reproducible") {
  const auto& s = setup();
  const auto train = head(s.corpus, 12);
  trajdata::Corpus valid;
  valid.eta = s.corpus.eta;
  valid.trajectories.assign(s.corpus.trajectories.begin() + 12, s.corpus.trajectories.end());
  valid.matched.assign(s.corpus.matched.begin() + 12, s.corpus.matched.end());
  TaskSpec spec;
  spec.kind = TaskKind::OdTte;
  FinetuneConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  cfg.lr = 5e-3;
  cfg.early_stop = false;
  auto a = s.model, b = s.model;
  const double before = task_validation_loss(a, s.net, valid, spec, cfg.seed);
  const auto ha = finetune(a, s.net, train, valid, spec, cfg);
  const auto hb = finetune(b, s.net, train, valid, spec, cfg);
  REQUIRE(ha.epochs.size() == 4);
  CHECK(ha.best_epoch == 4);
  for (std::size_t e = 0; e < ha.epochs.size(); ++e) {
    CHECK(ha.epochs[e].train_loss == hb.epochs[e].train_loss);
    CHECK(ha.epochs[e].valid_loss == hb.epochs[e].valid_loss);
    CHECK(std::isnan(ha.epochs[e].valid_metric));
  }
  CHECK(ha.epochs.back().valid_loss < before);
  MESSAGE("travel time validation loss " << before << " -> " << ha.epochs.back().valid_loss);

  cfg.early_stop = true;
  cfg.epochs = 3;
  auto c = s.model;
  const auto hc = finetune(c, s.net, train, valid, spec, cfg);
  CHECK(hc.best_epoch >= 1);
  for (const auto& e : hc.epochs) CHECK(std::isfinite(e.valid_metric));

  spec.kind = TaskKind::SimilarSearch;
  CHECK_THROWS_AS(finetune(c, s.net, train, valid, spec, cfg), Error);
}
