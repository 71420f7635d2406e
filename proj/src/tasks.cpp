#include "uvtm/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <thread>

#include "uvtm/csv.hpp"
#include "uvtm/nn/optim.hpp"

namespace uvtm::tasks {

using tokenizer::SequencePlan;
using tokenizer::Token;
using tokenizer::Tuple;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error("tasks", msg); }

constexpr std::uint64_t kValidationStream = 0x7a5c0ffeULL;

// Numbers inputs from 1 and orders blocks as listed. Plans whose blocks already
// hold targets are also validated.
void finish_plan(SequencePlan& plan) {
  for (std::size_t k = 0; k < plan.inputs.size(); ++k) plan.inputs[k].p1 = static_cast<int>(k) + 1;
  plan.block_order.resize(plan.blocks.size());
  std::iota(plan.block_order.begin(), plan.block_order.end(), 0);
  const bool has_targets =
      std::all_of(plan.blocks.begin(), plan.blocks.end(), [](const auto& b) { return !b.targets.empty(); });
  if (has_targets && !plan.blocks.empty()) tokenizer::normalize_plan(plan);
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

std::string fmt(double v) { return csv::format(v); }

double delta_of(const model::Model<float>& model) { return model.config().delta_m; }

// One teacher-forced graph over several plans; returns the summed per-plan mean loss.
double plans_loss(model::Model<float>& model, const std::vector<SequencePlan>& plans, bool backward) {
  nn::Graph<float> g(backward);
  nn::Var total;
  for (const auto& plan : plans) {
    const auto seq = tokenizer::assign_positions(plan);
    const auto f = model.forward(g, seq);
    const nn::Var l = model.loss(g, f, seq);
    total = total ? nn::add(g, total, l) : l;
  }
  const double value = static_cast<double>(g.value(total)(0, 0));
  if (backward) {
    if (!std::isfinite(value)) fail("non-finite fine-tuning loss");
    model.params().zero_grad();
    g.backward(total);
  }
  return value;
}

}  // namespace

TaskKind parse_task_kind(const std::string& name) {
  if (name == "tte") return TaskKind::OdTte;
  if (name == "recover") return TaskKind::Recovery;
  if (name == "predict") return TaskKind::Prediction;
  if (name == "search") return TaskKind::SimilarSearch;
  fail("unknown task '" + name + "' (expected tte, recover, predict or search)");
}

std::string task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::OdTte: return "tte";
    case TaskKind::Recovery: return "recover";
    case TaskKind::Prediction: return "predict";
    case TaskKind::SimilarSearch: return "search";
  }
  return "unknown";
}

void TaskSpec::validate(double eta) const {
  if (max_block_len < 1) fail("max_block_len must be at least 1");
  if (kind == TaskKind::Recovery || kind == TaskKind::SimilarSearch) {
    const double ratio = input_mu / eta;
    if (!(eta > 0.0) || ratio < 1.0 || std::abs(ratio - std::round(ratio)) > 1e-9 * ratio)
      fail("input interval " + fmt(input_mu) + " is not a multiple of eta=" + fmt(eta));
  }
}

SequencePlan od_tte_plan(LngLat origin, LngLat destination, double departure, const roadnet::RoadNetwork& network,
                         double delta_m, const std::optional<Tuple>& target) {
  const Tuple o = tokenizer::point_tuple(origin, departure, std::nullopt, network, delta_m, departure);
  const Tuple d = tokenizer::point_tuple(destination, std::nullopt, std::nullopt, network, delta_m, departure);
  if (o.spatial_value()->omega.empty()) fail("origin has no road segment within " + fmt(delta_m) + " m");
  if (d.spatial_value()->omega.empty()) fail("destination has no road segment within " + fmt(delta_m) + " m");
  SequencePlan plan;
  plan.t0 = departure;
  plan.inputs = {{o, 0}, {d, 0}};
  tokenizer::TargetBlock block;
  block.anchor = 1;
  if (target) block.targets = {*target, Tuple::special(Token::End)};
  plan.blocks.push_back(std::move(block));
  finish_plan(plan);
  return plan;
}

SequencePlan sparse_input_plan(const trajdata::SparseTrajectory& sparse, double eta,
                               const roadnet::RoadNetwork& network, double delta_m, bool with_cls) {
  if (sparse.entries.empty()) fail("sparse trajectory is empty");
  if (!sparse.entries.front().t) fail("first sparse point must carry a timestamp");
  SequencePlan plan;
  plan.with_cls = with_cls;
  plan.t0 = *sparse.entries.front().t;
  for (std::size_t k = 0; k < sparse.entries.size(); ++k) {
    const auto& e = sparse.entries[k];
    if (k > 0) {
      const auto& prev = sparse.entries[k - 1];
      const bool gap = (e.t && prev.t) ? (*e.t - *prev.t > eta * (1.0 + 1e-9))
                                       : (e.dense_index > prev.dense_index + 1);
      if (gap) {
        plan.blocks.push_back({plan.inputs.size(), {}});
        plan.inputs.push_back({Tuple::special(Token::Mask), 0});
      }
    }
    plan.blocks.push_back({plan.inputs.size(), {}});
    plan.inputs.push_back({tokenizer::point_tuple(e.coord, e.t, std::nullopt, network, delta_m, plan.t0), 0});
  }
  finish_plan(plan);
  return plan;
}

SequencePlan prediction_plan(const Trajectory& dense, const MatchedTrajectory& matched, std::size_t n,
                             const roadnet::RoadNetwork& network, double delta_m, bool with_targets) {
  if (n < 1) fail("prediction needs a non-empty history");
  if (n > dense.points.size() || (with_targets && n >= dense.points.size()))
    fail("history length " + std::to_string(n) + " leaves nothing to predict");
  SequencePlan plan;
  plan.t0 = dense.points.front().t;
  for (std::size_t i = 0; i < n; ++i)
    plan.inputs.push_back({tokenizer::ground_truth_tuple(dense, matched, i, network, delta_m, plan.t0), 0});
  tokenizer::TargetBlock block;
  block.anchor = plan.inputs.size();
  plan.inputs.push_back({Tuple::special(Token::Mask), 0});
  if (with_targets) {
    for (std::size_t i = n; i < dense.points.size(); ++i)
      block.targets.push_back(tokenizer::ground_truth_tuple(dense, matched, i, network, delta_m, plan.t0));
    block.targets.push_back(Tuple::special(Token::End));
  }
  plan.blocks.push_back(std::move(block));
  finish_plan(plan);
  return plan;
}

SequencePlan training_plan(const Trajectory& dense, const MatchedTrajectory& matched, double eta,
                           const TaskSpec& spec, const roadnet::RoadNetwork& network, double delta_m,
                           std::mt19937_64& rng) {
  if (dense.points.size() < 2) fail("trajectory " + std::to_string(dense.id) + " is too short for fine-tuning");
  switch (spec.kind) {
    case TaskKind::OdTte: {
      const auto& first = dense.points.front();
      const Tuple target = tokenizer::ground_truth_tuple(dense, matched, dense.points.size() - 1, network, delta_m,
                                                         first.t);
      return od_tte_plan(first.coord(), dense.points.back().coord(), first.t, network, delta_m, target);
    }
    case TaskKind::Recovery:
      return tokenizer::build_pretrain_plan(dense, matched, trajdata::resample(dense, eta, spec.input_mu), false, rng,
                                            network, delta_m, false);
    case TaskKind::Prediction: {
      const std::size_t hi = dense.points.size() - 1;
      const std::size_t lo = std::min<std::size_t>(2, hi);
      std::uniform_int_distribution<std::size_t> pick(lo, hi);
      return prediction_plan(dense, matched, pick(rng), network, delta_m, true);
    }
    case TaskKind::SimilarSearch:
      break;
  }
  fail("similar search is zero-shot only and has no fine-tuning arrangement");
}

double od_tte(const model::Model<float>& model, const roadnet::RoadNetwork& network, LngLat origin,
              LngLat destination, double departure) {
  const auto plan = od_tte_plan(origin, destination, departure, network, delta_of(model));
  model::GenerationOptions opts;
  opts.max_block_len = 1;
  const auto out = model::generate_blocks(model, plan, network, opts);
  const auto* t = out.blocks.front().targets.front().temporal_value();
  return std::max(0.0, t ? t->t_norm : 0.0);
}

Recovery recover(const model::Model<float>& model, const roadnet::RoadNetwork& network,
                 const trajdata::SparseTrajectory& sparse, double eta, std::size_t max_block_len) {
  const auto plan = sparse_input_plan(sparse, eta, network, delta_of(model));
  model::GenerationOptions opts;
  opts.max_block_len = max_block_len;
  Recovery r;
  r.points = tokenizer::detokenize(model::generate_blocks(model, plan, network, opts));
  double prev = -std::numeric_limits<double>::infinity();
  for (const auto& p : r.points) {
    if (!p.t) continue;
    if (*p.t < prev) r.times_monotonic = false;
    prev = *p.t;
  }
  return r;
}

std::vector<tokenizer::DecodedPoint> predict(const model::Model<float>& model, const roadnet::RoadNetwork& network,
                                             const Trajectory& dense, const MatchedTrajectory& matched,
                                             std::size_t n, std::size_t max_block_len) {
  const auto plan = prediction_plan(dense, matched, n, network, delta_of(model), false);
  model::GenerationOptions opts;
  opts.max_block_len = max_block_len;
  return tokenizer::detokenize(model::generate_blocks(model, plan, network, opts));
}

std::vector<float> embed_dense(const model::Model<float>& model, const roadnet::RoadNetwork& network,
                               const Trajectory& dense, const MatchedTrajectory& matched) {
  return model::embed_trajectory(model, tokenizer::build_dense_plan(dense, matched, network, delta_of(model), true));
}

std::vector<float> embed_sparse(const model::Model<float>& model, const roadnet::RoadNetwork& network,
                                const trajdata::SparseTrajectory& sparse, double eta) {
  return model::embed_trajectory(model, sparse_input_plan(sparse, eta, network, delta_of(model), true));
}

std::vector<TrajectoryId> rank_candidates(const std::vector<float>& query,
                                          const std::vector<std::vector<float>>& candidates,
                                          const std::vector<TrajectoryId>& ids) {
  if (candidates.empty()) fail("no candidates to rank");
  if (candidates.size() != ids.size()) fail("candidate embeddings and ids differ in count");
  std::vector<double> sim(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) sim[i] = cosine(query, candidates[i]);
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sim[a] != sim[b]) return sim[a] > sim[b];
    return ids[a] < ids[b];
  });
  std::vector<TrajectoryId> out;
  out.reserve(order.size());
  for (std::size_t i : order) out.push_back(ids[i]);
  return out;
}

std::vector<TrajectoryId> similar_search(const model::Model<float>& model, const roadnet::RoadNetwork& network,
                                         const Trajectory& query, const MatchedTrajectory& query_matched,
                                         const std::vector<trajdata::SparseTrajectory>& candidates, double eta) {
  if (candidates.empty()) fail("no candidates to rank");
  std::vector<std::vector<float>> embs;
  std::vector<TrajectoryId> ids;
  for (const auto& c : candidates) {
    embs.push_back(embed_sparse(model, network, c, eta));
    ids.push_back(c.id);
  }
  return rank_candidates(embed_dense(model, network, query, query_matched), embs, ids);
}

Evaluation evaluate(const model::Model<float>& model, const roadnet::RoadNetwork& network,
                    const trajdata::Corpus& corpus, const TaskSpec& spec, std::size_t workers) {
  if (corpus.size() == 0) fail("evaluation corpus is empty");
  spec.validate(corpus.eta);
  const std::size_t n = corpus.size();
  Evaluation ev;
  ev.report.task = task_name(spec.kind);
  ev.report.samples = n;
  ev.rows.resize(n);

  switch (spec.kind) {
    case TaskKind::OdTte: {
      std::vector<double> pred(n), truth(n);
      parallel_for(n, workers, [&](std::size_t i) {
        const auto& tr = corpus.trajectories[i];
        pred[i] = od_tte(model, network, tr.points.front().coord(), tr.points.back().coord(), tr.points.front().t);
        truth[i] = tr.points.back().t - tr.points.front().t;
        ev.rows[i] = {std::to_string(tr.id), fmt(truth[i]), fmt(pred[i])};
      });
      const auto r = metrics::regression_metrics(pred, truth);
      ev.csv_header = {"traj_id", "truth_s", "pred_s"};
      ev.report.values = {{"mae", r.mae}, {"rmse", r.rmse}, {"mape_pct", r.mape_pct}};
      break;
    }
    case TaskKind::Recovery: {
      std::vector<std::set<roadnet::SegmentId>> rec(n), truth(n);
      std::vector<double> coor_sum(n, 0.0), road_sum(n, 0.0), time_sum(n, 0.0);
      std::vector<std::size_t> aligned(n, 0), coor_n(n, 0), road_n(n, 0);
      parallel_for(n, workers, [&](std::size_t i) {
        const auto& tr = corpus.trajectories[i];
        const auto& mt = corpus.matched[i];
        const auto r = recover(model, network, trajdata::resample(tr, corpus.eta, spec.input_mu), corpus.eta,
                               spec.max_block_len);
        std::vector<metrics::RecoveredPoint> pts;
        for (const auto& p : r.points) {
          if (p.road) rec[i].insert(p.road->segment);
          pts.push_back({p.t, p.coord, p.road});
        }
        for (const auto& p : mt.points) truth[i].insert(p.segment);
        const auto e = metrics::aligned_errors(pts, tr, mt, network, corpus.eta / 2.0);
        coor_sum[i] = e.coor_sum_m;
        road_sum[i] = e.road_sum_m;
        time_sum[i] = e.time_sum_s;
        aligned[i] = e.aligned;
        coor_n[i] = e.coor_n;
        road_n[i] = e.road_n;
        const auto [prec, recall] = rec[i].empty() ? std::pair<double, double>{0.0, 0.0}
                                                   : metrics::seg_precision_recall(rec[i], truth[i]);
        ev.rows[i] = {std::to_string(tr.id), fmt(prec), fmt(recall), std::to_string(r.points.size()),
                      std::to_string(tr.points.size()), r.times_monotonic ? "1" : "0"};
      });
      const auto pr = metrics::mean_precision_recall(rec, truth);
      auto ratio = [](const std::vector<double>& s, const std::vector<std::size_t>& c) {
        const double a = std::accumulate(s.begin(), s.end(), 0.0);
        const double b = static_cast<double>(std::accumulate(c.begin(), c.end(), std::size_t{0}));
        return b > 0.0 ? a / b : 0.0;
      };
      ev.csv_header = {"traj_id", "precision", "recall", "recovered_points", "dense_points", "times_monotonic"};
      ev.report.values = {{"precision", pr.precision},
                          {"recall", pr.recall},
                          {"mae_coor_m", ratio(coor_sum, coor_n)},
                          {"mae_road_m", ratio(road_sum, road_n)},
                          {"mae_time_s", ratio(time_sum, aligned)},
                          {"excluded", static_cast<double>(pr.excluded)}};
      break;
    }
    case TaskKind::Prediction: {
      std::vector<double> coor(n, 0.0), road(n, 0.0), dt(n, 0.0);
      std::vector<char> hit(n, 0), ok(n, 0);
      parallel_for(n, workers, [&](std::size_t i) {
        const auto& tr = corpus.trajectories[i];
        const auto& mt = corpus.matched[i];
        const std::size_t hist = spec.history_len > 0 ? std::min(spec.history_len, tr.points.size() - 1)
                                                      : tr.points.size() - 1;
        const auto future = predict(model, network, tr, mt, hist, spec.max_block_len);
        if (future.empty()) fail("prediction produced no tuple for trajectory " + std::to_string(tr.id));
        const auto& dest = future.back();
        const auto& truth_p = tr.points.back();
        const auto truth_r = mt.points.back().position();
        coor[i] = metrics::haversine(*dest.coord, truth_p.coord());
        road[i] = network.road_distance(*dest.road, truth_r);
        dt[i] = std::abs(*dest.t - truth_p.t);
        hit[i] = dest.road->segment == truth_r.segment ? 1 : 0;
        ok[i] = 1;
        ev.rows[i] = {std::to_string(tr.id), std::to_string(future.size()), std::to_string(dest.road->segment),
                      std::to_string(truth_r.segment), fmt(coor[i]), fmt(dt[i])};
      });
      const double nn = static_cast<double>(n);
      ev.csv_header = {"traj_id", "generated", "pred_segment", "truth_segment", "coor_err_m", "time_err_s"};
      ev.report.values = {
          {"mae_coor_m", std::accumulate(coor.begin(), coor.end(), 0.0) / nn},
          {"mae_road_m", std::accumulate(road.begin(), road.end(), 0.0) / nn},
          {"mae_time_s", std::accumulate(dt.begin(), dt.end(), 0.0) / nn},
          {"dest_segment_acc_pct", 100.0 * std::accumulate(hit.begin(), hit.end(), 0.0) / nn}};
      break;
    }
    case TaskKind::SimilarSearch: {
      std::vector<std::vector<float>> cand(n), query(n);
      std::vector<TrajectoryId> ids(n);
      parallel_for(n, workers, [&](std::size_t i) {
        const auto& tr = corpus.trajectories[i];
        ids[i] = tr.id;
        cand[i] = embed_sparse(model, network, trajdata::resample(tr, corpus.eta, spec.input_mu), corpus.eta);
        query[i] = embed_dense(model, network, tr, corpus.matched[i]);
      });
      std::vector<std::vector<TrajectoryId>> rankings(n);
      parallel_for(n, workers, [&](std::size_t i) {
        rankings[i] = rank_candidates(query[i], cand, ids);
        const auto pos = std::find(rankings[i].begin(), rankings[i].end(), ids[i]) - rankings[i].begin();
        ev.rows[i] = {std::to_string(ids[i]), std::to_string(pos + 1), std::to_string(rankings[i].front())};
      });
      const auto rk = metrics::rank_metrics(rankings, ids);
      ev.csv_header = {"traj_id", "rank", "top_candidate"};
      ev.report.values = {{"mean_rank", rk.mean_rank}, {"top1_acc_pct", rk.top1_acc_pct}};
      break;
    }
  }
  ev.report.validate();
  return ev;
}

void write_evaluation_csv(const Evaluation& evaluation, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail("cannot write " + path.string());
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << '\n';
  };
  line(evaluation.csv_header);
  for (const auto& r : evaluation.rows) line(r);
}

double validation_metric(const Evaluation& evaluation, TaskKind kind) {
  const auto& v = evaluation.report.values;
  switch (kind) {
    case TaskKind::OdTte: return v.at("mape_pct");
    case TaskKind::Recovery: return 1.0 - 0.5 * (v.at("precision") + v.at("recall"));
    case TaskKind::Prediction: return 1.0 - v.at("dest_segment_acc_pct") / 100.0;
    case TaskKind::SimilarSearch: return v.at("mean_rank");
  }
  return 0.0;
}

double task_validation_loss(const model::Model<float>& model, const roadnet::RoadNetwork& network,
                            const trajdata::Corpus& corpus, const TaskSpec& spec, std::uint64_t seed) {
  if (corpus.size() == 0) fail("validation corpus is empty");
  std::mt19937_64 rng(seed ^ kValidationStream);
  auto& m = const_cast<model::Model<float>&>(model);
  double total = 0.0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto plan = training_plan(corpus.trajectories[i], corpus.matched[i], corpus.eta, spec, network,
                                    delta_of(model), rng);
    total += plans_loss(m, {plan}, false);
  }
  return total / static_cast<double>(corpus.size());
}

FinetuneHistory finetune(model::Model<float>& model, const roadnet::RoadNetwork& network,
                         const trajdata::Corpus& train, const trajdata::Corpus& valid, const TaskSpec& spec,
                         const FinetuneConfig& config) {
  if (spec.kind == TaskKind::SimilarSearch) fail("similar search is zero-shot only and cannot be fine-tuned");
  if (train.size() == 0) fail("fine-tuning corpus is empty");
  if (config.batch_size == 0) fail("batch size must be positive");
  spec.validate(train.eta);
  std::mt19937_64 rng(config.seed);
  nn::AdamConfig adam;
  adam.lr = config.lr;

  trajdata::Corpus metric_set;
  metric_set.eta = valid.eta;
  for (std::size_t i = 0; i < std::min(config.metric_samples, valid.size()); ++i) {
    metric_set.trajectories.push_back(valid.trajectories[i]);
    metric_set.matched.push_back(valid.matched[i]);
  }

  FinetuneHistory history;
  std::vector<nn::Mat<float>> best;
  double best_metric = 0.0;
  int since_best = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    FinetuneEpoch e;
    e.epoch = epoch;
    for (std::size_t from = 0; from < order.size(); from += config.batch_size) {
      const std::size_t to = std::min(order.size(), from + config.batch_size);
      std::vector<SequencePlan> plans;
      for (std::size_t k = from; k < to; ++k)
        plans.push_back(training_plan(train.trajectories[order[k]], train.matched[order[k]], train.eta, spec, network,
                                      delta_of(model), rng));
      e.train_loss += plans_loss(model, plans, true);
      nn::adam_step(model.params(), adam);
    }
    e.train_loss /= static_cast<double>(train.size());
    e.valid_loss = valid.size() > 0 ? task_validation_loss(model, network, valid, spec, config.seed) : e.train_loss;
    e.valid_metric = std::numeric_limits<double>::quiet_NaN();
    history.epochs.push_back(e);
    if (!config.early_stop || metric_set.size() == 0) continue;
    e.valid_metric = validation_metric(evaluate(model, network, metric_set, spec, config.workers), spec.kind);
    history.epochs.back().valid_metric = e.valid_metric;
    if (best.empty() || e.valid_metric < best_metric) {
      best_metric = e.valid_metric;
      history.best_epoch = epoch;
      best.clear();
      for (const auto& p : model.params().all()) best.push_back(p.value);
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  if (!best.empty())
    for (std::size_t i = 0; i < best.size(); ++i) model.params()[i].value = best[i];
  else
    history.best_epoch = static_cast<int>(history.epochs.size());
  return history;
}

}  // namespace uvtm::tasks
