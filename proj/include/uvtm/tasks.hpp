#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "uvtm/metrics.hpp"
#include "uvtm/model.hpp"
#include "uvtm/trajdata.hpp"

namespace uvtm::tasks {

enum class TaskKind { OdTte, Recovery, Prediction, SimilarSearch };

TaskKind parse_task_kind(const std::string& name);  // tte | recover | predict | search
std::string task_name(TaskKind kind);

struct TaskSpec {
  TaskKind kind = TaskKind::Recovery;
  double input_mu = 60.0;          // recovery and search: interval of the sparse input
  std::size_t history_len = 0;     // prediction at evaluation; 0 means all but the last point
  std::size_t max_block_len = 64;

  /// Throws when input_mu is not a multiple of eta.
  void validate(double eta) const;
};

// ---- input arrangements -------------------------------------------------

/// Origin (coordinate, departure, [m]) and destination (coordinate, [m], [m]) with
/// one block for the destination. With `target`, the block holds the arrival
/// tuple (time relative to departure) and the end tuple.
tokenizer::SequencePlan od_tte_plan(LngLat origin, LngLat destination, double departure,
                                    const roadnet::RoadNetwork& network, double delta_m,
                                    const std::optional<tokenizer::Tuple>& target = std::nullopt);

/// Kept points with road masked, one fully masked tuple wherever consecutive kept
/// points are more than eta apart, and one block per input in original order.
/// Blocks carry no targets.
tokenizer::SequencePlan sparse_input_plan(const trajdata::SparseTrajectory& sparse, double eta,
                                          const roadnet::RoadNetwork& network, double delta_m,
                                          bool with_cls = false);

/// First n dense points as complete tuples, then one masked tuple whose block is
/// the rest of the trajectory (targets included when the full trajectory is known).
tokenizer::SequencePlan prediction_plan(const Trajectory& dense, const MatchedTrajectory& matched, std::size_t n,
                                        const roadnet::RoadNetwork& network, double delta_m, bool with_targets);

/// Teacher-forcing plan for fine-tuning on one trajectory.
tokenizer::SequencePlan training_plan(const Trajectory& dense, const MatchedTrajectory& matched, double eta,
                                      const TaskSpec& spec, const roadnet::RoadNetwork& network, double delta_m,
                                      std::mt19937_64& rng);

// ---- adapters -------------------------------------------------------------

/// Predicted travel time in seconds, clamped at zero.
double od_tte(const model::Model<float>& model, const roadnet::RoadNetwork& network, LngLat origin,
              LngLat destination, double departure);

struct Recovery {
  std::vector<tokenizer::DecodedPoint> points;  // in anchor order
  bool times_monotonic = true;
};

Recovery recover(const model::Model<float>& model, const roadnet::RoadNetwork& network,
                 const trajdata::SparseTrajectory& sparse, double eta, std::size_t max_block_len = 64);

/// Generated future tuples after the first n points (end tuple dropped).
std::vector<tokenizer::DecodedPoint> predict(const model::Model<float>& model, const roadnet::RoadNetwork& network,
                                             const Trajectory& dense, const MatchedTrajectory& matched,
                                             std::size_t n, std::size_t max_block_len = 64);

std::vector<float> embed_dense(const model::Model<float>& model, const roadnet::RoadNetwork& network,
                               const Trajectory& dense, const MatchedTrajectory& matched);
std::vector<float> embed_sparse(const model::Model<float>& model, const roadnet::RoadNetwork& network,
                                const trajdata::SparseTrajectory& sparse, double eta);

/// Candidate ids by descending cosine similarity to the query; ties by lower id.
std::vector<TrajectoryId> rank_candidates(const std::vector<float>& query,
                                          const std::vector<std::vector<float>>& candidates,
                                          const std::vector<TrajectoryId>& ids);

std::vector<TrajectoryId> similar_search(const model::Model<float>& model, const roadnet::RoadNetwork& network,
                                         const Trajectory& query, const MatchedTrajectory& query_matched,
                                         const std::vector<trajdata::SparseTrajectory>& candidates, double eta);

// ---- evaluation -------------------------------------------------------------

struct Evaluation {
  metrics::MetricReport report;
  std::vector<std::string> csv_header;
  std::vector<std::vector<std::string>> rows;  // one per example
};

/// Runs the adapter of `spec.kind` over the corpus and scores it against the
/// corpus itself. `workers` threads share the frozen model.
Evaluation evaluate(const model::Model<float>& model, const roadnet::RoadNetwork& network,
                    const trajdata::Corpus& corpus, const TaskSpec& spec, std::size_t workers = 1);

void write_evaluation_csv(const Evaluation& evaluation, const std::filesystem::path& path);

/// Lower is better: MAPE for travel time, 1 - mean(precision, recall) for
/// recovery, 1 - destination segment accuracy for prediction.
double validation_metric(const Evaluation& evaluation, TaskKind kind);

// ---- fine-tuning ------------------------------------------------------------

struct FinetuneConfig {
  int epochs = 20;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  int patience = 5;
  bool early_stop = true;              // on the validation task metric
  std::size_t metric_samples = 200;    // validation trajectories scored per epoch
  std::size_t workers = 1;
  std::uint64_t seed = 0;
};

struct FinetuneEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double valid_metric = 0.0;  // NaN when early stopping is off
};

struct FinetuneHistory {
  std::vector<FinetuneEpoch> epochs;
  int best_epoch = 0;
};

/// Mean teacher-forced loss on a corpus; plans drawn from a fixed seed.
double task_validation_loss(const model::Model<float>& model, const roadnet::RoadNetwork& network,
                            const trajdata::Corpus& corpus, const TaskSpec& spec, std::uint64_t seed);

FinetuneHistory finetune(model::Model<float>& model, const roadnet::RoadNetwork& network,
                         const trajdata::Corpus& train, const trajdata::Corpus& valid, const TaskSpec& spec,
                         const FinetuneConfig& config);

}  // namespace uvtm::tasks
