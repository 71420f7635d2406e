#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <vector>

#include "uvtm/model.hpp"
#include "uvtm/nn/optim.hpp"
#include "uvtm/trajdata.hpp"

namespace uvtm::pretrain {

/// Batch size presets.
inline constexpr std::size_t kBatchSizeTable = 128;
inline constexpr std::size_t kBatchSizeText = 256;

struct PretrainConfig {
  std::vector<double> mu_choices{60.0, 120.0, 240.0};
  double phi = 0.2;
  double tau = 0.1;
  std::size_t batch_size = kBatchSizeTable;
  double lr = 1e-3;
  int epochs = 50;
  int patience = 5;
  bool contrastive = true;
  std::uint64_t seed = 0;

  /// Throws when tau <= 0, phi outside [0,1), or some mu is not a multiple of eta.
  void validate(double eta) const;
};

struct PretrainExample {
  double mu = 0.0;
  trajdata::SparseTrajectory sparse;
  tokenizer::SequencePlan plan;        // class token + sparse inputs, shuffled blocks
  tokenizer::SequencePlan dense_plan;  // class token + complete dense tuples
};

PretrainExample make_pretrain_example(const Trajectory& dense, const MatchedTrajectory& matched, double eta,
                                      const PretrainConfig& config, const roadnet::RoadNetwork& network,
                                      double delta_m, std::mt19937_64& rng);

/// Per-trajectory contrastive losses (n x 1): row i of `dense` is the positive of
/// row i of `sparse`; every row of `sparse` enters the denominator.
template <typename T>
nn::Var info_nce(nn::Graph<T>& g, nn::Var dense, nn::Var sparse, T tau);

/// Same quantity on plain matrices.
std::vector<double> info_nce(const nn::Mat<double>& dense, const nn::Mat<double>& sparse, double tau);

struct BatchResult {
  double loss = 0.0;        // sum over trajectories of mean(L_i) + L_CL
  double recon = 0.0;       // mean over trajectories of mean(L_i)
  double contrastive = 0.0; // mean over trajectories of L_CL
  std::size_t tuples = 0;   // supervised generated positions
};

/// Builds one graph for the batch, backpropagates the batch loss into the
/// model's gradients (zeroed first). Does not step the optimizer.
template <typename T>
BatchResult batch_loss(model::Model<T>& model, const std::vector<PretrainExample>& batch, bool contrastive,
                       double tau, bool backward);

struct EpochStats {
  int epoch = 0;
  double recon_loss = 0.0;
  double cl_loss = 0.0;
  double valid_loss = 0.0;
  std::size_t tuples = 0;
  double wall_seconds = 0.0;
};

/// One pass over the corpus in shuffled batches with one Adam step per batch.
EpochStats pretrain_epoch(model::Model<float>& model, const trajdata::Corpus& corpus,
                          const roadnet::RoadNetwork& network, const PretrainConfig& config, std::mt19937_64& rng);

/// Mean reconstruction loss on a corpus with examples drawn from a fixed seed.
double validation_loss(const model::Model<float>& model, const trajdata::Corpus& corpus,
                       const roadnet::RoadNetwork& network, const PretrainConfig& config);

struct PretrainHistory {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;
  double best_valid_loss = 0.0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Trains until `epochs` or until validation loss has not improved for
/// `patience` epochs; the model ends with its best-validation parameters.
PretrainHistory pretrain(model::Model<float>& model, const trajdata::Corpus& train, const trajdata::Corpus& valid,
                         const roadnet::RoadNetwork& network, const PretrainConfig& config,
                         const EpochCallback& on_epoch = {});

/// CSV with header epoch,recon_loss,cl_loss,valid_loss,wall_seconds.
void write_training_log(const PretrainHistory& history, const std::filesystem::path& path);

}  // namespace uvtm::pretrain
