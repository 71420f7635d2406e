#include "uvtm/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "uvtm/csv.hpp"

namespace uvtm::pretrain {

using nn::Graph;
using nn::Var;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error("pretrain", msg); }

constexpr std::uint64_t kValidationStream = 0x5eedf00dULL;

}  // namespace

void PretrainConfig::validate(double eta) const {
  if (!(tau > 0.0)) fail("temperature must be positive");
  if (!(phi >= 0.0 && phi < 1.0)) fail("removal probability must lie in [0,1)");
  if (mu_choices.empty()) fail("at least one resampling interval is required");
  if (batch_size == 0) fail("batch size must be positive");
  for (double mu : mu_choices) {
    const double ratio = mu / eta;
    if (!(eta > 0.0) || ratio < 1.0 || std::abs(ratio - std::round(ratio)) > 1e-9 * ratio)
      fail("mu=" + csv::format(mu) + " is not a multiple of eta=" + csv::format(eta));
  }
}

PretrainExample make_pretrain_example(const Trajectory& dense, const MatchedTrajectory& matched, double eta,
                                      const PretrainConfig& config, const roadnet::RoadNetwork& network,
                                      double delta_m, std::mt19937_64& rng) {
  if (config.mu_choices.empty()) fail("at least one resampling interval is required");
  std::uniform_int_distribution<std::size_t> pick(0, config.mu_choices.size() - 1);
  PretrainExample ex;
  ex.mu = config.mu_choices[pick(rng)];
  ex.sparse = trajdata::drop_features(trajdata::resample(dense, eta, ex.mu), config.phi, rng);
  ex.plan = tokenizer::build_pretrain_plan(dense, matched, ex.sparse, true, rng, network, delta_m, true);
  ex.dense_plan = tokenizer::build_dense_plan(dense, matched, network, delta_m, true);
  return ex;
}

template <typename T>
Var info_nce(Graph<T>& g, Var dense, Var sparse, T tau) {
  if (!(tau > T(0))) fail("temperature must be positive");
  const auto n = g.value(dense).rows();
  if (g.value(sparse).rows() != n) fail("dense and sparse embeddings differ in count");
  Var sim;
  try {
    sim = nn::linear(g, nn::normalize_rows(g, dense), nn::normalize_rows(g, sparse));
  } catch (const Error& e) {
    fail(std::string("zero-norm embedding (") + e.what() + ")");
  }
  std::vector<int> diag(static_cast<std::size_t>(n));
  std::iota(diag.begin(), diag.end(), 0);
  return nn::cross_entropy(g, nn::scale(g, sim, T(1) / tau), diag);
}

std::vector<double> info_nce(const nn::Mat<double>& dense, const nn::Mat<double>& sparse, double tau) {
  Graph<double> g(false);
  const Var l = info_nce(g, g.constant(dense), g.constant(sparse), tau);
  const auto& v = g.value(l);
  return std::vector<double>(v.data(), v.data() + v.size());
}

template <typename T>
BatchResult batch_loss(model::Model<T>& model, const std::vector<PretrainExample>& batch, bool contrastive,
                       double tau, bool backward) {
  if (batch.empty()) fail("empty batch");
  Graph<T> g(backward);
  BatchResult out;
  std::vector<nn::RowRef> sparse_rows, dense_rows;
  Var total;
  const int d = model.config().d;
  for (const auto& ex : batch) {
    const auto seq = tokenizer::assign_positions(ex.plan);
    const auto f = model.forward(g, seq);
    const Var l = model.loss(g, f, seq);
    out.recon += static_cast<double>(g.value(l)(0, 0));
    out.tuples += f.generated_rows.size();
    total = total ? nn::add(g, total, l) : l;
    if (contrastive) {
      sparse_rows.push_back({f.o, 0});
      const auto dense_seq = tokenizer::assign_positions(ex.dense_plan);
      const auto fd = model.forward(g, dense_seq);
      dense_rows.push_back({fd.o, 0});
    }
  }
  if (contrastive) {
    const Var cl = info_nce(g, nn::stack_rows(g, dense_rows, d), nn::stack_rows(g, sparse_rows, d), static_cast<T>(tau));
    const Var cl_sum = nn::sum(g, cl);
    out.contrastive = static_cast<double>(g.value(cl_sum)(0, 0));
    total = nn::add(g, total, cl_sum);
  }
  out.loss = static_cast<double>(g.value(total)(0, 0));
  const double n = static_cast<double>(batch.size());
  out.recon /= n;
  out.contrastive /= n;
  if (backward) {
    model.params().zero_grad();
    if (std::isfinite(out.loss)) g.backward(total);
  }
  return out;
}

EpochStats pretrain_epoch(model::Model<float>& model, const trajdata::Corpus& corpus,
                          const roadnet::RoadNetwork& network, const PretrainConfig& config, std::mt19937_64& rng) {
  if (corpus.size() == 0) fail("training corpus is empty");
  config.validate(corpus.eta);
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  nn::AdamConfig adam;
  adam.lr = config.lr;
  EpochStats stats;
  std::size_t batch_id = 0;
  for (std::size_t from = 0; from < order.size(); from += config.batch_size, ++batch_id) {
    const std::size_t to = std::min(order.size(), from + config.batch_size);
    std::vector<PretrainExample> batch;
    batch.reserve(to - from);
    for (std::size_t k = from; k < to; ++k) {
      const std::size_t i = order[k];
      batch.push_back(make_pretrain_example(corpus.trajectories[i], corpus.matched[i], corpus.eta, config, network,
                                            model.config().delta_m, rng));
    }
    const BatchResult r = batch_loss(model, batch, config.contrastive, config.tau, true);
    if (!std::isfinite(r.loss)) fail("non-finite loss in batch " + std::to_string(batch_id));
    nn::adam_step(model.params(), adam);
    const double n = static_cast<double>(batch.size());
    stats.recon_loss += r.recon * n;
    stats.cl_loss += r.contrastive * n;
    stats.tuples += r.tuples;
  }
  stats.recon_loss /= static_cast<double>(corpus.size());
  stats.cl_loss /= static_cast<double>(corpus.size());
  stats.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return stats;
}

double validation_loss(const model::Model<float>& model, const trajdata::Corpus& corpus,
                       const roadnet::RoadNetwork& network, const PretrainConfig& config) {
  if (corpus.size() == 0) fail("validation corpus is empty");
  std::mt19937_64 rng(config.seed ^ kValidationStream);
  auto& m = const_cast<model::Model<float>&>(model);
  double total = 0.0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto ex = make_pretrain_example(corpus.trajectories[i], corpus.matched[i], corpus.eta, config, network,
                                          model.config().delta_m, rng);
    total += batch_loss(m, {ex}, false, config.tau, false).recon;
  }
  return total / static_cast<double>(corpus.size());
}

PretrainHistory pretrain(model::Model<float>& model, const trajdata::Corpus& train, const trajdata::Corpus& valid,
                         const roadnet::RoadNetwork& network, const PretrainConfig& config,
                         const EpochCallback& on_epoch) {
  config.validate(train.eta);
  std::mt19937_64 rng(config.seed);
  PretrainHistory history;
  std::vector<nn::Mat<float>> best;
  int since_best = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochStats s = pretrain_epoch(model, train, network, config, rng);
    s.epoch = epoch;
    s.valid_loss = valid.size() > 0 ? validation_loss(model, valid, network, config) : s.recon_loss;
    history.epochs.push_back(s);
    if (on_epoch) on_epoch(s);
    if (best.empty() || s.valid_loss < history.best_valid_loss) {
      history.best_epoch = epoch;
      history.best_valid_loss = s.valid_loss;
      best.clear();
      for (const auto& p : model.params().all()) best.push_back(p.value);
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < best.size(); ++i) model.params()[i].value = best[i];
  return history;
}

void write_training_log(const PretrainHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail("cannot write " + path.string());
  out << "epoch,recon_loss,cl_loss,valid_loss,wall_seconds\n";
  for (const auto& e : history.epochs)
    out << e.epoch << ',' << csv::format(e.recon_loss) << ',' << csv::format(e.cl_loss) << ','
        << csv::format(e.valid_loss) << ',' << csv::format(e.wall_seconds) << '\n';
}

template Var info_nce<float>(Graph<float>&, Var, Var, float);
template Var info_nce<double>(Graph<double>&, Var, Var, double);
template BatchResult batch_loss<float>(model::Model<float>&, const std::vector<PretrainExample>&, bool, double, bool);
template BatchResult batch_loss<double>(model::Model<double>&, const std::vector<PretrainExample>&, bool, double,
                                        bool);

}  // namespace uvtm::pretrain
