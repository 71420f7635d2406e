#include "uvtm/cli.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "uvtm/csv.hpp"
#include "uvtm/error.hpp"
#include "uvtm/mapmatch.hpp"
#include "uvtm/nn/gradcheck.hpp"
#include "uvtm/pretrain.hpp"
#include "uvtm/tasks.hpp"

#ifndef UVTM_VERSION
#define UVTM_VERSION "unknown"
#endif

namespace uvtm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error("cli", msg); }

constexpr double kGradTolerance = 1e-4;
constexpr double kOriginLng = 104.06;
constexpr double kOriginLat = 30.66;

// Reads a flat JSON object as option values of the selected subcommand. The
// provenance block of run.json is skipped.
class JsonConfig : public CLI::Config {
 public:
  explicit JsonConfig(const CLI::App* root) : root_(root) {}

  std::string to_config(const CLI::App* app, bool, bool, std::string) const override {
    json j = json::object();
    for (const CLI::Option* opt : app->get_options())
      if (opt->count() > 0 && !opt->get_lnames().empty()) j[opt->get_lnames().front()] = opt->results();
    return j.dump(2);
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j;
    try {
      input >> j;
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("config must be a JSON object");
    const auto selected = root_->get_subcommands();
    std::vector<CLI::ConfigItem> items;
    for (const auto& [key, value] : j.items()) {
      if (key == "provenance") continue;
      CLI::ConfigItem item;
      item.name = key;
      if (!selected.empty()) item.parents = {selected.front()->get_name()};
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(key, v));
      } else {
        item.inputs.push_back(scalar(key, value));
      }
      items.push_back(std::move(item));
    }
    return items;
  }

 private:
  static std::string scalar(const std::string& key, const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number()) return v.dump();
    throw CLI::ConversionError("config value for '" + key + "' must be a scalar or a list of scalars");
  }

  const CLI::App* root_;
};

// Options bound to variables, remembered so the resolved values can be written out.
class Options {
 public:
  explicit Options(CLI::App* app) : app_(app) {}

  template <typename T>
  CLI::Option* add(const std::string& name, T& var, const std::string& help) {
    dump_.emplace_back(name, [&var] { return json(var); });
    return app_->add_option("--" + name, var, help)->capture_default_str();
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& help) {
    dump_.emplace_back(name, [&var] { return json(var); });
    return app_->add_flag("--" + name + ",!--no-" + name, var, help);
  }

  bool given(const std::string& name) const { return app_->get_option("--" + name)->count() > 0; }

  json resolved() const {
    json j = json::object();
    for (const auto& [name, fn] : dump_) j[name] = fn();
    return j;
  }

  CLI::App* app() const { return app_; }

 private:
  CLI::App* app_;
  std::vector<std::pair<std::string, std::function<json()>>> dump_;
};

struct Common {
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::string out;
};

void add_common(Options& o, Common& c, const std::string& name) {
  c.out = "runs/" + name;
  o.add("seed", c.seed, "Random seed");
  o.add("workers", c.workers, "Worker threads")->check(CLI::PositiveNumber);
  o.add("out", c.out, "Run directory for all outputs");
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

// FNV-1a over the canonical dump of the resolved options.
std::string config_hash(const json& options) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : options.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return hex64(h);
}

void write_run_json(const std::string& command, const Options& o, const fs::path& dir) {
  fs::create_directories(dir);
  json j = o.resolved();
  const std::string hash = config_hash(j);
  j["provenance"] = {{"command", command},
                     {"config_hash", hash},
                     {"version", UVTM_VERSION},
                     {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                   std::to_string(EIGEN_MINOR_VERSION)}};
  std::ofstream out(dir / "run.json");
  if (!out) fail("cannot write " + (dir / "run.json").string());
  out << j.dump(2) << '\n';
}

void require_path(const std::string& what, const std::string& path) {
  if (!fs::exists(path)) fail("missing " + what + " " + path);
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---- data inputs ----------------------------------------------------------

struct DataPaths {
  std::string network = "runs/synth/network";
  std::string data = "runs/synth/trajectories.csv";
  std::string matched = "runs/synth/matched.csv";
};

void add_data(Options& o, DataPaths& p, bool with_matched = true) {
  o.add("network", p.network, "Road network directory (nodes.csv, edges.csv)");
  o.add("data", p.data, "Trajectory CSV");
  if (with_matched) o.add("matched", p.matched, "Map-matched CSV");
}

struct Loaded {
  roadnet::RoadNetwork network;
  trajdata::Dataset dataset;
  std::vector<MatchedTrajectory> matched;
};

Loaded load_data(const DataPaths& p, bool with_matched = true) {
  require_path("road network", p.network);
  require_path("trajectory data", p.data);
  if (with_matched) require_path("matched data", p.matched);
  Loaded l;
  l.network = roadnet::load_network(p.network);
  l.dataset = trajdata::ingest_csv(p.data);
  if (with_matched) l.matched = mapmatch::read_matched_csv(p.matched);
  return l;
}

trajdata::Dataset pick_split(const trajdata::Dataset& ds, const std::string& which) {
  if (which == "all") return ds;
  const auto split = trajdata::chronological_split(ds);
  if (which == "train") return split.train;
  if (which == "valid") return split.valid;
  if (which == "test") return split.test;
  fail("unknown split '" + which + "' (expected train, valid, test or all)");
}

struct TaskOptions {
  std::string task;
  std::string task_spec;
  double mu = 60.0;
  std::size_t history = 0;
  std::size_t max_block_len = 64;
};

void add_task(Options& o, TaskOptions& t, bool need_kind) {
  auto* kind = o.add("task", t.task, "Task: tte, recover, predict or search");
  if (need_kind) kind->required();
  o.add("task-spec", t.task_spec, "JSON task specification (input_mu, history_len, max_block_len)");
  o.add("mu", t.mu, "Sparse input interval in seconds");
  o.add("history", t.history, "Prediction history length (0 = all but the last point)");
  o.add("max-block-len", t.max_block_len, "Generation cap per block");
}

// Values from the task-spec file fill options not set by flag or config.
tasks::TaskSpec resolve_task(const Options& o, TaskOptions& t) {
  if (!t.task_spec.empty()) {
    require_path("task spec", t.task_spec);
    std::ifstream in(t.task_spec);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      fail("task spec " + t.task_spec + " is not valid JSON: " + e.what());
    }
    if (j.contains("input_mu") && !o.given("mu")) t.mu = j["input_mu"].get<double>();
    if (j.contains("history_len") && !o.given("history")) t.history = j["history_len"].get<std::size_t>();
    if (j.contains("max_block_len") && !o.given("max-block-len")) t.max_block_len = j["max_block_len"].get<std::size_t>();
    if (j.contains("kind") && t.task.empty()) t.task = j["kind"].get<std::string>();
  }
  tasks::TaskSpec spec;
  spec.kind = tasks::parse_task_kind(t.task);
  spec.input_mu = t.mu;
  spec.history_len = t.history;
  spec.max_block_len = t.max_block_len;
  return spec;
}

// ---- subcommands ------------------------------------------------------------

struct Synth {
  int rows = 6, cols = 6;
  double spacing = 100.0;
  std::size_t n = 500;
  double eta = 15.0;
  double noise = 0.0;
  double speed_min = 4.0, speed_max = 8.0;

  void add(Options& o) {
    o.add("rows", rows, "Grid rows")->check(CLI::PositiveNumber);
    o.add("cols", cols, "Grid columns")->check(CLI::PositiveNumber);
    o.add("spacing", spacing, "Grid spacing in metres");
    o.add("n", n, "Number of trajectories");
    o.add("eta", eta, "Sampling interval in seconds");
    o.add("noise", noise, "Gaussian GPS noise in metres");
    o.add("speed-min", speed_min, "Lowest segment speed (m/s)");
    o.add("speed-max", speed_max, "Highest segment speed (m/s)");
  }

  void run(const Common& c, std::ostream& out) const {
    const fs::path dir = c.out;
    const auto net = roadnet::synth_grid_network(rows, cols, spacing, kOriginLng, kOriginLat, c.seed);
    trajdata::SynthConfig cfg;
    cfg.eta = eta;
    cfg.noise_sigma_m = noise;
    cfg.seed = c.seed;
    cfg.speed = {speed_min, speed_max};
    const auto data = trajdata::synth_trajectories(net, n, cfg);
    roadnet::save_network(net, dir / "network");
    trajdata::write_csv(data.dataset, dir / "trajectories.csv");
    mapmatch::write_matched_csv(data.ground_truth, dir / "matched.csv");
    trajdata::write_split_manifest(trajdata::chronological_split(data.dataset), dir / "split");
    out << "wrote " << data.dataset.trajectories.size() << " trajectories on " << net.num_segments()
        << " segments to " << dir.string() << '\n';
  }
};

struct Match {
  DataPaths paths;
  mapmatch::MatchParams params;

  void add(Options& o) {
    add_data(o, paths, false);
    o.add("radius", params.candidate_radius_m, "Candidate search radius in metres");
    o.add("sigma", params.emission_sigma_m, "Emission noise in metres");
    o.add("beta", params.transition_beta, "Transition scale");
    o.add("max-candidates", params.max_candidates, "Candidates kept per point");
  }

  void run(const Common& c, std::ostream& out) const {
    const auto l = load_data(paths, false);
    const auto& trs = l.dataset.trajectories;
    std::vector<MatchedTrajectory> matched(trs.size());
    parallel_for(trs.size(), c.workers, [&](std::size_t i) { matched[i] = mapmatch::hmm_match(l.network, trs[i], params); });
    mapmatch::write_matched_csv(matched, fs::path(c.out) / "matched.csv");
    out << "matched " << matched.size() << " trajectories\n";
  }
};

struct ModelOptions {
  int d = 128, heads = 8, layers = 2;
  double delta = roadnet::kDefaultDeltaM;

  void add(Options& o) {
    o.add("d", d, "Embedding width");
    o.add("heads", heads, "Attention heads");
    o.add("layers", layers, "Encoder layers");
    o.add("delta", delta, "Neighbourhood radius in metres");
  }
};

struct Pretrain {
  DataPaths paths;
  ModelOptions model;
  pretrain::PretrainConfig config;

  void add(Options& o) {
    add_data(o, paths);
    model.add(o);
    o.add("mu", config.mu_choices, "Resampling intervals in seconds");
    o.add("phi", config.phi, "Feature removal probability");
    o.add("tau", config.tau, "Contrastive temperature");
    o.add("batch", config.batch_size, "Batch size");
    o.add("lr", config.lr, "Learning rate");
    o.add("epochs", config.epochs, "Maximum epochs");
    o.add("patience", config.patience, "Early stopping patience in epochs");
    o.flag("contrastive", config.contrastive, "Use the contrastive term");
  }

  void run(const Common& c, std::ostream& out) {
    const auto l = load_data(paths);
    const auto split = trajdata::chronological_split(l.dataset);
    const auto train = trajdata::make_corpus(split.train, l.matched);
    const auto valid = trajdata::make_corpus(split.valid, l.matched);
    model::ModelConfig mc;
    mc.d = model.d;
    mc.heads = model.heads;
    mc.layers = model.layers;
    mc.delta_m = model.delta;
    mc.num_segments = static_cast<int>(l.network.num_segments());
    mc.normalizer.bbox = l.dataset.bbox;
    mc.normalizer.time_scale = l.dataset.time_scale;
    mc.seed = c.seed;
    config.seed = c.seed;
    model::Model<float> m(mc);
    const auto history = pretrain::pretrain(m, train, valid, l.network, config, [&](const pretrain::EpochStats& e) {
      out << "epoch " << e.epoch << " recon " << e.recon_loss << " cl " << e.cl_loss << " valid " << e.valid_loss
          << '\n';
    });
    const fs::path dir = c.out;
    model::save_checkpoint(m, dir / "checkpoint");
    pretrain::write_training_log(history, dir / "training_log.csv");
    out << "best epoch " << history.best_epoch << " valid " << history.best_valid_loss << '\n';
  }
};

struct Finetune {
  DataPaths paths;
  std::string checkpoint = "runs/pretrain/checkpoint";
  TaskOptions task;
  tasks::FinetuneConfig config;

  void add(Options& o) {
    o.add("checkpoint", checkpoint, "Checkpoint directory to start from");
    add_data(o, paths);
    add_task(o, task, false);
    o.add("epochs", config.epochs, "Maximum epochs");
    o.add("lr", config.lr, "Learning rate");
    o.add("batch", config.batch_size, "Batch size");
    o.add("patience", config.patience, "Early stopping patience in epochs");
    o.add("metric-samples", config.metric_samples, "Validation trajectories scored per epoch");
    o.flag("early-stop", config.early_stop, "Stop on the validation task metric");
  }

  void run(const Options& o, const Common& c, std::ostream& out) {
    require_path("checkpoint", checkpoint);
    const auto spec = resolve_task(o, task);
    auto m = model::load_checkpoint(checkpoint);
    const auto l = load_data(paths);
    const auto split = trajdata::chronological_split(l.dataset);
    config.seed = c.seed;
    config.workers = c.workers;
    const auto history = tasks::finetune(m, l.network, trajdata::make_corpus(split.train, l.matched),
                                         trajdata::make_corpus(split.valid, l.matched), spec, config);
    const fs::path dir = c.out;
    model::save_checkpoint(m, dir / "checkpoint");
    std::ofstream log(dir / "finetune_log.csv");
    if (!log) fail("cannot write " + (dir / "finetune_log.csv").string());
    log << "epoch,train_loss,valid_loss,valid_metric\n";
    for (const auto& e : history.epochs) {
      log << e.epoch << ',' << csv::format(e.train_loss) << ',' << csv::format(e.valid_loss) << ','
          << (std::isnan(e.valid_metric) ? std::string() : csv::format(e.valid_metric)) << '\n';
      out << "epoch " << e.epoch << " train " << e.train_loss << " valid " << e.valid_loss << '\n';
    }
    out << "best epoch " << history.best_epoch << '\n';
  }
};

struct Eval {
  DataPaths paths;
  std::string checkpoint = "runs/pretrain/checkpoint";
  std::string split = "test";
  TaskOptions task;

  void add(Options& o, bool need_kind) {
    o.add("checkpoint", checkpoint, "Checkpoint directory");
    add_data(o, paths);
    o.add("split", split, "Chronological split to evaluate: train, valid, test or all");
    add_task(o, task, need_kind);
  }

  void run(const Options& o, const Common& c, std::ostream& out) {
    require_path("checkpoint", checkpoint);
    const auto spec = resolve_task(o, task);
    const auto m = model::load_checkpoint(checkpoint);
    const auto l = load_data(paths);
    const auto corpus = trajdata::make_corpus(pick_split(l.dataset, split), l.matched);
    const auto ev = tasks::evaluate(m, l.network, corpus, spec, c.workers);
    const fs::path dir = c.out;
    tasks::write_evaluation_csv(ev, dir / "results.csv");
    metrics::write_json(ev.report, dir / "metrics.json");
    out << metrics::to_json(ev.report) << '\n';
  }
};

struct Search {
  DataPaths paths;
  std::string checkpoint = "runs/pretrain/checkpoint";
  std::string split = "test";
  double mu = 60.0;
  std::size_t top_k = 10;

  void add(Options& o) {
    o.add("checkpoint", checkpoint, "Checkpoint directory");
    add_data(o, paths);
    o.add("split", split, "Chronological split used as queries and candidates");
    o.add("mu", mu, "Candidate resampling interval in seconds");
    o.add("top-k", top_k, "Candidates listed per query")->check(CLI::PositiveNumber);
  }

  void run(const Common& c, std::ostream& out) const {
    require_path("checkpoint", checkpoint);
    const auto m = model::load_checkpoint(checkpoint);
    const auto l = load_data(paths);
    const auto corpus = trajdata::make_corpus(pick_split(l.dataset, split), l.matched);
    if (corpus.size() == 0) fail("no trajectories in split " + split);
    const std::size_t n = corpus.size();
    std::vector<std::vector<float>> cand(n), query(n);
    std::vector<TrajectoryId> ids(n);
    parallel_for(n, c.workers, [&](std::size_t i) {
      const auto& tr = corpus.trajectories[i];
      ids[i] = tr.id;
      cand[i] = tasks::embed_sparse(m, l.network, trajdata::resample(tr, corpus.eta, mu), corpus.eta);
      query[i] = tasks::embed_dense(m, l.network, tr, corpus.matched[i]);
    });
    std::vector<std::vector<TrajectoryId>> rankings(n);
    parallel_for(n, c.workers, [&](std::size_t i) { rankings[i] = tasks::rank_candidates(query[i], cand, ids); });
    const fs::path dir = c.out;
    std::ofstream csv(dir / "rankings.csv");
    if (!csv) fail("cannot write " + (dir / "rankings.csv").string());
    csv << "query_id,rank,top_ids\n";
    for (std::size_t i = 0; i < n; ++i) {
      const auto pos = std::find(rankings[i].begin(), rankings[i].end(), ids[i]) - rankings[i].begin();
      csv << ids[i] << ',' << pos + 1 << ',';
      for (std::size_t k = 0; k < std::min(top_k, n); ++k) csv << (k ? ";" : "") << rankings[i][k];
      csv << '\n';
    }
    const auto rk = metrics::rank_metrics(rankings, ids);
    metrics::MetricReport report{"search", {{"mean_rank", rk.mean_rank}, {"top1_acc_pct", rk.top1_acc_pct}}, n};
    metrics::write_json(report, dir / "metrics.json");
    out << metrics::to_json(report) << '\n';
  }
};

struct Embed {
  DataPaths paths;
  std::string checkpoint = "runs/pretrain/checkpoint";
  std::string split = "all";
  double mu = 0.0;

  void add(Options& o) {
    o.add("checkpoint", checkpoint, "Checkpoint directory");
    add_data(o, paths);
    o.add("split", split, "Chronological split to embed");
    o.add("mu", mu, "Embed the sparse view at this interval (0 embeds the dense trajectory)");
  }

  void run(const Common& c, std::ostream& out) const {
    require_path("checkpoint", checkpoint);
    const auto m = model::load_checkpoint(checkpoint);
    const auto l = load_data(paths);
    const auto corpus = trajdata::make_corpus(pick_split(l.dataset, split), l.matched);
    std::vector<std::vector<float>> emb(corpus.size());
    parallel_for(corpus.size(), c.workers, [&](std::size_t i) {
      const auto& tr = corpus.trajectories[i];
      emb[i] = mu > 0.0 ? tasks::embed_sparse(m, l.network, trajdata::resample(tr, corpus.eta, mu), corpus.eta)
                        : tasks::embed_dense(m, l.network, tr, corpus.matched[i]);
    });
    const fs::path path = fs::path(c.out) / "embeddings.csv";
    std::ofstream csv(path);
    if (!csv) fail("cannot write " + path.string());
    csv << "traj_id";
    for (int k = 0; k < m.config().d; ++k) csv << ",e" << k;
    csv << '\n';
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      csv << corpus.trajectories[i].id;
      for (float v : emb[i]) csv << ',' << csv::format(v);
      csv << '\n';
    }
    out << "embedded " << corpus.size() << " trajectories\n";
  }
};

struct GradCheck {
  int rows = 3, cols = 3;
  ModelOptions model{16, 2, 2, roadnet::kDefaultDeltaM};
  double step = 1e-3;
  std::size_t coords = 200;

  void add(Options& o) {
    o.add("rows", rows, "Grid rows")->check(CLI::PositiveNumber);
    o.add("cols", cols, "Grid columns")->check(CLI::PositiveNumber);
    model.add(o);
    o.add("step", step, "Finite-difference step");
    o.add("coords", coords, "Sampled coordinates per tensor");
  }

  // Exit status 0 iff the largest relative error is within tolerance.
  int run(const Common& c, std::ostream& out) const {
    const auto net = roadnet::synth_grid_network(rows, cols, 100.0, kOriginLng, kOriginLat, c.seed);
    trajdata::SynthConfig sc;
    sc.seed = c.seed;
    sc.min_points = 3;
    const auto data = trajdata::synth_trajectories(net, 1, sc);
    Trajectory dense = data.dataset.trajectories.front();
    MatchedTrajectory matched = data.ground_truth.front();
    dense.points.resize(3);
    matched.points.resize(3);
    const double eta = data.dataset.eta;
    std::mt19937_64 rng(c.seed);
    const auto plan = tokenizer::build_pretrain_plan(dense, matched, trajdata::resample(dense, eta, 2 * eta), true, rng,
                                                     net, model.delta, false);
    const auto seq = tokenizer::assign_positions(plan);
    model::ModelConfig mc;
    mc.d = model.d;
    mc.heads = model.heads;
    mc.layers = model.layers;
    mc.delta_m = model.delta;
    mc.num_segments = static_cast<int>(net.num_segments());
    mc.normalizer.bbox = data.dataset.bbox;
    mc.seed = c.seed;
    auto m = model::Model<float>(mc).cast<double>();
    const auto report = nn::grad_check(
        [&](bool backward) {
          nn::Graph<double> g(backward);
          const auto f = m.forward(g, seq);
          const auto l = m.loss(g, f, seq);
          if (backward) g.backward(l);
          return nn::LossSample{g.value(l)(0, 0), g.pattern()};
        },
        m.params(), step, coords, c.seed);
    const bool ok = report.max_rel_error <= kGradTolerance;
    json j = {{"max_rel_error", report.max_rel_error},
              {"worst_parameter", report.worst_parameter},
              {"coordinates", report.coordinates},
              {"kink_skipped", report.kink_skipped},
              {"tolerance", kGradTolerance},
              {"pass", ok}};
    std::ofstream(fs::path(c.out) / "gradcheck.json") << j.dump(2) << '\n';
    out << "max relative error " << report.max_rel_error << " (" << report.worst_parameter << ", "
        << report.coordinates << " coordinates, " << report.kink_skipped << " skipped at kinks)\n";
    return ok ? 0 : 1;
  }
};

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Trajectory model pipeline: synthesize, match, pre-train, fine-tune and evaluate"};
  app.config_formatter(std::make_shared<JsonConfig>(&app));
  app.set_config("--config", "", "JSON file of option values for the subcommand (explicit flags win)");
  app.fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  app.set_version_flag("--version", UVTM_VERSION);

  struct Sub {
    std::string name;
    CLI::App* app;
    std::unique_ptr<Options> options;
    Common common;
  };
  std::vector<Sub> subs;
  auto make = [&](const std::string& name, const std::string& help) -> Sub& {
    Sub& s = subs.emplace_back();
    s.name = name;
    s.app = app.add_subcommand(name, help);
    s.options = std::make_unique<Options>(s.app);
    add_common(*s.options, s.common, name);
    return s;
  };
  subs.reserve(8);

  Synth synth;
  Match match;
  Pretrain pre;
  Finetune fine;
  Eval eval;
  Search search;
  Embed embed;
  GradCheck grad;
  synth.add(*make("synth", "Generate a grid network and synthetic trajectories").options);
  match.add(*make("match", "Map-match a trajectory CSV").options);
  pre.add(*make("pretrain", "Pre-train a model").options);
  fine.add(*make("finetune", "Fine-tune a checkpoint on one task").options);
  eval.add(*make("eval", "Evaluate a checkpoint on one task").options, true);
  search.add(*make("search", "Rank sparse candidates against dense queries").options);
  embed.add(*make("embed", "Write trajectory embeddings").options);
  grad.add(*make("gradcheck", "Compare analytic and numeric gradients on a fresh model").options);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << UVTM_VERSION << '\n';
    return 0;
  } catch (const CLI::FileError& e) {
    err << "error: cli: " << e.what() << '\n';
    return 1;
  } catch (const CLI::ParseError& e) {
    const CLI::App* shown = &app;
    for (const auto& s : subs)
      if (s.app->parsed()) shown = s.app;
    err << "error: " << e.what() << "\n\n" << shown->help();
    return 2;
  }

  for (auto& s : subs) {
    if (!s.app->parsed()) continue;
    try {
      const Options& o = *s.options;
      const Common& c = s.common;
      if (s.name == "finetune" || s.name == "eval") {
        auto& t = s.name == "finetune" ? fine.task : eval.task;
        resolve_task(o, t);
      }
      write_run_json(s.name, o, c.out);
      if (s.name == "synth") synth.run(c, out);
      if (s.name == "match") match.run(c, out);
      if (s.name == "pretrain") pre.run(c, out);
      if (s.name == "finetune") fine.run(o, c, out);
      if (s.name == "eval") eval.run(o, c, out);
      if (s.name == "search") search.run(c, out);
      if (s.name == "embed") embed.run(c, out);
      if (s.name == "gradcheck") return grad.run(c, out);
      return 0;
    } catch (const std::exception& e) {
      const auto* tagged = dynamic_cast<const Error*>(&e);
      err << "error: " << (tagged ? "" : "internal: ") << e.what() << '\n';
      return 1;
    }
  }
  return 2;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace uvtm::cli
