#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "uvtm/nn/layers.hpp"
#include "uvtm/roadnet.hpp"
#include "uvtm/tokenizer.hpp"

namespace uvtm::model {

/// Maps raw coordinates and times to the scale the network sees.
struct Normalizer {
  roadnet::BoundingBox bbox;
  double time_scale = 60.0;

  double lng(double v) const { return (v - bbox.min_lng) / span(bbox.max_lng - bbox.min_lng); }
  double lat(double v) const { return (v - bbox.min_lat) / span(bbox.max_lat - bbox.min_lat); }
  double time(double seconds) const { return seconds / time_scale; }
  double lng_inv(double v) const { return bbox.min_lng + v * span(bbox.max_lng - bbox.min_lng); }
  double lat_inv(double v) const { return bbox.min_lat + v * span(bbox.max_lat - bbox.min_lat); }
  double time_inv(double v) const { return v * time_scale; }

 private:
  static double span(double s) { return s > 0.0 ? s : 1.0; }
};

struct ModelConfig {
  int d = 128;
  int heads = 8;
  int layers = 2;
  double delta_m = roadnet::kDefaultDeltaM;
  int num_segments = 0;
  Normalizer normalizer;
  // Standard deviations of the Fourier frequency initialisation per input.
  double freq_std_coord = 20.0;
  double freq_std_time = 1.0;
  double freq_std_fraction = 5.0;
  std::uint64_t seed = 0;
};

/// Parameter indices of one Fourier encoder: x -> W [cos(x v) || sin(x v)].
struct FourierParams {
  std::size_t v = 0;
  std::size_t w = 0;
};

struct BlockParams {
  nn::MhaParams attn;
  nn::LayerNormParams ln1;
  nn::FfnParams ffn;
  nn::LayerNormParams ln2;
};

struct ModelParams {
  FourierParams lng, lat, time, fraction;
  std::size_t seg_embed = 0;    // E_E
  std::size_t omega_embed = 0;  // E_Omega
  std::size_t token_embed = 0;  // special tokens, row = Token value
  nn::MhaParams spatial_attn;
  nn::MhaParams tuple_attn;
  std::vector<BlockParams> blocks;
  std::size_t wc = 0, bc = 0, wt = 0, bt = 0, we = 0, be = 0, wr = 0, br = 0;
};

/// Graph nodes produced by one forward pass.
struct Forward {
  nn::Var z;       // 3n x d tuple embeddings
  nn::Var h;       // n x d sequence inputs
  nn::Var o;       // n x d encoder outputs
  std::vector<int> generated_rows;  // rows of `o` holding generated positions
  nn::Var coord;   // per generated row: 2 (normalized lng, lat)
  nn::Var time;    // 1 (normalized seconds since t0)
  nn::Var logits;  // |E| + 1, last class is the stop class
  nn::Var frac;    // 1
};

/// Head values for one position, de-normalized.
struct HeadOutput {
  LngLat coord;
  double t = 0.0;  // seconds since t0
  std::vector<double> probs;
  int segment_class = 0;  // argmax; == num_segments means stop
  double fraction = 0.0;  // unclamped
};

template <typename T>
class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }
  const ModelParams& layout() const { return layout_; }
  int stop_class() const { return config_.num_segments; }

  /// Runs the encoder and, when the sequence has generated positions, the heads.
  Forward forward(nn::Graph<T>& g, const tokenizer::PositionedSequence& seq) const;

  /// Mean teacher-forced loss over all supervised generated positions.
  nn::Var loss(nn::Graph<T>& g, const Forward& f, const tokenizer::PositionedSequence& seq) const;

  /// Fourier encoding of a single raw scalar for one of the four encoders.
  nn::Var fourier_encode(nn::Graph<T>& g, const FourierParams& enc, nn::Var x) const;

  /// 3 x d embedding of a single tuple.
  nn::Var embed_tuple(nn::Graph<T>& g, const tokenizer::Tuple& tuple) const;

  HeadOutput head_output(const nn::Graph<T>& g, const Forward& f, std::size_t generated_index) const;

  template <typename U>
  Model<U> cast() const;

 private:
  template <typename U>
  friend class Model;

  nn::Var embed_items(nn::Graph<T>& g, const std::vector<const tokenizer::Tuple*>& tuples) const;

  ModelConfig config_;
  mutable nn::ParamStore<T> store_;
  ModelParams layout_;
};

/// Straight evaluation of the per-position loss from head values (no graph).
double tuple_loss(const HeadOutput& prediction, const tokenizer::Tuple& target, const Normalizer& normalizer,
                  int stop_class);

/// Sinusoidal positional encoding row for position p.
std::vector<double> positional_encoding(int p, int d);

/// Embedding of a plan with a class token: the class position's encoder output.
template <typename T>
std::vector<T> embed_trajectory(const Model<T>& model, tokenizer::SequencePlan plan);

struct GenerationOptions {
  std::size_t max_block_len = 64;
};

/// Greedy block generation. Blocks are produced in plan.block_order; the returned
/// plan carries the generated targets (each block ending with the end tuple).
template <typename T>
tokenizer::SequencePlan generate_blocks(const Model<T>& model, const tokenizer::SequencePlan& plan,
                                        const roadnet::RoadNetwork& network, const GenerationOptions& options = {});

void save_checkpoint(const Model<float>& model, const std::filesystem::path& dir);
Model<float> load_checkpoint(const std::filesystem::path& dir);

}  // namespace uvtm::model
