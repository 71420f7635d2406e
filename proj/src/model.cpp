#include "uvtm/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace uvtm::model {

using nn::Graph;
using nn::Mat;
using nn::Var;
using tokenizer::ItemRole;
using tokenizer::Token;
using tokenizer::Tuple;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error("model", msg); }

template <typename T>
Mat<T> column(const std::vector<double>& xs) {
  Mat<T> m(static_cast<Eigen::Index>(xs.size()), 1);
  for (std::size_t i = 0; i < xs.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = static_cast<T>(xs[i]);
  return m;
}

template <typename T>
FourierParams register_fourier(nn::ParamStore<T>& store, const std::string& prefix, int d, double freq_std,
                               std::mt19937_64& rng) {
  FourierParams p;
  p.v = store.add(prefix + ".v", 1, d / 2);
  std::normal_distribution<double> normal(0.0, freq_std);
  auto& v = store[p.v].value;
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(normal(rng));
  p.w = store.add(prefix + ".w", d, d);
  nn::xavier_uniform(store[p.w].value, rng);
  return p;
}

template <typename T>
std::size_t register_table(nn::ParamStore<T>& store, const std::string& name, int rows, int cols,
                           std::mt19937_64& rng) {
  const std::size_t i = store.add(name, rows, cols);
  nn::xavier_uniform(store[i].value, rng);
  return i;
}

template <typename T>
Mat<T> row_mask(const std::vector<char>& on, Eigen::Index cols) {
  Mat<T> m(static_cast<Eigen::Index>(on.size()), cols);
  for (std::size_t i = 0; i < on.size(); ++i) m.row(static_cast<Eigen::Index>(i)).setConstant(on[i] ? T(1) : T(0));
  return m;
}

}  // namespace

std::vector<double> positional_encoding(int p, int d) {
  std::vector<double> pe(static_cast<std::size_t>(d));
  for (int i = 0; i < d; i += 2) {
    const double angle = static_cast<double>(p) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
    pe[static_cast<std::size_t>(i)] = std::sin(angle);
    if (i + 1 < d) pe[static_cast<std::size_t>(i + 1)] = std::cos(angle);
  }
  return pe;
}

template <typename T>
Model<T>::Model(const ModelConfig& config) : config_(config) {
  const int d = config.d;
  if (d <= 0 || d % 2 != 0) fail("model width must be positive and even");
  if (config.heads <= 0 || d % config.heads != 0) fail("model width must be divisible by the head count");
  if (config.layers < 0) fail("layer count must be non-negative");
  if (config.num_segments <= 0) fail("model needs at least one road segment");
  if (!(config.delta_m > 0.0)) fail("neighbour radius must be positive");
  std::mt19937_64 rng(config.seed);
  auto& s = store_;
  layout_.lng = register_fourier(s, "fourier.lng", d, config.freq_std_coord, rng);
  layout_.lat = register_fourier(s, "fourier.lat", d, config.freq_std_coord, rng);
  layout_.time = register_fourier(s, "fourier.time", d, config.freq_std_time, rng);
  layout_.fraction = register_fourier(s, "fourier.fraction", d, config.freq_std_fraction, rng);
  layout_.seg_embed = register_table(s, "embed.segment", config.num_segments, d, rng);
  layout_.omega_embed = register_table(s, "embed.omega", config.num_segments, d, rng);
  layout_.token_embed = register_table(s, "embed.token", tokenizer::kNumTokens, d, rng);
  layout_.spatial_attn = nn::register_mha(s, "spatial_attn", d, rng);
  layout_.tuple_attn = nn::register_mha(s, "tuple_attn", d, rng);
  for (int l = 0; l < config.layers; ++l) {
    const std::string prefix = "block" + std::to_string(l);
    BlockParams b;
    b.attn = nn::register_mha(s, prefix + ".attn", d, rng);
    b.ln1 = nn::register_layer_norm(s, prefix + ".ln1", d);
    b.ffn = nn::register_ffn(s, prefix + ".ffn", d, 4 * d, rng);
    b.ln2 = nn::register_layer_norm(s, prefix + ".ln2", d);
    layout_.blocks.push_back(b);
  }
  layout_.wc = register_table(s, "head.coord.w", 2, d, rng);
  layout_.bc = s.add("head.coord.b", 1, 2);
  layout_.wt = register_table(s, "head.time.w", 1, d, rng);
  layout_.bt = s.add("head.time.b", 1, 1);
  layout_.we = register_table(s, "head.segment.w", config.num_segments + 1, d, rng);
  layout_.be = s.add("head.segment.b", 1, config.num_segments + 1);
  layout_.wr = register_table(s, "head.fraction.w", 1, d, rng);
  layout_.br = s.add("head.fraction.b", 1, 1);
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Model<U> out;
  out.config_ = config_;
  out.layout_ = layout_;
  out.store_ = store_.template cast<U>();
  return out;
}

template <typename T>
Var Model<T>::fourier_encode(Graph<T>& g, const FourierParams& enc, Var x) const {
  const Var ff = nn::fourier_features(g, x, g.param(store_[enc.v]));
  return nn::linear(g, ff, g.param(store_[enc.w]));
}

template <typename T>
Var Model<T>::embed_tuple(Graph<T>& g, const Tuple& tuple) const {
  return embed_items(g, {&tuple});
}

template <typename T>
Var Model<T>::embed_items(Graph<T>& g, const std::vector<const Tuple*>& tuples) const {
  const Normalizer& norm = config_.normalizer;
  const int d = config_.d;
  std::vector<double> lng, lat, times, fracs;
  std::vector<int> segs, tokens, omega_ids;
  std::vector<std::pair<int, int>> omega_ranges;
  std::vector<char> has_omega;
  enum Src : std::uint8_t { kSp, kTe, kRn, kTok };
  std::vector<std::pair<Src, int>> rows;
  rows.reserve(tuples.size() * 3);

  auto token_row = [&](Token t) {
    tokens.push_back(static_cast<int>(t));
    rows.emplace_back(kTok, static_cast<int>(tokens.size()) - 1);
  };

  for (const Tuple* tp : tuples) {
    if (const auto* s = tp->spatial_value()) {
      lng.push_back(norm.lng(s->lng));
      lat.push_back(norm.lat(s->lat));
      const int lo = static_cast<int>(omega_ids.size());
      for (auto id : s->omega) {
        if (id < 0 || id >= config_.num_segments) fail("segment id " + std::to_string(id) + " outside the network");
        omega_ids.push_back(id);
      }
      omega_ranges.emplace_back(lo, static_cast<int>(omega_ids.size()));
      has_omega.push_back(s->omega.empty() ? 0 : 1);
      rows.emplace_back(kSp, static_cast<int>(lng.size()) - 1);
    } else {
      token_row(std::get<Token>(tp->spatial));
    }
    if (const auto* t = tp->temporal_value()) {
      times.push_back(norm.time(t->t_norm));
      rows.emplace_back(kTe, static_cast<int>(times.size()) - 1);
    } else {
      token_row(std::get<Token>(tp->temporal));
    }
    if (const auto* r = tp->road_value()) {
      if (r->segment < 0 || r->segment >= config_.num_segments)
        fail("segment id " + std::to_string(r->segment) + " outside the network");
      segs.push_back(r->segment);
      fracs.push_back(r->fraction);
      rows.emplace_back(kRn, static_cast<int>(segs.size()) - 1);
    } else {
      token_row(std::get<Token>(tp->road));
    }
  }

  Var sp, te, rn, tok;
  if (!lng.empty()) {
    const Var zl = fourier_encode(g, layout_.lng, g.constant(column<T>(lng)));
    const Var za = fourier_encode(g, layout_.lat, g.constant(column<T>(lat)));
    sp = nn::add(g, zl, za);
    if (!omega_ids.empty()) {
      const Var keys = nn::gather_rows(g, g.param(store_[layout_.omega_embed]), omega_ids);
      nn::AttentionMask mask;
      mask.ranges = omega_ranges;
      Var cross = nn::multi_head_attention(g, store_, layout_.spatial_attn, sp, keys, config_.heads, mask);
      cross = nn::mul(g, cross, g.constant(row_mask<T>(has_omega, d)));
      sp = nn::add(g, sp, cross);
    }
  }
  if (!times.empty()) te = fourier_encode(g, layout_.time, g.constant(column<T>(times)));
  if (!segs.empty()) {
    const Var e = nn::gather_rows(g, g.param(store_[layout_.seg_embed]), segs);
    rn = nn::add(g, e, fourier_encode(g, layout_.fraction, g.constant(column<T>(fracs))));
  }
  if (!tokens.empty()) tok = nn::gather_rows(g, g.param(store_[layout_.token_embed]), tokens);

  std::vector<nn::RowRef> refs;
  refs.reserve(rows.size());
  for (const auto& [src, i] : rows) {
    const Var v = src == kSp ? sp : src == kTe ? te : src == kRn ? rn : tok;
    refs.push_back({v, i});
  }
  return nn::stack_rows(g, refs, d);
}

template <typename T>
Forward Model<T>::forward(Graph<T>& g, const tokenizer::PositionedSequence& seq) const {
  const auto n = static_cast<int>(seq.items.size());
  if (n == 0) fail("cannot encode an empty sequence");
  const int d = config_.d;
  const int num_inputs = static_cast<int>(seq.num_inputs);
  Forward f;

  std::vector<const Tuple*> tuples;
  tuples.reserve(seq.items.size());
  for (const auto& item : seq.items) tuples.push_back(&item.tuple);
  f.z = embed_items(g, tuples);

  nn::AttentionMask within;
  within.ranges.reserve(static_cast<std::size_t>(3 * n));
  for (int j = 0; j < n; ++j)
    for (int r = 0; r < 3; ++r) within.ranges.emplace_back(3 * j, 3 * j + 3);
  const Var tuple_ctx = nn::multi_head_attention(g, store_, layout_.tuple_attn, f.z, f.z, config_.heads, within);
  const Var pooled = nn::group_mean(g, tuple_ctx, 3);

  Mat<T> pe(n, d);
  for (int i = 0; i < n; ++i) {
    const auto a = positional_encoding(seq.items[static_cast<std::size_t>(i)].p1, d);
    const auto b = positional_encoding(seq.items[static_cast<std::size_t>(i)].p2, d);
    for (int c = 0; c < d; ++c) pe(i, c) = static_cast<T>(a[static_cast<std::size_t>(c)] + b[static_cast<std::size_t>(c)]);
  }
  f.h = nn::add(g, pooled, g.constant(std::move(pe)));

  nn::AttentionMask causal;
  causal.ranges.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) causal.ranges.emplace_back(0, i < num_inputs ? num_inputs : i + 1);
  Var h = f.h;
  for (const auto& b : layout_.blocks) {
    const Var a = nn::multi_head_attention(g, store_, b.attn, h, h, config_.heads, causal);
    const Var h1 = nn::layer_norm(g, store_, b.ln1, nn::add(g, a, h));
    const Var ff = nn::feed_forward(g, store_, b.ffn, h1);
    h = nn::layer_norm(g, store_, b.ln2, nn::add(g, ff, h1));
  }
  f.o = h;

  std::vector<nn::RowRef> gen;
  for (int i = 0; i < n; ++i) {
    if (seq.items[static_cast<std::size_t>(i)].role == ItemRole::Generated) {
      f.generated_rows.push_back(i);
      gen.push_back({f.o, i});
    }
  }
  if (!gen.empty()) {
    const Var og = nn::stack_rows(g, gen, d);
    f.coord = nn::linear(g, og, g.param(store_[layout_.wc]), g.param(store_[layout_.bc]));
    f.time = nn::linear(g, og, g.param(store_[layout_.wt]), g.param(store_[layout_.bt]));
    f.logits = nn::linear(g, og, g.param(store_[layout_.we]), g.param(store_[layout_.be]));
    f.frac = nn::linear(g, og, g.param(store_[layout_.wr]), g.param(store_[layout_.br]));
  }
  return f;
}

template <typename T>
Var Model<T>::loss(Graph<T>& g, const Forward& f, const tokenizer::PositionedSequence& seq) const {
  const Normalizer& norm = config_.normalizer;
  const auto m = static_cast<Eigen::Index>(f.generated_rows.size());
  if (m == 0) fail("loss needs at least one generated position");
  Mat<T> coord = Mat<T>::Zero(m, 2), coord_on = Mat<T>::Zero(m, 2);
  Mat<T> time = Mat<T>::Zero(m, 1), time_on = Mat<T>::Zero(m, 1);
  Mat<T> frac = Mat<T>::Zero(m, 1), frac_on = Mat<T>::Zero(m, 1);
  std::vector<int> classes(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& item = seq.items[static_cast<std::size_t>(f.generated_rows[static_cast<std::size_t>(i)])];
    if (!item.target) fail("generated position without a target");
    const Tuple& target = *item.target;
    if (target.is(Token::End)) {
      classes[static_cast<std::size_t>(i)] = stop_class();
      continue;
    }
    const auto* road = target.road_value();
    if (!road) fail("target tuple has no road domain");
    classes[static_cast<std::size_t>(i)] = road->segment;
    frac(i, 0) = static_cast<T>(road->fraction);
    frac_on(i, 0) = T(1);
    if (const auto* s = target.spatial_value()) {
      coord(i, 0) = static_cast<T>(norm.lng(s->lng));
      coord(i, 1) = static_cast<T>(norm.lat(s->lat));
      coord_on.row(i).setOnes();
    }
    if (const auto* t = target.temporal_value()) {
      time(i, 0) = static_cast<T>(norm.time(t->t_norm));
      time_on(i, 0) = T(1);
    }
  }
  const Var ce = nn::sum(g, nn::cross_entropy(g, f.logits, classes));
  const Var dc = nn::mul(g, nn::sub(g, f.coord, g.constant(std::move(coord))), g.constant(std::move(coord_on)));
  const Var lc = nn::scale(g, nn::sum(g, nn::row_norm(g, dc)), T(0.5));
  const Var dt = nn::mul(g, nn::sub(g, f.time, g.constant(std::move(time))), g.constant(std::move(time_on)));
  const Var lt = nn::sum(g, nn::abs(g, dt));
  const Var dr = nn::mul(g, nn::sub(g, f.frac, g.constant(std::move(frac))), g.constant(std::move(frac_on)));
  const Var lr = nn::sum(g, nn::abs(g, dr));
  const Var total = nn::add(g, nn::add(g, ce, lc), nn::add(g, lt, lr));
  return nn::scale(g, total, T(1) / static_cast<T>(m));
}

template <typename T>
HeadOutput Model<T>::head_output(const Graph<T>& g, const Forward& f, std::size_t k) const {
  const Normalizer& norm = config_.normalizer;
  const auto i = static_cast<Eigen::Index>(k);
  HeadOutput out;
  out.coord = {norm.lng_inv(static_cast<double>(g.value(f.coord)(i, 0))),
               norm.lat_inv(static_cast<double>(g.value(f.coord)(i, 1)))};
  out.t = norm.time_inv(static_cast<double>(g.value(f.time)(i, 0)));
  const Mat<T> logits = g.value(f.logits).row(i);
  const Mat<T> p = nn::softmax_rows(logits);
  out.probs.resize(static_cast<std::size_t>(p.cols()));
  for (Eigen::Index c = 0; c < p.cols(); ++c) out.probs[static_cast<std::size_t>(c)] = static_cast<double>(p(0, c));
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < logits.cols(); ++c)
    if (logits(0, c) > logits(0, best)) best = c;
  out.segment_class = static_cast<int>(best);
  out.fraction = static_cast<double>(g.value(f.frac)(i, 0));
  return out;
}

double tuple_loss(const HeadOutput& prediction, const Tuple& target, const Normalizer& normalizer, int stop_class) {
  const double p_true = [&] {
    int cls = stop_class;
    if (!target.is(Token::End)) {
      const auto* road = target.road_value();
      if (!road) fail("target tuple has no road domain");
      cls = road->segment;
    }
    if (cls < 0 || static_cast<std::size_t>(cls) >= prediction.probs.size()) fail("target class out of range");
    return prediction.probs[static_cast<std::size_t>(cls)];
  }();
  double loss = -std::log(p_true);
  if (target.is(Token::End)) return loss;
  if (const auto* s = target.spatial_value()) {
    const double dx = normalizer.lng(prediction.coord.lng) - normalizer.lng(s->lng);
    const double dy = normalizer.lat(prediction.coord.lat) - normalizer.lat(s->lat);
    loss += 0.5 * std::sqrt(dx * dx + dy * dy);
  }
  if (const auto* t = target.temporal_value())
    loss += std::abs(normalizer.time(prediction.t) - normalizer.time(t->t_norm));
  loss += std::abs(prediction.fraction - target.road_value()->fraction);
  return loss;
}

template <typename T>
std::vector<T> embed_trajectory(const Model<T>& model, tokenizer::SequencePlan plan) {
  if (plan.inputs.empty()) fail("cannot embed an empty trajectory");
  plan.with_cls = true;
  plan.blocks.clear();
  plan.block_order.clear();
  const auto seq = tokenizer::assign_positions(plan);
  Graph<T> g(false);
  const Forward f = model.forward(g, seq);
  const auto& o = g.value(f.o);
  return std::vector<T>(o.row(0).data(), o.row(0).data() + o.cols());
}

template <typename T>
tokenizer::SequencePlan generate_blocks(const Model<T>& model, const tokenizer::SequencePlan& plan,
                                        const roadnet::RoadNetwork& network, const GenerationOptions& options) {
  if (options.max_block_len < 1) fail("max_block_len must be at least 1");
  const ModelConfig& cfg = model.config();
  tokenizer::SequencePlan out = plan;
  for (auto& b : out.blocks) b.targets.clear();
  if (out.block_order.empty()) {
    out.block_order.resize(out.blocks.size());
    for (std::size_t i = 0; i < out.blocks.size(); ++i) out.block_order[i] = i;
  }

  tokenizer::PositionedSequence seq;
  if (plan.with_cls) seq.items.push_back({ItemRole::Cls, Tuple::special(Token::Cls), 0, 0, std::nullopt});
  for (std::size_t k = 0; k < plan.inputs.size(); ++k)
    seq.items.push_back({ItemRole::Input, plan.inputs[k].tuple, static_cast<int>(k) + 1, 0, std::nullopt});
  seq.num_inputs = seq.items.size();

  for (std::size_t b : out.block_order) {
    auto& block = out.blocks.at(b);
    const Tuple& anchor = plan.inputs.at(block.anchor).tuple;
    const bool open_ended = anchor.is(Token::Mask);
    const int p1 = static_cast<int>(block.anchor) + 1;
    seq.items.push_back({ItemRole::Generated, Tuple::special(Token::Start), p1, 1, std::nullopt});
    for (std::size_t j = 0;; ++j) {
      const bool must_stop = j >= options.max_block_len || (j >= 1 && !open_ended);
      if (must_stop) break;
      Graph<T> g(false);
      const Forward f = model.forward(g, seq);
      const HeadOutput h = model.head_output(g, f, f.generated_rows.size() - 1);
      int cls = h.segment_class;
      if (cls == model.stop_class()) {
        if (j >= 1) break;
        std::size_t best = 0;
        for (std::size_t c = 1; c < static_cast<std::size_t>(model.stop_class()); ++c)
          if (h.probs[c] > h.probs[best]) best = c;
        cls = static_cast<int>(best);
      }
      Tuple t;
      if (const auto* s = anchor.spatial_value()) {
        t.spatial = *s;
      } else {
        t.spatial = tokenizer::Spatial{h.coord.lng, h.coord.lat, network.neighbors_within(h.coord, cfg.delta_m)};
      }
      if (const auto* tm = anchor.temporal_value()) {
        t.temporal = *tm;
      } else {
        t.temporal = tokenizer::Temporal{h.t};
      }
      t.road = tokenizer::Road{static_cast<roadnet::SegmentId>(cls), std::clamp(h.fraction, 0.0, 1.0)};
      block.targets.push_back(t);
      seq.items.push_back({ItemRole::Generated, t, p1, static_cast<int>(j) + 2, std::nullopt});
    }
    block.targets.push_back(Tuple::special(Token::End));
  }
  return out;
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;
template std::vector<float> embed_trajectory<float>(const Model<float>&, tokenizer::SequencePlan);
template std::vector<double> embed_trajectory<double>(const Model<double>&, tokenizer::SequencePlan);
template tokenizer::SequencePlan generate_blocks<float>(const Model<float>&, const tokenizer::SequencePlan&,
                                                        const roadnet::RoadNetwork&, const GenerationOptions&);
template tokenizer::SequencePlan generate_blocks<double>(const Model<double>&, const tokenizer::SequencePlan&,
                                                         const roadnet::RoadNetwork&, const GenerationOptions&);

}  // namespace uvtm::model
