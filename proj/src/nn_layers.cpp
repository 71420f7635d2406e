#include "uvtm/nn/layers.hpp"

namespace uvtm::nn {

namespace {

template <typename T>
std::size_t add_weight(ParamStore<T>& store, const std::string& name, int rows, int cols, std::mt19937_64& rng) {
  const std::size_t i = store.add(name, rows, cols);
  xavier_uniform(store[i].value, rng);
  return i;
}

}  // namespace

template <typename T>
MhaParams register_mha(ParamStore<T>& store, const std::string& prefix, int d, std::mt19937_64& rng) {
  MhaParams w;
  w.wq = add_weight(store, prefix + ".wq", d, d, rng);
  w.bq = store.add(prefix + ".bq", 1, d);
  w.wk = add_weight(store, prefix + ".wk", d, d, rng);
  w.bk = store.add(prefix + ".bk", 1, d);
  w.wv = add_weight(store, prefix + ".wv", d, d, rng);
  w.bv = store.add(prefix + ".bv", 1, d);
  w.wo = add_weight(store, prefix + ".wo", d, d, rng);
  w.bo = store.add(prefix + ".bo", 1, d);
  return w;
}

template <typename T>
Var multi_head_attention(Graph<T>& g, ParamStore<T>& store, const MhaParams& w, Var xq, Var xkv, int heads,
                         const AttentionMask& mask) {
  const Var q = linear(g, xq, g.param(store[w.wq]), g.param(store[w.bq]));
  const Var k = linear(g, xkv, g.param(store[w.wk]), g.param(store[w.bk]));
  const Var v = linear(g, xkv, g.param(store[w.wv]), g.param(store[w.bv]));
  const Var a = attention(g, q, k, v, heads, mask);
  return linear(g, a, g.param(store[w.wo]), g.param(store[w.bo]));
}

template <typename T>
Var multi_head_attention(Graph<T>& g, ParamStore<T>& store, const MhaParams& w, Var xq, Var xkv, int heads,
                         const std::vector<std::vector<bool>>& mask) {
  const auto nq = static_cast<std::size_t>(g.value(xq).rows());
  const auto nk = static_cast<std::size_t>(g.value(xkv).rows());
  if (mask.size() != nq) throw Error("neuralcore", "attention mask must have one row per query");
  AttentionMask m;
  m.allowed.reserve(nq * nk);
  for (std::size_t i = 0; i < nq; ++i) {
    if (mask[i].size() != nk) throw Error("neuralcore", "attention mask must have one column per key");
    bool any = false;
    for (bool b : mask[i]) {
      m.allowed.push_back(b ? 1 : 0);
      any = any || b;
    }
    if (!any) throw Error("neuralcore", "attention mask row " + std::to_string(i) + " hides every key");
  }
  return multi_head_attention(g, store, w, xq, xkv, heads, m);
}

template <typename T>
FfnParams register_ffn(ParamStore<T>& store, const std::string& prefix, int d, int hidden, std::mt19937_64& rng) {
  FfnParams w;
  w.w1 = add_weight(store, prefix + ".w1", hidden, d, rng);
  w.b1 = store.add(prefix + ".b1", 1, hidden);
  w.w2 = add_weight(store, prefix + ".w2", d, hidden, rng);
  w.b2 = store.add(prefix + ".b2", 1, d);
  return w;
}

template <typename T>
Var feed_forward(Graph<T>& g, ParamStore<T>& store, const FfnParams& w, Var x) {
  const Var h = relu(g, linear(g, x, g.param(store[w.w1]), g.param(store[w.b1])));
  return linear(g, h, g.param(store[w.w2]), g.param(store[w.b2]));
}

template <typename T>
LayerNormParams register_layer_norm(ParamStore<T>& store, const std::string& prefix, int d) {
  LayerNormParams w;
  w.gamma = store.add(prefix + ".gamma", 1, d);
  store[w.gamma].value.setOnes();
  w.beta = store.add(prefix + ".beta", 1, d);
  return w;
}

template <typename T>
Var layer_norm(Graph<T>& g, ParamStore<T>& store, const LayerNormParams& w, Var x) {
  return layer_norm(g, x, g.param(store[w.gamma]), g.param(store[w.beta]));
}

#define UVTM_INSTANTIATE_LAYERS(T)                                                                             \
  template MhaParams register_mha<T>(ParamStore<T>&, const std::string&, int, std::mt19937_64&);              \
  template Var multi_head_attention<T>(Graph<T>&, ParamStore<T>&, const MhaParams&, Var, Var, int,            \
                                       const AttentionMask&);                                                 \
  template Var multi_head_attention<T>(Graph<T>&, ParamStore<T>&, const MhaParams&, Var, Var, int,            \
                                       const std::vector<std::vector<bool>>&);                                \
  template FfnParams register_ffn<T>(ParamStore<T>&, const std::string&, int, int, std::mt19937_64&);         \
  template Var feed_forward<T>(Graph<T>&, ParamStore<T>&, const FfnParams&, Var);                             \
  template LayerNormParams register_layer_norm<T>(ParamStore<T>&, const std::string&, int);                   \
  template Var layer_norm<T>(Graph<T>&, ParamStore<T>&, const LayerNormParams&, Var);

UVTM_INSTANTIATE_LAYERS(float)
UVTM_INSTANTIATE_LAYERS(double)

}  // namespace uvtm::nn
