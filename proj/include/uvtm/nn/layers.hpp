#pragma once

#include <random>
#include <string>
#include <vector>

#include "uvtm/nn/ops.hpp"

namespace uvtm::nn {

/// Parameter indices of one multi-head attention layer.
struct MhaParams {
  std::size_t wq = 0, bq = 0, wk = 0, bk = 0, wv = 0, bv = 0, wo = 0, bo = 0;
};

template <typename T>
MhaParams register_mha(ParamStore<T>& store, const std::string& prefix, int d, std::mt19937_64& rng);

/// Projects queries from xq and keys/values from xkv, attends per head, concatenates
/// and applies the output projection.
template <typename T>
Var multi_head_attention(Graph<T>& g, ParamStore<T>& store, const MhaParams& w, Var xq, Var xkv, int heads,
                         const AttentionMask& mask);

/// Boolean mask variant: mask[i][j] says whether query i sees key j. Throws when
/// the shape is wrong or some query sees no key at all.
template <typename T>
Var multi_head_attention(Graph<T>& g, ParamStore<T>& store, const MhaParams& w, Var xq, Var xkv, int heads,
                         const std::vector<std::vector<bool>>& mask);

struct FfnParams {
  std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0;
};

/// Two-layer ReLU network with hidden width `hidden`.
template <typename T>
FfnParams register_ffn(ParamStore<T>& store, const std::string& prefix, int d, int hidden, std::mt19937_64& rng);

template <typename T>
Var feed_forward(Graph<T>& g, ParamStore<T>& store, const FfnParams& w, Var x);

struct LayerNormParams {
  std::size_t gamma = 0, beta = 0;
};

template <typename T>
LayerNormParams register_layer_norm(ParamStore<T>& store, const std::string& prefix, int d);

template <typename T>
Var layer_norm(Graph<T>& g, ParamStore<T>& store, const LayerNormParams& w, Var x);

}  // namespace uvtm::nn
