#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "uvtm/nn/graph.hpp"

namespace uvtm::nn {

/// x * w^T (+ b broadcast over rows). x: n x in, w: out x in, b: 1 x out.
template <typename T>
Var linear(Graph<T>& g, Var x, Var w, Var b = {});

template <typename T>
Var add(Graph<T>& g, Var a, Var b);

template <typename T>
Var sub(Graph<T>& g, Var a, Var b);

/// Elementwise product.
template <typename T>
Var mul(Graph<T>& g, Var a, Var b);

template <typename T>
Var scale(Graph<T>& g, Var x, T factor);

/// Sum of all entries, 1x1.
template <typename T>
Var sum(Graph<T>& g, Var x);

template <typename T>
Var relu(Graph<T>& g, Var x);

template <typename T>
Var abs(Graph<T>& g, Var x);

/// Per-row L2 norm, n x 1. The gradient at a zero row is taken as zero.
template <typename T>
Var row_norm(Graph<T>& g, Var x);

/// Rows scaled to unit L2 norm; throws on a zero row.
template <typename T>
Var normalize_rows(Graph<T>& g, Var x);

/// Row-wise layer normalization with affine gamma, beta (1 x d).
template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta, T eps = T(1e-5));

/// Mean of consecutive groups of `group` rows.
template <typename T>
Var group_mean(Graph<T>& g, Var x, int group);

/// Embedding lookup: row i of the result is row idx[i] of the table.
template <typename T>
Var gather_rows(Graph<T>& g, Var table, const std::vector<int>& idx);

struct RowRef {
  Var source;
  int row = 0;
};

/// Builds a matrix whose row i is rows[i].source's row rows[i].row.
template <typename T>
Var stack_rows(Graph<T>& g, const std::vector<RowRef>& rows, Eigen::Index cols);

/// Learnable Fourier features: [cos(x v) || sin(x v)], x: n x 1, v: 1 x h.
template <typename T>
Var fourier_features(Graph<T>& g, Var x, Var v);

/// -log softmax(logits)[target] per row, n x 1.
template <typename T>
Var cross_entropy(Graph<T>& g, Var logits, const std::vector<int>& targets);

/// Which keys each query may see. `ranges` gives a contiguous [lo, hi) window per
/// query (empty vector: every key). `allowed`, when non-empty, is an nq x nk
/// boolean matrix further restricting the window. A query with no visible key
/// produces a zero row.
struct AttentionMask {
  std::vector<std::pair<int, int>> ranges;
  std::vector<std::uint8_t> allowed;
};

/// Scaled dot-product attention on already-projected Q, K, V split into heads.
template <typename T>
Var attention(Graph<T>& g, Var q, Var k, Var v, int heads, const AttentionMask& mask);

template <typename T>
Mat<T> softmax_rows(const Mat<T>& logits);

}  // namespace uvtm::nn
