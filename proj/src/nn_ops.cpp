#include "uvtm/nn/ops.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace uvtm::nn {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error("neuralcore", msg); }

// Records which entries sit on which side of a kink at zero.
template <typename T>
void mix_signs(Graph<T>& g, const Mat<T>& x) {
  std::uint64_t h = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const T v = x.data()[i];
    const std::uint64_t side = v > T(0) ? 1 : (v < T(0) ? 2 : 3);
    h += side * (static_cast<std::uint64_t>(i) * 0x9E3779B97F4A7C15ull + 1);
  }
  g.mix_pattern(h);
}

template <typename T>
void require_same_shape(const Graph<T>& g, Var a, Var b, const char* op) {
  if (g.value(a).rows() != g.value(b).rows() || g.value(a).cols() != g.value(b).cols())
    fail(std::string(op) + ": shape mismatch");
}

}  // namespace

template <typename T>
Var linear(Graph<T>& g, Var x, Var w, Var b) {
  const auto& X = g.value(x);
  const auto& W = g.value(w);
  if (X.cols() != W.cols())
    fail("linear: input width " + std::to_string(X.cols()) + " vs weight width " + std::to_string(W.cols()));
  Mat<T> y = X * W.transpose();
  if (b) {
    const auto& B = g.value(b);
    if (B.rows() != 1 || B.cols() != W.rows()) fail("linear: bias shape mismatch");
    y.rowwise() += B.row(0);
  }
  return g.emit(std::move(y), {x, w, b}, [x, w, b](Graph<T>& gr, int self) {
    const Mat<T>& dy = gr.grad(self);
    if (gr.requires_grad(x)) gr.grad(x).noalias() += dy * gr.value(w);
    if (gr.requires_grad(w)) gr.grad(w).noalias() += dy.transpose() * gr.value(x);
    if (b && gr.requires_grad(b)) gr.grad(b) += dy.colwise().sum();
  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  require_same_shape(g, a, b, "add");
  Mat<T> y = g.value(a) + g.value(b);
  return g.emit(std::move(y), {a, b}, [a, b](Graph<T>& gr, int self) {
    if (gr.requires_grad(a)) gr.grad(a) += gr.grad(self);
    if (gr.requires_grad(b)) gr.grad(b) += gr.grad(self);
  });
}

template <typename T>
Var sub(Graph<T>& g, Var a, Var b) {
  require_same_shape(g, a, b, "sub");
  Mat<T> y = g.value(a) - g.value(b);
  return g.emit(std::move(y), {a, b}, [a, b](Graph<T>& gr, int self) {
    if (gr.requires_grad(a)) gr.grad(a) += gr.grad(self);
    if (gr.requires_grad(b)) gr.grad(b) -= gr.grad(self);
  });
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  require_same_shape(g, a, b, "mul");
  Mat<T> y = g.value(a).cwiseProduct(g.value(b));
  return g.emit(std::move(y), {a, b}, [a, b](Graph<T>& gr, int self) {
    const Mat<T>& dy = gr.grad(self);
    if (gr.requires_grad(a)) gr.grad(a) += dy.cwiseProduct(gr.value(b));
    if (gr.requires_grad(b)) gr.grad(b) += dy.cwiseProduct(gr.value(a));
  });
}

template <typename T>
Var scale(Graph<T>& g, Var x, T factor) {
  Mat<T> y = g.value(x) * factor;
  return g.emit(std::move(y), {x}, [x, factor](Graph<T>& gr, int self) { gr.grad(x) += gr.grad(self) * factor; });
}

template <typename T>
Var sum(Graph<T>& g, Var x) {
  Mat<T> y(1, 1);
  y(0, 0) = g.value(x).sum();
  return g.emit(std::move(y), {x}, [x](Graph<T>& gr, int self) { gr.grad(x).array() += gr.grad(self)(0, 0); });
}

template <typename T>
Var relu(Graph<T>& g, Var x) {
  mix_signs(g, g.value(x));
  Mat<T> y = g.value(x).cwiseMax(T(0));
  return g.emit(std::move(y), {x}, [x](Graph<T>& gr, int self) {
    const Mat<T>& in = gr.value(x);
    gr.grad(x).array() += (in.array() > T(0)).select(gr.grad(self).array(), T(0));
  });
}

template <typename T>
Var abs(Graph<T>& g, Var x) {
  mix_signs(g, g.value(x));
  Mat<T> y = g.value(x).cwiseAbs();
  return g.emit(std::move(y), {x}, [x](Graph<T>& gr, int self) {
    const Mat<T>& in = gr.value(x);
    const Mat<T>& dy = gr.grad(self);
    Mat<T>& dx = gr.grad(x);
    for (Eigen::Index i = 0; i < in.size(); ++i) {
      const T s = in.data()[i] > T(0) ? T(1) : (in.data()[i] < T(0) ? T(-1) : T(0));
      dx.data()[i] += s * dy.data()[i];
    }
  });
}

template <typename T>
Var row_norm(Graph<T>& g, Var x) {
  Mat<T> y = g.value(x).rowwise().norm();
  return g.emit(std::move(y), {x}, [x](Graph<T>& gr, int self) {
    const Mat<T>& in = gr.value(x);
    const Mat<T>& out = gr.value(Var{self});
    const Mat<T>& dy = gr.grad(self);
    Mat<T>& dx = gr.grad(x);
    for (Eigen::Index i = 0; i < in.rows(); ++i) {
      if (out(i, 0) > T(0)) dx.row(i) += (dy(i, 0) / out(i, 0)) * in.row(i);
    }
  });
}

template <typename T>
Var normalize_rows(Graph<T>& g, Var x) {
  const Mat<T>& in = g.value(x);
  Mat<T> norms = in.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.rows(); ++i)
    if (!(norms(i, 0) > T(0))) fail("normalize_rows: zero-norm row " + std::to_string(i));
  Mat<T> y = norms.cwiseInverse().asDiagonal() * in;
  return g.emit(std::move(y), {x}, [x, norms = std::move(norms)](Graph<T>& gr, int self) {
    const Mat<T>& out = gr.value(Var{self});
    const Mat<T>& dy = gr.grad(self);
    Mat<T>& dx = gr.grad(x);
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      const T proj = out.row(i).dot(dy.row(i));
      dx.row(i) += (dy.row(i) - proj * out.row(i)) / norms(i, 0);
    }
  });
}

template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta, T eps) {
  const Mat<T>& in = g.value(x);
  const Mat<T>& ga = g.value(gamma);
  const Mat<T>& be = g.value(beta);
  const Eigen::Index n = in.rows();
  const Eigen::Index d = in.cols();
  if (ga.cols() != d || be.cols() != d) fail("layer_norm: gain/bias width mismatch");
  auto xhat = std::make_shared<Mat<T>>(n, d);
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
  Mat<T> y(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = in.row(i).mean();
    const T var = (in.row(i).array() - mean).square().mean();
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(i)] = is;
    xhat->row(i) = (in.row(i).array() - mean) * is;
    y.row(i) = xhat->row(i).cwiseProduct(ga.row(0)) + be.row(0);
  }
  return g.emit(std::move(y), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std](Graph<T>& gr, int self) {
    const Mat<T>& dy = gr.grad(self);
    const Mat<T>& ga = gr.value(gamma);
    const Eigen::Index rows = dy.rows();
    const T dd = static_cast<T>(dy.cols());
    if (gr.requires_grad(gamma)) gr.grad(gamma) += dy.cwiseProduct(*xhat).colwise().sum();
    if (gr.requires_grad(beta)) gr.grad(beta) += dy.colwise().sum();
    if (gr.requires_grad(x)) {
      Mat<T>& dx = gr.grad(x);
      for (Eigen::Index i = 0; i < rows; ++i) {
        const auto dxhat = (dy.row(i).cwiseProduct(ga.row(0))).eval();
        const T s1 = dxhat.sum();
        const T s2 = dxhat.dot(xhat->row(i));
        dx.row(i) += ((*inv_std)[static_cast<std::size_t>(i)] / dd) *
                     (dd * dxhat.array() - s1 - xhat->row(i).array() * s2).matrix();
      }
    }
  });
}

template <typename T>
Var group_mean(Graph<T>& g, Var x, int group) {
  const Mat<T>& in = g.value(x);
  if (group <= 0 || in.rows() % group != 0) fail("group_mean: rows not divisible by group size");
  const Eigen::Index n = in.rows() / group;
  Mat<T> y = Mat<T>::Zero(n, in.cols());
  const T inv = T(1) / static_cast<T>(group);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int j = 0; j < group; ++j) y.row(i) += in.row(i * group + j) * inv;
  return g.emit(std::move(y), {x}, [x, group, inv](Graph<T>& gr, int self) {
    const Mat<T>& dy = gr.grad(self);
    Mat<T>& dx = gr.grad(x);
    for (Eigen::Index i = 0; i < dy.rows(); ++i)
      for (int j = 0; j < group; ++j) dx.row(i * group + j) += dy.row(i) * inv;
  });
}

template <typename T>
Var gather_rows(Graph<T>& g, Var table, const std::vector<int>& idx) {
  const Mat<T>& tab = g.value(table);
  Mat<T> y(static_cast<Eigen::Index>(idx.size()), tab.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= tab.rows())
      fail("gather_rows: index " + std::to_string(idx[i]) + " outside table of " + std::to_string(tab.rows()));
    y.row(static_cast<Eigen::Index>(i)) = tab.row(idx[i]);
  }
  return g.emit(std::move(y), {table}, [table, idx](Graph<T>& gr, int self) {
    const Mat<T>& dy = gr.grad(self);
    Mat<T>& dt = gr.grad(table);
    for (std::size_t i = 0; i < idx.size(); ++i) dt.row(idx[i]) += dy.row(static_cast<Eigen::Index>(i));
  });
}

template <typename T>
Var stack_rows(Graph<T>& g, const std::vector<RowRef>& rows, Eigen::Index cols) {
  Mat<T> y(static_cast<Eigen::Index>(rows.size()), cols);
  std::vector<Var> parents;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Mat<T>& src = g.value(rows[i].source);
    if (src.cols() != cols) fail("stack_rows: width mismatch");
    if (rows[i].row < 0 || rows[i].row >= src.rows()) fail("stack_rows: row out of range");
    y.row(static_cast<Eigen::Index>(i)) = src.row(rows[i].row);
    parents.push_back(rows[i].source);
  }
  return g.emit_many(std::move(y), parents, [rows](Graph<T>& gr, int self) {
    const Mat<T>& dy = gr.grad(self);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (gr.requires_grad(rows[i].source))
        gr.grad(rows[i].source).row(rows[i].row) += dy.row(static_cast<Eigen::Index>(i));
    }
  });
}

template <typename T>
Var fourier_features(Graph<T>& g, Var x, Var v) {
  const Mat<T>& xs = g.value(x);
  const Mat<T>& vs = g.value(v);
  if (xs.cols() != 1 || vs.rows() != 1) fail("fourier_features: expects x (n x 1) and v (1 x h)");
  const Eigen::Index n = xs.rows();
  const Eigen::Index h = vs.cols();
  Mat<T> y(n, 2 * h);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < h; ++j) {
      const T a = xs(i, 0) * vs(0, j);
      y(i, j) = std::cos(a);
      y(i, h + j) = std::sin(a);
    }
  }
  return g.emit(std::move(y), {x, v}, [x, v](Graph<T>& gr, int self) {
    const Mat<T>& xs2 = gr.value(x);
    const Mat<T>& vs2 = gr.value(v);
    const Mat<T>& out = gr.value(Var{self});
    const Mat<T>& dy = gr.grad(self);
    const Eigen::Index h2 = vs2.cols();
    const bool gx = gr.requires_grad(x);
    const bool gv = gr.requires_grad(v);
    for (Eigen::Index i = 0; i < xs2.rows(); ++i) {
      T accx = 0;
      for (Eigen::Index j = 0; j < h2; ++j) {
        // d cos(a) = -sin(a) da, d sin(a) = cos(a) da
        const T da = -out(i, h2 + j) * dy(i, j) + out(i, j) * dy(i, h2 + j);
        accx += da * vs2(0, j);
        if (gv) gr.grad(v)(0, j) += da * xs2(i, 0);
      }
      if (gx) gr.grad(x)(i, 0) += accx;
    }
  });
}

template <typename T>
Mat<T> softmax_rows(const Mat<T>& logits) {
  Mat<T> p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const T mx = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

template <typename T>
Var cross_entropy(Graph<T>& g, Var logits, const std::vector<int>& targets) {
  const Mat<T>& l = g.value(logits);
  if (static_cast<Eigen::Index>(targets.size()) != l.rows()) fail("cross_entropy: one target per row required");
  auto probs = std::make_shared<Mat<T>>(l.rows(), l.cols());
  Mat<T> y(l.rows(), 1);
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= l.cols()) fail("cross_entropy: target class out of range");
    const T mx = l.row(i).maxCoeff();
    const T lse = mx + std::log((l.row(i).array() - mx).exp().sum());
    probs->row(i) = (l.row(i).array() - lse).exp();
    y(i, 0) = lse - l(i, t);
  }
  return g.emit(std::move(y), {logits}, [logits, targets, probs](Graph<T>& gr, int self) {
    const Mat<T>& dy = gr.grad(self);
    Mat<T>& dl = gr.grad(logits);
    for (Eigen::Index i = 0; i < dl.rows(); ++i) {
      dl.row(i) += dy(i, 0) * probs->row(i);
      dl(i, targets[static_cast<std::size_t>(i)]) -= dy(i, 0);
    }
  });
}

template <typename T>
Var attention(Graph<T>& g, Var q, Var k, Var v, int heads, const AttentionMask& mask) {
  const Mat<T>& Q = g.value(q);
  const Mat<T>& K = g.value(k);
  const Mat<T>& V = g.value(v);
  const Eigen::Index nq = Q.rows();
  const Eigen::Index nk = K.rows();
  const Eigen::Index d = Q.cols();
  if (K.cols() != d || V.cols() != d || V.rows() != nk) fail("attention: Q/K/V dimension mismatch");
  if (heads <= 0 || d % heads != 0) fail("attention: model width not divisible by head count");
  if (!mask.ranges.empty() && static_cast<Eigen::Index>(mask.ranges.size()) != nq)
    fail("attention: mask needs one key window per query");
  if (!mask.allowed.empty() && static_cast<Eigen::Index>(mask.allowed.size()) != nq * nk)
    fail("attention: dense mask has wrong size");
  const Eigen::Index dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  struct Saved {
    std::vector<std::pair<int, int>> window;
    std::vector<std::size_t> offset;  // into probs, per query
    std::vector<T> probs;             // [query][head][key - lo]
  };
  auto saved = std::make_shared<Saved>();
  saved->window.resize(static_cast<std::size_t>(nq));
  saved->offset.resize(static_cast<std::size_t>(nq));
  std::size_t total = 0;
  for (Eigen::Index i = 0; i < nq; ++i) {
    std::pair<int, int> w = mask.ranges.empty() ? std::pair<int, int>{0, static_cast<int>(nk)}
                                                : mask.ranges[static_cast<std::size_t>(i)];
    w.first = std::max(w.first, 0);
    w.second = std::min<int>(w.second, static_cast<int>(nk));
    if (w.second < w.first) w.second = w.first;
    saved->window[static_cast<std::size_t>(i)] = w;
    saved->offset[static_cast<std::size_t>(i)] = total;
    total += static_cast<std::size_t>(heads) * static_cast<std::size_t>(w.second - w.first);
  }
  saved->probs.assign(total, T(0));

  Mat<T> out = Mat<T>::Zero(nq, d);
  std::vector<T> scores;
  for (Eigen::Index i = 0; i < nq; ++i) {
    const auto [lo, hi] = saved->window[static_cast<std::size_t>(i)];
    const int width = hi - lo;
    if (width == 0) continue;
    const std::uint8_t* allow = mask.allowed.empty() ? nullptr : mask.allowed.data() + i * nk;
    scores.assign(static_cast<std::size_t>(width), T(0));
    for (int h = 0; h < heads; ++h) {
      const T* qi = Q.data() + i * d + h * dh;
      T mx = -std::numeric_limits<T>::infinity();
      for (int kk = lo; kk < hi; ++kk) {
        if (allow && !allow[kk]) continue;
        const T* kr = K.data() + kk * d + h * dh;
        T s = 0;
        for (Eigen::Index c = 0; c < dh; ++c) s += qi[c] * kr[c];
        s *= inv_sqrt;
        scores[static_cast<std::size_t>(kk - lo)] = s;
        mx = std::max(mx, s);
      }
      if (mx == -std::numeric_limits<T>::infinity()) continue;  // nothing visible
      T* p = saved->probs.data() + saved->offset[static_cast<std::size_t>(i)] + static_cast<std::size_t>(h * width);
      T z = 0;
      for (int kk = lo; kk < hi; ++kk) {
        if (allow && !allow[kk]) continue;
        const T e = std::exp(scores[static_cast<std::size_t>(kk - lo)] - mx);
        p[kk - lo] = e;
        z += e;
      }
      T* o = out.data() + i * d + h * dh;
      for (int kk = lo; kk < hi; ++kk) {
        if (p[kk - lo] == T(0)) continue;
        p[kk - lo] /= z;
        const T pk = p[kk - lo];
        const T* vr = V.data() + kk * d + h * dh;
        for (Eigen::Index c = 0; c < dh; ++c) o[c] += pk * vr[c];
      }
    }
  }

  return g.emit(std::move(out), {q, k, v}, [q, k, v, heads, dh, inv_sqrt, saved](Graph<T>& gr, int self) {
    const Mat<T>& Q2 = gr.value(q);
    const Mat<T>& K2 = gr.value(k);
    const Mat<T>& V2 = gr.value(v);
    const Mat<T>& dO = gr.grad(self);
    const Eigen::Index d2 = Q2.cols();
    const bool gq = gr.requires_grad(q);
    const bool gk = gr.requires_grad(k);
    const bool gv = gr.requires_grad(v);
    T* dQ = gq ? gr.grad(q).data() : nullptr;
    T* dK = gk ? gr.grad(k).data() : nullptr;
    T* dV = gv ? gr.grad(v).data() : nullptr;
    std::vector<T> dp;
    for (Eigen::Index i = 0; i < Q2.rows(); ++i) {
      const auto [lo, hi] = saved->window[static_cast<std::size_t>(i)];
      const int width = hi - lo;
      if (width == 0) continue;
      dp.assign(static_cast<std::size_t>(width), T(0));
      for (int h = 0; h < heads; ++h) {
        const T* p =
            saved->probs.data() + saved->offset[static_cast<std::size_t>(i)] + static_cast<std::size_t>(h * width);
        const T* go = dO.data() + i * d2 + h * dh;
        T dot = 0;
        for (int kk = lo; kk < hi; ++kk) {
          const T pk = p[kk - lo];
          if (pk == T(0)) {
            dp[static_cast<std::size_t>(kk - lo)] = 0;
            continue;
          }
          const T* vr = V2.data() + kk * d2 + h * dh;
          T s = 0;
          for (Eigen::Index c = 0; c < dh; ++c) s += go[c] * vr[c];
          dp[static_cast<std::size_t>(kk - lo)] = s;
          dot += pk * s;
          if (gv) {
            T* dvr = dV + kk * d2 + h * dh;
            for (Eigen::Index c = 0; c < dh; ++c) dvr[c] += pk * go[c];
          }
        }
        const T* qi = Q2.data() + i * d2 + h * dh;
        for (int kk = lo; kk < hi; ++kk) {
          const T pk = p[kk - lo];
          if (pk == T(0)) continue;
          const T ds = pk * (dp[static_cast<std::size_t>(kk - lo)] - dot) * inv_sqrt;
          const T* kr = K2.data() + kk * d2 + h * dh;
          if (gq) {
            T* dqi = dQ + i * d2 + h * dh;
            for (Eigen::Index c = 0; c < dh; ++c) dqi[c] += ds * kr[c];
          }
          if (gk) {
            T* dkr = dK + kk * d2 + h * dh;
            for (Eigen::Index c = 0; c < dh; ++c) dkr[c] += ds * qi[c];
          }
        }
      }
    }
  });
}

#define UVTM_INSTANTIATE_OPS(T)                                                               \
  template Var linear<T>(Graph<T>&, Var, Var, Var);                                           \
  template Var add<T>(Graph<T>&, Var, Var);                                                   \
  template Var sub<T>(Graph<T>&, Var, Var);                                                   \
  template Var mul<T>(Graph<T>&, Var, Var);                                                   \
  template Var scale<T>(Graph<T>&, Var, T);                                                   \
  template Var sum<T>(Graph<T>&, Var);                                                        \
  template Var relu<T>(Graph<T>&, Var);                                                       \
  template Var abs<T>(Graph<T>&, Var);                                                        \
  template Var row_norm<T>(Graph<T>&, Var);                                                   \
  template Var normalize_rows<T>(Graph<T>&, Var);                                             \
  template Var layer_norm<T>(Graph<T>&, Var, Var, Var, T);                                    \
  template Var group_mean<T>(Graph<T>&, Var, int);                                            \
  template Var gather_rows<T>(Graph<T>&, Var, const std::vector<int>&);                       \
  template Var stack_rows<T>(Graph<T>&, const std::vector<RowRef>&, Eigen::Index);            \
  template Var fourier_features<T>(Graph<T>&, Var, Var);                                      \
  template Var cross_entropy<T>(Graph<T>&, Var, const std::vector<int>&);                     \
  template Var attention<T>(Graph<T>&, Var, Var, Var, int, const AttentionMask&);             \
  template Mat<T> softmax_rows<T>(const Mat<T>&);

UVTM_INSTANTIATE_OPS(float)
UVTM_INSTANTIATE_OPS(double)

}  // namespace uvtm::nn
