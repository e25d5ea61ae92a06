#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "accentctc/autodiff.hpp"
#include "accentctc/tensor.hpp"

namespace accentctc {

using Rng = std::mt19937_64;

/// Uniform in [0, 1) from the top 53 bits of one draw.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

template <typename T>
constexpr T neg_inf() {
  return -std::numeric_limits<T>::infinity();
}

namespace detail {

// c[n x m] += a[n x k] * b[k x m]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    T* ci = c + i * m;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[n x m] += a[k x n]^T * b[k x m]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * n;
    const T* bp = b + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const T av = ap[i];
      T* ci = c + i * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[n x m] += a[n x k] * b[m x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t n, std::size_t k,
             std::size_t m) {
  std::vector<T> bt(k * m);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * m + j] = b[j * k + p];
  }
  gemm_nn(a, bt.data(), c, n, k, m);
}

template <typename T>
void require_rank(const Var<T>& v, std::size_t rank, const char* op) {
  if (v.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + ", got " +
                     shape_string(v.shape()));
  }
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

/// log(exp(a) + exp(b)) with -inf handled exactly.
template <typename T>
T log_add(T a, T b) {
  if (a == neg_inf<T>()) return b;
  if (b == neg_inf<T>()) return a;
  const T m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  auto od = out.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {a, b},
                          [ia, ib](Graph<T>& g, std::size_t self) {
                            const auto& go = g.grad(self);
                            if (g.requires_grad(ia)) detail::accumulate(g.grad(ia), go);
                            if (g.requires_grad(ib)) detail::accumulate(g.grad(ib), go);
                          });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  auto od = out.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] -= bd[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {a, b},
                          [ia, ib](Graph<T>& g, std::size_t self) {
                            const auto& go = g.grad(self);
                            if (g.requires_grad(ia)) detail::accumulate(g.grad(ia), go);
                            if (g.requires_grad(ib)) {
                              auto& gb = g.grad(ib);
                              for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= go[i];
                            }
                          });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  auto od = out.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] *= bd[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(
      std::move(out), {a, b}, [ia, ib](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        auto av = g.value(ia).data();
        auto bv = g.value(ib).data();
        if (g.requires_grad(ia)) {
          auto& ga = g.grad(ia);
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bv[i];
        }
        if (g.requires_grad(ib)) {
          auto& gb = g.grad(ib);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * av[i];
        }
      });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v *= factor;
  const std::size_t ia = a.id();
  return a.graph().record(std::move(out), {a},
                          [ia, factor](Graph<T>& g, std::size_t self) {
                            const auto& go = g.grad(self);
                            auto& ga = g.grad(ia);
                            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * factor;
                          });
}

/// x[T x D] + b[D] on every row.
template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& b) {
  detail::require_rank(x, 2, "add_row");
  if (b.size() != x.dim(1)) {
    throw ShapeError("add_row: bias length " + std::to_string(b.size()) +
                     " != row width " + std::to_string(x.dim(1)));
  }
  Tensor<T> out = x.value();
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  auto bd = b.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < cols; ++c) row[c] += bd[c];
  }
  const std::size_t ix = x.id(), ib = b.id();
  return x.graph().record(
      std::move(out), {x, b}, [ix, ib, rows, cols](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        if (g.requires_grad(ix)) detail::accumulate(g.grad(ix), go);
        if (g.requires_grad(ib)) {
          auto& gb = g.grad(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gb[c] += go[r * cols + c];
        }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " +
                     shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor<T> out(Shape{n, m});
  detail::gemm_nn(a.value().data().data(), b.value().data().data(),
                  out.data().data(), n, k, m);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(
      std::move(out), {a, b}, [ia, ib, n, k, m](Graph<T>& g, std::size_t self) {
        const T* go = g.grad(self).data();
        if (g.requires_grad(ia)) {
          detail::gemm_nt(go, g.value(ib).data().data(), g.grad(ia).data(), n,
                          m, k);
        }
        if (g.requires_grad(ib)) {
          detail::gemm_tn(g.value(ia).data().data(), go, g.grad(ib).data(), k,
                          n, m);
        }
      });
}

/// x[T x Din] * W[Din x Dout] + b[Dout].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add_row(matmul(x, w), b);
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor<T> out(Shape{cols, rows});
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.at(c, r) = xv.at(r, c);
  const std::size_t ix = x.id();
  return x.graph().record(
      std::move(out), {x}, [ix, rows, cols](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        auto& gx = g.grad(ix);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += go[c * rows + r];
      });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return x.graph().record(std::move(out), {x}, [ix](Graph<T>& g, std::size_t self) {
    detail::accumulate(g.grad(ix), g.grad(self));
  });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

namespace detail {

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const Var<T>& x, Fwd fwd, Deriv deriv) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = fwd(v);
  const std::size_t ix = x.id();
  return x.graph().record(std::move(out), {x},
                          [ix, deriv](Graph<T>& g, std::size_t self) {
                            const auto& go = g.grad(self);
                            auto xv = g.value(ix).data();
                            auto yv = g.value(self).data();
                            auto& gx = g.grad(ix);
                            for (std::size_t i = 0; i < gx.size(); ++i)
                              gx[i] += go[i] * deriv(xv[i], yv[i]);
                          });
}

}  // namespace detail

/// Exact (erf) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return detail::unary(
      x, [=](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [=](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
T sigmoid_value(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return sigmoid_value(v); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

/// Keeps x_i where x_i > k, zero elsewhere (including x_i == k).
/// Gradient flows only through kept entries.
template <typename T>
Var<T> threshold(const Var<T>& x, T k) {
  return detail::unary(
      x, [k](T v) { return v > k ? v : T(0); },
      [k](T v, T) { return v > k ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& x) {
  T total = T(0);
  for (T v : x.value().data()) total += v;
  const std::size_t ix = x.id();
  return x.graph().record(Tensor<T>::scalar(total), {x},
                          [ix](Graph<T>& g, std::size_t self) {
                            const T go = g.grad(self)[0];
                            for (T& v : g.grad(ix)) v += go;
                          });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

/// Population mean and standard deviation over rows of x[T x C].
/// The std gradient is taken as zero wherever std == 0.
template <typename T>
std::pair<Var<T>, Var<T>> reduce_mean_std(const Var<T>& x) {
  detail::require_rank(x, 2, "reduce_mean_std");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (rows == 0) throw ShapeError("reduce_mean_std: empty input");
  const auto& xv = x.value();
  // Deviations are taken from the first row so constant columns give
  // exactly zero spread.
  Tensor<T> shift_mean(Shape{cols}), mu(Shape{cols}), sd(Shape{cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) shift_mean[c] += xv.at(r, c) - xv.at(0, c);
  for (std::size_t c = 0; c < cols; ++c) {
    shift_mean[c] /= static_cast<T>(rows);
    mu[c] = xv.at(0, c) + shift_mean[c];
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const T d = (xv.at(r, c) - xv.at(0, c)) - shift_mean[c];
      sd[c] += d * d;
    }
  }
  for (std::size_t c = 0; c < cols; ++c)
    sd[c] = std::sqrt(sd[c] / static_cast<T>(rows));

  Graph<T>& graph = x.graph();
  const std::size_t ix = x.id();
  Var<T> mean_var = graph.record(
      std::move(mu), {x}, [ix, rows, cols](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        auto& gx = g.grad(ix);
        const T inv = T(1) / static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += go[c] * inv;
      });
  const std::size_t imean = mean_var.id();
  Var<T> std_var = graph.record(
      std::move(sd), {x}, [ix, imean, rows, cols](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        const auto& xv = g.value(ix);
        const auto& mu = g.value(imean);
        const auto& sd = g.value(self);
        auto& gx = g.grad(ix);
        const T inv = T(1) / static_cast<T>(rows);
        for (std::size_t c = 0; c < cols; ++c) {
          if (sd[c] == T(0)) continue;
          const T coef = go[c] * inv / sd[c];
          for (std::size_t r = 0; r < rows; ++r)
            gx[r * cols + c] += coef * (xv.at(r, c) - mu[c]);
        }
      });
  return {mean_var, std_var};
}

/// Rowwise dot product: out[t] = sum_c a[t, c] * v[c].
template <typename T>
Var<T> rows_dot(const Var<T>& a, const Var<T>& v) {
  detail::require_rank(a, 2, "rows_dot");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (v.size() != cols) throw ShapeError("rows_dot: vector length mismatch");
  Tensor<T> out(Shape{rows});
  const auto& av = a.value();
  auto vv = v.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (std::size_t c = 0; c < cols; ++c) acc += av.at(r, c) * vv[c];
    out[r] = acc;
  }
  const std::size_t ia = a.id(), iv = v.id();
  return a.graph().record(
      std::move(out), {a, v}, [ia, iv, rows, cols](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        const auto& av = g.value(ia);
        auto vv = g.value(iv).data();
        if (g.requires_grad(ia)) {
          auto& ga = g.grad(ia);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += go[r] * vv[c];
        }
        if (g.requires_grad(iv)) {
          auto& gv = g.grad(iv);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gv[c] += go[r] * av.at(r, c);
        }
      });
}

/// out[t, c] = w[t] * v[c].
template <typename T>
Var<T> outer(const Var<T>& w, const Var<T>& v) {
  detail::require_rank(w, 1, "outer");
  detail::require_rank(v, 1, "outer");
  const std::size_t rows = w.size(), cols = v.size();
  Tensor<T> out(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out.at(r, c) = w.value()[r] * v.value()[c];
  const std::size_t iw = w.id(), iv = v.id();
  return w.graph().record(
      std::move(out), {w, v}, [iw, iv, rows, cols](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        auto wv = g.value(iw).data();
        auto vv = g.value(iv).data();
        if (g.requires_grad(iw)) {
          auto& gw = g.grad(iw);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gw[r] += go[r * cols + c] * vv[c];
        }
        if (g.requires_grad(iv)) {
          auto& gv = g.grad(iv);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gv[c] += go[r * cols + c] * wv[r];
        }
      });
}

/// Repeats v[C] as `rows` identical rows.
template <typename T>
Var<T> broadcast_rows(const Var<T>& v, std::size_t rows) {
  detail::require_rank(v, 1, "broadcast_rows");
  const std::size_t cols = v.size();
  Tensor<T> out(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(v.value().data().begin(), v.value().data().end(),
              out.row(r).begin());
  const std::size_t iv = v.id();
  return v.graph().record(
      std::move(out), {v}, [iv, rows, cols](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        auto& gv = g.grad(iv);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gv[c] += go[r * cols + c];
      });
}

/// [a | b] along columns for matrices with equal row counts.
template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a, 2, "concat_cols");
  detail::require_rank(b, 2, "concat_cols");
  const std::size_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  if (b.dim(0) != rows) throw ShapeError("concat_cols: row counts differ");
  Tensor<T> out(Shape{rows, ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(a.value().row(r).begin(), a.value().row(r).end(),
              out.row(r).begin());
    std::copy(b.value().row(r).begin(), b.value().row(r).end(),
              out.row(r).begin() + ca);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(
      std::move(out), {a, b}, [ia, ib, rows, ca, cb](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        const std::size_t w = ca + cb;
        if (g.requires_grad(ia)) {
          auto& ga = g.grad(ia);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] += go[r * w + c];
        }
        if (g.requires_grad(ib)) {
          auto& gb = g.grad(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cb; ++c) gb[r * cb + c] += go[r * w + ca + c];
        }
      });
}

/// Concatenation of two vectors.
template <typename T>
Var<T> concat(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a, 1, "concat");
  detail::require_rank(b, 1, "concat");
  std::vector<T> data(a.value().data().begin(), a.value().data().end());
  data.insert(data.end(), b.value().data().begin(), b.value().data().end());
  const std::size_t na = a.size();
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(
      Tensor<T>(Shape{na + b.size()}, std::move(data)), {a, b},
      [ia, ib, na](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        if (g.requires_grad(ia)) {
          auto& ga = g.grad(ia);
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
        }
        if (g.requires_grad(ib)) {
          auto& gb = g.grad(ib);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[na + i];
        }
      });
}

/// Scalar x[index] of the flattened tensor.
template <typename T>
Var<T> pick(const Var<T>& x, std::size_t index) {
  if (index >= x.size()) throw ShapeError("pick: index out of range");
  const std::size_t ix = x.id();
  return x.graph().record(Tensor<T>::scalar(x.value()[index]), {x},
                          [ix, index](Graph<T>& g, std::size_t self) {
                            g.grad(ix)[index] += g.grad(self)[0];
                          });
}

/// Row r of a matrix as a vector.
template <typename T>
Var<T> row(const Var<T>& x, std::size_t r) {
  detail::require_rank(x, 2, "row");
  const std::size_t cols = x.dim(1);
  auto src = x.value().row(r);
  const std::size_t ix = x.id();
  return x.graph().record(
      Tensor<T>(Shape{cols}, std::vector<T>(src.begin(), src.end())), {x},
      [ix, r, cols](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        auto& gx = g.grad(ix);
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += go[c];
      });
}

/// out[t, j] = x[t, index[j]].
template <typename T>
Var<T> gather_cols(const Var<T>& x, std::vector<std::size_t> index) {
  detail::require_rank(x, 2, "gather_cols");
  const std::size_t rows = x.dim(0), cols = x.dim(1), n = index.size();
  for (std::size_t j : index)
    if (j >= cols) throw ShapeError("gather_cols: index out of range");
  Tensor<T> out(Shape{rows, n});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out.at(r, j) = x.value().at(r, index[j]);
  const std::size_t ix = x.id();
  return x.graph().record(
      std::move(out), {x},
      [ix, rows, cols, n, index = std::move(index)](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        auto& gx = g.grad(ix);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gx[r * cols + index[j]] += go[r * n + j];
      });
}

/// out[i] = x[i - k] where keep[i] and i >= k, otherwise `fill`.
template <typename T>
Var<T> shift_right(const Var<T>& x, std::size_t k, const std::vector<bool>& keep,
                   T fill) {
  detail::require_rank(x, 1, "shift_right");
  const std::size_t n = x.size();
  Tensor<T> out(Shape{n}, fill);
  std::vector<bool> used(n, false);
  for (std::size_t i = k; i < n; ++i) {
    if (!keep.empty() && !keep[i]) continue;
    out[i] = x.value()[i - k];
    used[i] = true;
  }
  const std::size_t ix = x.id();
  return x.graph().record(
      std::move(out), {x}, [ix, k, used = std::move(used)](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        auto& gx = g.grad(ix);
        for (std::size_t i = 0; i < used.size(); ++i)
          if (used[i]) gx[i - k] += go[i];
      });
}

/// Elementwise log(exp(a) + exp(b)); entries with both inputs -inf stay -inf
/// and pass zero gradient.
template <typename T>
Var<T> logaddexp(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "logaddexp");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = log_add(a.value()[i], b.value()[i]);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(
      std::move(out), {a, b}, [ia, ib](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        const auto& y = g.value(self);
        for (std::size_t in : {ia, ib}) {
          if (!g.requires_grad(in)) continue;
          const auto& xv = g.value(in);
          auto& gx = g.grad(in);
          for (std::size_t i = 0; i < gx.size(); ++i) {
            if (y[i] == neg_inf<T>() || xv[i] == neg_inf<T>()) continue;
            gx[i] += go[i] * std::exp(xv[i] - y[i]);
          }
        }
      });
}

/// log(sum(exp(x))) over all entries.
template <typename T>
Var<T> logsumexp(const Var<T>& x) {
  T m = neg_inf<T>();
  for (T v : x.value().data()) m = std::max(m, v);
  T total = neg_inf<T>();
  if (m != neg_inf<T>()) {
    T acc = T(0);
    for (T v : x.value().data()) acc += std::exp(v - m);
    total = m + std::log(acc);
  }
  const std::size_t ix = x.id();
  return x.graph().record(
      Tensor<T>::scalar(total), {x}, [ix](Graph<T>& g, std::size_t self) {
        const T go = g.grad(self)[0];
        const T y = g.value(self)[0];
        if (y == neg_inf<T>()) return;
        const auto& xv = g.value(ix);
        auto& gx = g.grad(ix);
        for (std::size_t i = 0; i < gx.size(); ++i) {
          if (xv[i] == neg_inf<T>()) continue;
          gx[i] += go * std::exp(xv[i] - y);
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization, softmax

namespace detail {

template <typename T>
void softmax_row(std::span<const T> in, std::span<T> out) {
  T m = *std::max_element(in.begin(), in.end());
  T total = T(0);
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp(in[i] - m);
    total += out[i];
  }
  for (T& v : out) v /= total;
}

inline std::pair<std::size_t, std::size_t> as_rows(const Shape& s) {
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return {s[0], s[1]};
  throw ShapeError("expected a vector or matrix, got " + shape_string(s));
}

}  // namespace detail

/// Softmax over the last axis (a vector is a single row).
template <typename T>
Var<T> softmax(const Var<T>& x) {
  const auto [rows, cols] = detail::as_rows(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    detail::softmax_row<T>(x.value().data().subspan(r * cols, cols),
                           out.data().subspan(r * cols, cols));
  }
  const std::size_t ix = x.id();
  return x.graph().record(
      std::move(out), {x}, [ix, rows, cols](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        const auto& y = g.value(self);
        auto& gx = g.grad(ix);
        for (std::size_t r = 0; r < rows; ++r) {
          T dot = T(0);
          for (std::size_t c = 0; c < cols; ++c) dot += go[r * cols + c] * y[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c)
            gx[r * cols + c] += y[r * cols + c] * (go[r * cols + c] - dot);
        }
      });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x) {
  const auto [rows, cols] = detail::as_rows(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = x.value().data().subspan(r * cols, cols);
    const T m = *std::max_element(in.begin(), in.end());
    T total = T(0);
    for (T v : in) total += std::exp(v - m);
    const T lse = m + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = in[c] - lse;
  }
  const std::size_t ix = x.id();
  return x.graph().record(
      std::move(out), {x}, [ix, rows, cols](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        const auto& y = g.value(self);
        auto& gx = g.grad(ix);
        for (std::size_t r = 0; r < rows; ++r) {
          T total = T(0);
          for (std::size_t c = 0; c < cols; ++c) total += go[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c)
            gx[r * cols + c] += go[r * cols + c] - std::exp(y[r * cols + c]) * total;
        }
      });
}

/// Per-row layer normalization with affine gamma/beta of the row width.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  T eps = T(1e-5)) {
  detail::require_rank(x, 2, "layer_norm");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (gamma.size() != cols || beta.size() != cols)
    throw ShapeError("layer_norm: affine parameters do not match row width");
  Tensor<T> out(x.shape());
  std::vector<T> xhat(rows * cols), inv_std(rows);
  const auto& xv = x.value();
  auto gv = gamma.value().data();
  auto bv = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T mu = T(0);
    for (std::size_t c = 0; c < cols; ++c) mu += xv.at(r, c);
    mu /= static_cast<T>(cols);
    T var = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      const T d = xv.at(r, c) - mu;
      var += d * d;
    }
    var /= static_cast<T>(cols);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (xv.at(r, c) - mu) * inv_std[r];
      xhat[r * cols + c] = h;
      out.at(r, c) = h * gv[c] + bv[c];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.graph().record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, rows, cols, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        auto gv = g.value(ig).data();
        if (g.requires_grad(ig)) {
          auto& gg = g.grad(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gg[c] += go[r * cols + c] * xhat[r * cols + c];
        }
        if (g.requires_grad(ib)) {
          auto& gb = g.grad(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gb[c] += go[r * cols + c];
        }
        if (g.requires_grad(ix)) {
          auto& gx = g.grad(ix);
          const T n = static_cast<T>(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            T s1 = T(0), s2 = T(0);
            for (std::size_t c = 0; c < cols; ++c) {
              const T dh = go[r * cols + c] * gv[c];
              s1 += dh;
              s2 += dh * xhat[r * cols + c];
            }
            for (std::size_t c = 0; c < cols; ++c) {
              const T dh = go[r * cols + c] * gv[c];
              gx[r * cols + c] +=
                  inv_std[r] * (dh - s1 / n - xhat[r * cols + c] * s2 / n);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution, attention, dropout

/// Valid 1-D convolution: x[Cin x L], w[Cout x Cin x K] -> [Cout x L'],
/// L' = floor((L - K) / stride) + 1.
template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& w, std::size_t stride) {
  detail::require_rank(x, 2, "conv1d");
  detail::require_rank(w, 3, "conv1d");
  if (stride < 1) throw ConfigError("conv1d: stride must be >= 1");
  const std::size_t cin = x.dim(0), len = x.dim(1);
  const std::size_t cout = w.dim(0), kernel = w.dim(2);
  if (w.dim(1) != cin) throw ShapeError("conv1d: channel mismatch");
  if (len < kernel) {
    throw ShapeError("conv1d: input length " + std::to_string(len) +
                     " shorter than kernel " + std::to_string(kernel));
  }
  const std::size_t out_len = (len - kernel) / stride + 1;
  const std::size_t patch = cin * kernel;
  // cols[t, c * K + k] = x[c, t * stride + k]
  std::vector<T> cols(out_len * patch);
  const auto& xv = x.value();
  for (std::size_t t = 0; t < out_len; ++t)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t k = 0; k < kernel; ++k)
        cols[t * patch + c * kernel + k] = xv[c * len + t * stride + k];
  // out[o, t] = sum_p w[o, p] * cols[t, p]
  Tensor<T> out(Shape{cout, out_len});
  detail::gemm_nt(w.value().data().data(), cols.data(), out.data().data(), cout,
                  patch, out_len);
  const std::size_t ix = x.id(), iw = w.id();
  return x.graph().record(
      std::move(out), {x, w},
      [ix, iw, cin, len, cout, kernel, stride, out_len, patch,
       cols = std::move(cols)](Graph<T>& g, std::size_t self) {
        const T* go = g.grad(self).data();
        if (g.requires_grad(iw)) {
          // dW[o, p] += sum_t go[o, t] * cols[t, p]
          detail::gemm_nn(go, cols.data(), g.grad(iw).data(), cout, out_len, patch);
        }
        if (g.requires_grad(ix)) {
          // dcols[t, p] = sum_o go[o, t] * w[o, p]
          std::vector<T> dcols(out_len * patch, T(0));
          detail::gemm_tn(go, g.value(iw).data().data(), dcols.data(), out_len,
                          cout, patch);
          auto& gx = g.grad(ix);
          for (std::size_t t = 0; t < out_len; ++t)
            for (std::size_t c = 0; c < cin; ++c)
              for (std::size_t k = 0; k < kernel; ++k)
                gx[c * len + t * stride + k] += dcols[t * patch + c * kernel + k];
        }
      });
}

/// Multi-head scaled dot-product self-attention on projected q, k, v [T x D].
/// Heads are contiguous column blocks of width D / heads.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                 std::size_t heads) {
  detail::require_rank(q, 2, "attention");
  detail::require_same_shape(q, k, "attention");
  detail::require_same_shape(q, v, "attention");
  const std::size_t steps = q.dim(0), width = q.dim(1);
  if (heads == 0 || width % heads != 0)
    throw ConfigError("attention: model width " + std::to_string(width) +
                      " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t hd = width / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(hd));
  // probs[h, i, j]
  std::vector<T> probs(heads * steps * steps);
  Tensor<T> out(Shape{steps, width});
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  std::vector<T> scores(steps);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < steps; ++i) {
      T m = neg_inf<T>();
      for (std::size_t j = 0; j < steps; ++j) {
        T acc = T(0);
        for (std::size_t d = 0; d < hd; ++d)
          acc += qv[i * width + off + d] * kv[j * width + off + d];
        scores[j] = acc * scale_factor;
        m = std::max(m, scores[j]);
      }
      T total = T(0);
      for (std::size_t j = 0; j < steps; ++j) {
        scores[j] = std::exp(scores[j] - m);
        total += scores[j];
      }
      T* p = probs.data() + (h * steps + i) * steps;
      T* o = out.data().data() + i * width + off;
      for (std::size_t j = 0; j < steps; ++j) {
        p[j] = scores[j] / total;
        const T* vj = vv.data().data() + j * width + off;
        for (std::size_t d = 0; d < hd; ++d) o[d] += p[j] * vj[d];
      }
    }
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.graph().record(
      std::move(out), {q, k, v},
      [iq, ik, iv, steps, width, heads, hd, scale_factor,
       probs = std::move(probs)](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad(self);
        const auto& qv = g.value(iq);
        const auto& kv = g.value(ik);
        const auto& vv = g.value(iv);
        const bool need_q = g.requires_grad(iq);
        const bool need_k = g.requires_grad(ik);
        const bool need_v = g.requires_grad(iv);
        std::vector<T> dp(steps);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * hd;
          for (std::size_t i = 0; i < steps; ++i) {
            const T* p = probs.data() + (h * steps + i) * steps;
            const T* goi = go.data() + i * width + off;
            T dot = T(0);
            for (std::size_t j = 0; j < steps; ++j) {
              T acc = T(0);
              for (std::size_t d = 0; d < hd; ++d)
                acc += goi[d] * vv[j * width + off + d];
              dp[j] = acc;
              dot += acc * p[j];
            }
            if (need_v) {
              auto& gv = g.grad(iv);
              for (std::size_t j = 0; j < steps; ++j)
                for (std::size_t d = 0; d < hd; ++d)
                  gv[j * width + off + d] += p[j] * goi[d];
            }
            for (std::size_t j = 0; j < steps; ++j) {
              const T ds = p[j] * (dp[j] - dot) * scale_factor;
              if (ds == T(0)) continue;
              if (need_q) {
                auto& gq = g.grad(iq);
                for (std::size_t d = 0; d < hd; ++d)
                  gq[i * width + off + d] += ds * kv[j * width + off + d];
              }
              if (need_k) {
                auto& gk = g.grad(ik);
                for (std::size_t d = 0; d < hd; ++d)
                  gk[j * width + off + d] += ds * qv[i * width + off + d];
              }
            }
          }
        }
      });
}

/// Inverted dropout with a mask drawn from `rng`. Identity when rate == 0.
template <typename T>
Var<T> dropout(const Var<T>& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  const T keep_scale = T(1) / static_cast<T>(1.0 - rate);
  std::vector<T> mask(x.size());
  for (T& m : mask) m = uniform01(rng) < rate ? T(0) : keep_scale;
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] *= mask[i];
  const std::size_t ix = x.id();
  return x.graph().record(std::move(out), {x},
                          [ix, mask = std::move(mask)](Graph<T>& g, std::size_t self) {
                            const auto& go = g.grad(self);
                            auto& gx = g.grad(ix);
                            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * mask[i];
                          });
}

}  // namespace accentctc
