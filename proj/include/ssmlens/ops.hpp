// SPDX-License-Identifier: Apache-2.0
//
// Elementary tensor math. All reductions run in ascending index order so
// results are reproducible bit-for-bit across call sites.

#pragma once

#include <algorithm>
#include <cmath>

#include "ssmlens/tensor.hpp"

namespace ssmlens::ops {

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimError("matmul shape mismatch: " + shape_str(a.shape()) + " * " +
                   shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<T> c({m, n});
  for (int i = 0; i < m; ++i) {
    T* ci = c.data() + static_cast<size_t>(i) * n;
    for (int t = 0; t < k; ++t) {
      const T aik = a(i, t);
      const T* bt = b.data() + static_cast<size_t>(t) * n;
      for (int j = 0; j < n; ++j) ci[j] += aik * bt[j];
    }
  }
  ensure_finite(c, "matmul");
  return c;
}

// a[m x k] * b[n x k]^T -> [m x n]. Row-major friendly when b holds weights
// as [out x in]. b is transposed up front so the inner loop runs axpy-style
// over contiguous rows; per-element accumulation still walks t in ascending
// order, the same order a naive dot loop would use.
template <typename T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimError("matmul_nt shape mismatch: " + shape_str(a.shape()) + " * " +
                   shape_str(b.shape()) + "^T");
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<T> bt(static_cast<size_t>(k) * n);
  for (int j = 0; j < n; ++j)
    for (int t = 0; t < k; ++t) bt[static_cast<size_t>(t) * n + j] = b(j, t);
  TensorT<T> c({m, n});
  for (int i = 0; i < m; ++i) {
    const T* ai = a.data() + static_cast<size_t>(i) * k;
    T* ci = c.data() + static_cast<size_t>(i) * n;
    for (int t = 0; t < k; ++t) {
      const T ait = ai[t];
      const T* btr = bt.data() + static_cast<size_t>(t) * n;
      for (int j = 0; j < n; ++j) ci[j] += ait * btr[j];
    }
  }
  ensure_finite(c, "matmul_nt");
  return c;
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
  if (a.rank() != 2) throw DimError("transpose expects rank 2");
  TensorT<T> t({a.dim(1), a.dim(0)});
  for (int i = 0; i < a.dim(0); ++i)
    for (int j = 0; j < a.dim(1); ++j) t(j, i) = a(i, j);
  return t;
}

// Depthwise causal conv. out[t,d] = bias[d] + sum_j w[d,j] * x[t-K+1+j, d],
// zero left padding. Position t never sees inputs past t.
template <typename T>
TensorT<T> causal_conv1d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias) {
  if (x.rank() != 2 || w.rank() != 2 || bias.rank() != 1) {
    throw DimError("causal_conv1d expects x[TxD], w[DxK], bias[D]");
  }
  const int seq = x.dim(0), d = x.dim(1), k = w.dim(1);
  if (w.dim(0) != d || bias.dim(0) != d) {
    throw DimError("causal_conv1d channel mismatch: x " + shape_str(x.shape()) + " w " +
                   shape_str(w.shape()));
  }
  if (k <= 0) throw DimError("causal_conv1d kernel width must be positive");
  TensorT<T> out({seq, d});
  for (int t = 0; t < seq; ++t) {
    for (int c = 0; c < d; ++c) {
      T acc = bias[c];
      for (int j = 0; j < k; ++j) {
        const int src = t - k + 1 + j;
        if (src >= 0) acc += w(c, j) * x(src, c);
      }
      out(t, c) = acc;
    }
  }
  ensure_finite(out, "causal_conv1d");
  return out;
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
TensorT<T> silu(const TensorT<T>& x) {
  TensorT<T> out(x.shape());
  for (size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * sigmoid(x[i]);
  ensure_finite(out, "silu");
  return out;
}

template <typename T>
T softplus(T x) {
  // log1p(exp(x)) overflows past ~88 in f32; linear tail is exact there.
  return x > T(20) ? x : std::log1p(std::exp(x));
}

template <typename T>
TensorT<T> softplus(const TensorT<T>& x) {
  TensorT<T> out(x.shape());
  for (size_t i = 0; i < x.numel(); ++i) out[i] = softplus(x[i]);
  ensure_finite(out, "softplus");
  return out;
}

// Max-subtracted softmax over a vector.
template <typename T>
TensorT<T> softmax(const TensorT<T>& x) {
  if (x.rank() != 1) throw DimError("softmax expects rank 1");
  const int n = x.dim(0);
  TensorT<T> out({n});
  T mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  T z = 0;
  for (int i = 0; i < n; ++i) {
    out[i] = std::exp(x[i] - mx);
    z += out[i];
  }
  for (int i = 0; i < n; ++i) out[i] /= z;
  ensure_finite(out, "softmax");
  return out;
}

inline constexpr double kRmsEps = 1e-5;

template <typename T>
TensorT<T> rmsnorm(const TensorT<T>& x, const TensorT<T>& gain) {
  if (x.rank() != 1 || !x.same_shape(gain)) {
    throw DimError("rmsnorm expects x[D], gain[D]");
  }
  const int d = x.dim(0);
  T ms = 0;
  for (int i = 0; i < d; ++i) ms += x[i] * x[i];
  ms /= T(d);
  const T inv = T(1) / std::sqrt(ms + T(kRmsEps));
  TensorT<T> out({d});
  for (int i = 0; i < d; ++i) out[i] = gain[i] * x[i] * inv;
  ensure_finite(out, "rmsnorm");
  return out;
}

// Row-wise rmsnorm for [T x D] activations.
template <typename T>
TensorT<T> rmsnorm_rows(const TensorT<T>& x, const TensorT<T>& gain) {
  if (x.rank() != 2 || gain.rank() != 1 || x.dim(1) != gain.dim(0)) {
    throw DimError("rmsnorm_rows expects x[TxD], gain[D]");
  }
  const int rows = x.dim(0), d = x.dim(1);
  TensorT<T> out({rows, d});
  for (int r = 0; r < rows; ++r) {
    T ms = 0;
    for (int i = 0; i < d; ++i) ms += x(r, i) * x(r, i);
    ms /= T(d);
    const T inv = T(1) / std::sqrt(ms + T(kRmsEps));
    for (int i = 0; i < d; ++i) out(r, i) = gain[i] * x(r, i) * inv;
  }
  ensure_finite(out, "rmsnorm_rows");
  return out;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) throw DimError("add shape mismatch");
  TensorT<T> out(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  ensure_finite(out, "add");
  return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) throw DimError("sub shape mismatch");
  TensorT<T> out(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  ensure_finite(out, "sub");
  return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) throw DimError("mul shape mismatch");
  TensorT<T> out(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  ensure_finite(out, "mul");
  return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
  TensorT<T> out(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
  ensure_finite(out, "scale");
  return out;
}

template <typename T>
T dot(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) throw DimError("dot shape mismatch");
  T acc = 0;
  for (size_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T norm2(const TensorT<T>& a) {
  return std::sqrt(dot(a, a));
}

}  // namespace ssmlens::ops
