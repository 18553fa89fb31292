// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode tape. Ops append nodes in evaluation order, so walking node
// ids backwards is a reverse topological sweep. A tape lives for one forward
// pass; recorded tensors are never mutated in place.
//
// Only the primitives the model needs are provided. With grad disabled the
// same ops run as a plain evaluator and skip closure bookkeeping.

#pragma once

#include <cstring>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ssmlens/ops.hpp"
#include "ssmlens/tensor.hpp"

namespace ssmlens {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_(grad_enabled) {}

  bool grad_enabled() const { return grad_; }

  // When false, param() leaves stop requiring gradients. Used to optimize a
  // single injected variable against a frozen model.
  void set_params_trainable(bool v) { params_trainable_ = v; }

  // --- node creation ---------------------------------------------------

  // Trainable leaf backed by external storage (model parameters).
  Var param(const TensorT<T>* p) {
    auto it = leaf_cache_.find(p);
    if (it != leaf_cache_.end()) return Var{it->second};
    const int id = push_leaf(p, /*requires_grad=*/grad_ && params_trainable_);
    leaf_cache_.emplace(p, id);
    return Var{id};
  }

  // Non-trainable leaf backed by external storage.
  Var constant_ref(const TensorT<T>* p) {
    auto it = const_cache_.find(p);
    if (it != const_cache_.end()) return Var{it->second};
    const int id = push_leaf(p, /*requires_grad=*/false);
    const_cache_.emplace(p, id);
    return Var{id};
  }

  // Non-trainable owned leaf.
  Var constant(TensorT<T> v) { return Var{push_owned(std::move(v), false)}; }

  // Trainable owned leaf (optimization variables such as an edit value).
  Var variable(TensorT<T> v) { return Var{push_owned(std::move(v), grad_)}; }

  const TensorT<T>& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.ext ? *n.ext : n.value;
  }

  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient buffer of a node; zeros if the node was never touched by
  // backward (leaves off the loss path keep exactly-zero gradients).
  const TensorT<T>& grad(Var v) {
    return grad_buffer(v.id);
  }

  // Gradient of an external-storage leaf, or nullptr when the leaf was never
  // registered or never reached by backward (i.e. the gradient is zero).
  const TensorT<T>* grad_of(const TensorT<T>* p) const {
    auto it = leaf_cache_.find(p);
    if (it == leaf_cache_.end()) return nullptr;
    if (static_cast<size_t>(it->second) >= grads_.size()) return nullptr;
    const TensorT<T>& g = grads_[it->second];
    return g.numel() ? &g : nullptr;
  }

  size_t size() const { return nodes_.size(); }

  // --- backward ---------------------------------------------------------

  // Gradient of a scalar loss w.r.t. every node that feeds it.
  void backward(Var loss) {
    const TensorT<T>& lv = value(loss);
    if (!lv.is_scalar()) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_str(lv.shape()));
    }
    zero_grads();
    grad_buffer(loss.id)[0] = T(1);
    sweep(loss.id);
  }

  // Gradient of one component of a vector-valued node. Used to assemble
  // Jacobians row by row from a single recorded forward pass.
  void backward_component(Var out, size_t component) {
    const TensorT<T>& ov = value(out);
    if (component >= ov.numel()) throw ContractError("backward_component index out of range");
    zero_grads();
    grad_buffer(out.id)[component] = T(1);
    sweep(out.id);
  }

  // --- ops ----------------------------------------------------------------

  Var add(Var a, Var b) {
    TensorT<T> out = ops::add(value(a), value(b));
    return record(std::move(out), {a, b}, [this, a, b](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      if (requires_grad(a)) accumulate(a, gy);
      if (requires_grad(b)) accumulate(b, gy);
    });
  }

  Var sub(Var a, Var b) {
    TensorT<T> out = ops::sub(value(a), value(b));
    return record(std::move(out), {a, b}, [this, a, b](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      if (requires_grad(a)) accumulate(a, gy);
      if (requires_grad(b)) {
        TensorT<T>& gb = grad_buffer(b.id);
        for (size_t i = 0; i < gy.numel(); ++i) gb[i] -= gy[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    TensorT<T> out = ops::mul(value(a), value(b));
    return record(std::move(out), {a, b}, [this, a, b](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      const TensorT<T>& av = value(a);
      const TensorT<T>& bv = value(b);
      if (requires_grad(a)) {
        TensorT<T>& ga = grad_buffer(a.id);
        for (size_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * bv[i];
      }
      if (requires_grad(b)) {
        TensorT<T>& gb = grad_buffer(b.id);
        for (size_t i = 0; i < gy.numel(); ++i) gb[i] += gy[i] * av[i];
      }
    });
  }

  Var scale(Var a, T s) {
    TensorT<T> out = ops::scale(value(a), s);
    return record(std::move(out), {a}, [this, a, s](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      TensorT<T>& ga = grad_buffer(a.id);
      for (size_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * s;
    });
  }

  Var matmul(Var a, Var b) {
    TensorT<T> out = ops::matmul(value(a), value(b));
    return record(std::move(out), {a, b}, [this, a, b](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      const TensorT<T>& av = value(a);
      const TensorT<T>& bv = value(b);
      const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
      if (requires_grad(a)) {  // dA += dC * B^T
        TensorT<T>& ga = grad_buffer(a.id);
        for (int i = 0; i < m; ++i)
          for (int t = 0; t < k; ++t) {
            T acc = 0;
            for (int j = 0; j < n; ++j) acc += gy(i, j) * bv(t, j);
            ga(i, t) += acc;
          }
      }
      if (requires_grad(b)) {  // dB += A^T * dC
        TensorT<T>& gb = grad_buffer(b.id);
        for (int t = 0; t < k; ++t)
          for (int j = 0; j < n; ++j) {
            T acc = 0;
            for (int i = 0; i < m; ++i) acc += av(i, t) * gy(i, j);
            gb(t, j) += acc;
          }
      }
    });
  }

  // y = a * b^T with b stored [out x in].
  Var matmul_nt(Var a, Var b) {
    TensorT<T> out = ops::matmul_nt(value(a), value(b));
    return record(std::move(out), {a, b}, [this, a, b](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      const TensorT<T>& av = value(a);
      const TensorT<T>& bv = value(b);
      const int m = av.dim(0), k = av.dim(1), n = bv.dim(0);
      if (requires_grad(a)) {  // dA += dY * B
        TensorT<T>& ga = grad_buffer(a.id);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const T g = gy(i, j);
            for (int t = 0; t < k; ++t) ga(i, t) += g * bv(j, t);
          }
      }
      if (requires_grad(b)) {  // dB += dY^T * A
        TensorT<T>& gb = grad_buffer(b.id);
        for (int j = 0; j < n; ++j)
          for (int i = 0; i < m; ++i) {
            const T g = gy(i, j);
            for (int t = 0; t < k; ++t) gb(j, t) += g * av(i, t);
          }
      }
    });
  }

  // Row gather: y[t] = table[ids[t]].
  Var rows(Var table, const std::vector<int>& ids) {
    const TensorT<T>& tv = value(table);
    if (tv.rank() != 2) throw DimError("rows expects a rank-2 table");
    const int d = tv.dim(1);
    TensorT<T> out({static_cast<int>(ids.size()), d});
    for (size_t t = 0; t < ids.size(); ++t) {
      if (ids[t] < 0 || ids[t] >= tv.dim(0)) throw ContractError("row index out of range");
      std::memcpy(out.data() + t * d, tv.data() + static_cast<size_t>(ids[t]) * d,
                  sizeof(T) * d);
    }
    return record(std::move(out), {table}, [this, table, ids, d](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      TensorT<T>& gt = grad_buffer(table.id);
      for (size_t t = 0; t < ids.size(); ++t)
        for (int i = 0; i < d; ++i) gt(ids[t], i) += gy(static_cast<int>(t), i);
    });
  }

  // Depthwise causal conv. With block_len > 0 the input rows are independent
  // sequences of that length (stacked training batches); padding never leaks
  // across block boundaries.
  Var causal_conv1d(Var x, Var w, Var bias, int block_len = 0) {
    const TensorT<T>& xv0 = value(x);
    const int rows = xv0.dim(0);
    const int block = block_len > 0 ? block_len : rows;
    if (rows % block != 0) throw DimError("causal_conv1d rows not divisible by block_len");
    TensorT<T> out;
    if (block == rows) {
      out = ops::causal_conv1d(xv0, value(w), value(bias));
    } else {
      const TensorT<T>& wv = value(w);
      const TensorT<T>& bv = value(bias);
      const int d = xv0.dim(1), k = wv.dim(1);
      out = TensorT<T>({rows, d});
      for (int t = 0; t < rows; ++t) {
        const int start = (t / block) * block;
        for (int c = 0; c < d; ++c) {
          T acc = bv[c];
          for (int j = 0; j < k; ++j) {
            const int src = t - k + 1 + j;
            if (src >= start) acc += wv(c, j) * xv0(src, c);
          }
          out(t, c) = acc;
        }
      }
      ensure_finite(out, "causal_conv1d");
    }
    return record(std::move(out), {x, w, bias}, [this, x, w, bias, block](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      const TensorT<T>& xv = value(x);
      const TensorT<T>& wv = value(w);
      const int seq = xv.dim(0), d = xv.dim(1), k = wv.dim(1);
      if (requires_grad(x)) {
        TensorT<T>& gx = grad_buffer(x.id);
        for (int t = 0; t < seq; ++t) {
          const int start = (t / block) * block;
          for (int c = 0; c < d; ++c)
            for (int j = 0; j < k; ++j) {
              const int src = t - k + 1 + j;
              if (src >= start) gx(src, c) += wv(c, j) * gy(t, c);
            }
        }
      }
      if (requires_grad(w)) {
        TensorT<T>& gw = grad_buffer(w.id);
        for (int t = 0; t < seq; ++t) {
          const int start = (t / block) * block;
          for (int c = 0; c < d; ++c)
            for (int j = 0; j < k; ++j) {
              const int src = t - k + 1 + j;
              if (src >= start) gw(c, j) += xv(src, c) * gy(t, c);
            }
        }
      }
      if (requires_grad(bias)) {
        TensorT<T>& gb = grad_buffer(bias.id);
        for (int t = 0; t < seq; ++t)
          for (int c = 0; c < d; ++c) gb[c] += gy(t, c);
      }
    });
  }

  Var silu(Var x) {
    TensorT<T> out = ops::silu(value(x));
    return record(std::move(out), {x}, [this, x](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      const TensorT<T>& xv = value(x);
      TensorT<T>& gx = grad_buffer(x.id);
      for (size_t i = 0; i < xv.numel(); ++i) {
        const T s = ops::sigmoid(xv[i]);
        gx[i] += gy[i] * (s + xv[i] * s * (T(1) - s));
      }
    });
  }

  Var softplus(Var x) {
    TensorT<T> out = ops::softplus(value(x));
    return record(std::move(out), {x}, [this, x](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      const TensorT<T>& xv = value(x);
      TensorT<T>& gx = grad_buffer(x.id);
      for (size_t i = 0; i < xv.numel(); ++i) gx[i] += gy[i] * ops::sigmoid(xv[i]);
    });
  }

  Var exp(Var x) {
    const TensorT<T>& xv = value(x);
    TensorT<T> out(xv.shape());
    for (size_t i = 0; i < xv.numel(); ++i) out[i] = std::exp(xv[i]);
    ensure_finite(out, "exp");
    return record(std::move(out), {x}, [this, x](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      const TensorT<T>& yv = value(y);
      TensorT<T>& gx = grad_buffer(x.id);
      for (size_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i] * yv[i];
    });
  }

  Var rmsnorm_rows(Var x, Var gain) {
    TensorT<T> out = ops::rmsnorm_rows(value(x), value(gain));
    return record(std::move(out), {x, gain}, [this, x, gain](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      const TensorT<T>& xv = value(x);
      const TensorT<T>& gv = value(gain);
      const int rows = xv.dim(0), d = xv.dim(1);
      for (int r = 0; r < rows; ++r) {
        T ms = 0;
        for (int i = 0; i < d; ++i) ms += xv(r, i) * xv(r, i);
        ms /= T(d);
        const T inv = T(1) / std::sqrt(ms + T(ops::kRmsEps));
        if (requires_grad(x)) {
          T mixed = 0;  // sum_j dy_j g_j x_j
          for (int j = 0; j < d; ++j) mixed += gy(r, j) * gv[j] * xv(r, j);
          const T coef = -mixed * inv * inv * inv / T(d);
          TensorT<T>& gx = grad_buffer(x.id);
          for (int i = 0; i < d; ++i) gx(r, i) += gv[i] * inv * gy(r, i) + coef * xv(r, i);
        }
        if (requires_grad(gain)) {
          TensorT<T>& gg = grad_buffer(gain.id);
          for (int i = 0; i < d; ++i) gg[i] += xv(r, i) * inv * gy(r, i);
        }
      }
    });
  }

  // y[t] = x[t] + bias for every row t.
  Var add_rowwise(Var x, Var bias) {
    const TensorT<T>& xv = value(x);
    const TensorT<T>& bv = value(bias);
    if (xv.rank() != 2 || bv.rank() != 1 || xv.dim(1) != bv.dim(0)) {
      throw DimError("add_rowwise expects x[TxD], bias[D]");
    }
    const int rows = xv.dim(0), d = xv.dim(1);
    TensorT<T> out(xv.shape());
    for (int t = 0; t < rows; ++t)
      for (int i = 0; i < d; ++i) out(t, i) = xv(t, i) + bv[i];
    ensure_finite(out, "add_rowwise");
    return record(std::move(out), {x, bias}, [this, x, bias, rows, d](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      if (requires_grad(x)) accumulate(x, gy);
      if (requires_grad(bias)) {
        TensorT<T>& gb = grad_buffer(bias.id);
        for (int t = 0; t < rows; ++t)
          for (int i = 0; i < d; ++i) gb[i] += gy(t, i);
      }
    });
  }

  // Selective scan. Inputs: conv activations c[T x E], positive step sizes
  // delta[T x E], input/output mixers b[T x N], cmat[T x N], state decay
  // a[E x N] (negative), skip d_skip[E]. One node; backward is hand-rolled
  // BPTT over the recurrence. With block_len > 0 the state resets every
  // block_len rows (stacked independent sequences).
  Var ssm_scan(Var c, Var delta, Var b, Var cmat, Var a, Var d_skip, int block_len = 0) {
    const TensorT<T>& cv = value(c);
    const TensorT<T>& dv = value(delta);
    const TensorT<T>& bv = value(b);
    const TensorT<T>& cmv = value(cmat);
    const TensorT<T>& av = value(a);
    const TensorT<T>& skv = value(d_skip);
    const int seq = cv.dim(0), e_dim = cv.dim(1), n_dim = av.dim(1);
    if (dv.dim(0) != seq || dv.dim(1) != e_dim || bv.dim(0) != seq || bv.dim(1) != n_dim ||
        cmv.dim(0) != seq || cmv.dim(1) != n_dim || av.dim(0) != e_dim ||
        skv.dim(0) != e_dim) {
      throw DimError("ssm_scan shape mismatch");
    }
    const int block = block_len > 0 ? block_len : seq;
    if (seq % block != 0) throw DimError("ssm_scan rows not divisible by block_len");

    // states[t] holds the post-update state; decays[t] the per-step factors.
    // Both are kept for backward so the sweep never recomputes exp().
    auto states = std::make_shared<std::vector<T>>(
        static_cast<size_t>(seq) * e_dim * n_dim, T(0));
    auto decays = std::make_shared<std::vector<T>>(
        static_cast<size_t>(seq) * e_dim * n_dim, T(0));
    TensorT<T> out({seq, e_dim});
    std::vector<T> prev(static_cast<size_t>(e_dim) * n_dim, T(0));
    for (int t = 0; t < seq; ++t) {
      if (t % block == 0) std::fill(prev.begin(), prev.end(), T(0));
      T* st = states->data() + static_cast<size_t>(t) * e_dim * n_dim;
      T* dk = decays->data() + static_cast<size_t>(t) * e_dim * n_dim;
      for (int e = 0; e < e_dim; ++e) {
        const T dt = dv(t, e);
        const T ct = cv(t, e);
        T acc = 0;
        for (int n = 0; n < n_dim; ++n) {
          const T abar = std::exp(dt * av(e, n));
          const size_t en = static_cast<size_t>(e) * n_dim + n;
          const T s_new = abar * prev[en] + dt * bv(t, n) * ct;
          st[en] = s_new;
          dk[en] = abar;
          acc += cmv(t, n) * s_new;
        }
        out(t, e) = acc + skv[e] * ct;
      }
      std::memcpy(prev.data(), st, sizeof(T) * prev.size());
    }
    ensure_finite(out, "ssm_scan");

    return record(std::move(out), {c, delta, b, cmat, a, d_skip},
                  [this, c, delta, b, cmat, a, d_skip, states, decays, seq, e_dim, n_dim,
                   block](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      const TensorT<T>& cv = value(c);
      const TensorT<T>& dv = value(delta);
      const TensorT<T>& bv = value(b);
      const TensorT<T>& cmv = value(cmat);
      const TensorT<T>& av = value(a);
      const TensorT<T>& skv = value(d_skip);
      const bool need_c = requires_grad(c), need_d = requires_grad(delta);
      const bool need_b = requires_grad(b), need_cm = requires_grad(cmat);
      const bool need_a = requires_grad(a), need_sk = requires_grad(d_skip);
      TensorT<T>* gc = need_c ? &grad_buffer(c.id) : nullptr;
      TensorT<T>* gd = need_d ? &grad_buffer(delta.id) : nullptr;
      TensorT<T>* gb = need_b ? &grad_buffer(b.id) : nullptr;
      TensorT<T>* gcm = need_cm ? &grad_buffer(cmat.id) : nullptr;
      TensorT<T>* ga = need_a ? &grad_buffer(a.id) : nullptr;
      TensorT<T>* gsk = need_sk ? &grad_buffer(d_skip.id) : nullptr;

      // dstate carries the adjoint of the running state.
      std::vector<T> dstate(static_cast<size_t>(e_dim) * n_dim, T(0));
      for (int t = seq - 1; t >= 0; --t) {
        const bool block_start = t % block == 0;
        const T* st_prev =
            !block_start ? states->data() + static_cast<size_t>(t - 1) * e_dim * n_dim
                         : nullptr;
        const T* st = states->data() + static_cast<size_t>(t) * e_dim * n_dim;
        const T* dk = decays->data() + static_cast<size_t>(t) * e_dim * n_dim;
        for (int e = 0; e < e_dim; ++e) {
          const T dt = dv(t, e);
          const T ct = cv(t, e);
          const T gout = gy(t, e);
          if (gsk) (*gsk)[e] += gout * ct;
          T dc_acc = need_c ? skv[e] * gout : T(0);
          T ddt_acc = 0;
          for (int n = 0; n < n_dim; ++n) {
            const size_t en = static_cast<size_t>(e) * n_dim + n;
            T ds = dstate[en] + cmv(t, n) * gout;
            if (gcm) (*gcm)(t, n) += st[en] * gout;
            const T prev_s = st_prev ? st_prev[en] : T(0);
            const T abar = dk[en];
            if (need_d) ddt_acc += ds * (av(e, n) * abar * prev_s + bv(t, n) * ct);
            if (ga) (*ga)(e, n) += ds * dt * abar * prev_s;
            if (gb) (*gb)(t, n) += ds * dt * ct;
            if (need_c) dc_acc += ds * dt * bv(t, n);
            // adjoint flowing to state_{t-1}; dropped at block starts
            dstate[en] = block_start ? T(0) : ds * abar;
          }
          if (gc) (*gc)(t, e) += dc_acc;
          if (gd) (*gd)(t, e) += ddt_acc;
        }
      }
    });
  }

  // Replace one row: y = x with y[row] := v. Gradient to x skips the row.
  Var overwrite_row(Var x, int row, Var v) {
    const TensorT<T>& xv = value(x);
    const TensorT<T>& vv = value(v);
    const int d = xv.dim(1);
    if (xv.rank() != 2 || vv.numel() != static_cast<size_t>(d)) {
      throw DimError("overwrite_row expects x[TxD], v[D]");
    }
    if (row < 0 || row >= xv.dim(0)) throw ContractError("overwrite_row row out of range");
    TensorT<T> out = xv;
    std::memcpy(out.data() + static_cast<size_t>(row) * d, vv.data(), sizeof(T) * d);
    return record(std::move(out), {x, v}, [this, x, v, row, d](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      if (requires_grad(x)) {
        TensorT<T>& gx = grad_buffer(x.id);
        for (int t = 0; t < gy.dim(0); ++t) {
          if (t == row) continue;
          for (int i = 0; i < d; ++i) gx(t, i) += gy(t, i);
        }
      }
      if (requires_grad(v)) {
        TensorT<T>& gv = grad_buffer(v.id);
        for (int i = 0; i < d; ++i) gv[i] += gy(row, i);
      }
    });
  }

  Var add_to_row(Var x, int row, Var v) {
    const TensorT<T>& xv = value(x);
    const TensorT<T>& vv = value(v);
    const int d = xv.dim(1);
    if (xv.rank() != 2 || vv.numel() != static_cast<size_t>(d)) {
      throw DimError("add_to_row expects x[TxD], v[D]");
    }
    if (row < 0 || row >= xv.dim(0)) throw ContractError("add_to_row row out of range");
    TensorT<T> out = xv;
    for (int i = 0; i < d; ++i) out(row, i) += vv[i];
    ensure_finite(out, "add_to_row");
    return record(std::move(out), {x, v}, [this, x, v, row, d](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      if (requires_grad(x)) accumulate(x, gy);
      if (requires_grad(v)) {
        TensorT<T>& gv = grad_buffer(v.id);
        for (int i = 0; i < d; ++i) gv[i] += gy(row, i);
      }
    });
  }

  // Mean next-token cross entropy: within each block, logits[t] predicts
  // ids[t+1]. The result is the mean over blocks of the per-block mean, so a
  // stacked batch scores the same as averaging per-sequence losses.
  Var cross_entropy_next(Var logits, const std::vector<int>& ids, int block_len = 0) {
    const TensorT<T>& lv = value(logits);
    const int seq = lv.dim(0), vocab = lv.dim(1);
    if (static_cast<int>(ids.size()) != seq) {
      throw DimError("cross_entropy_next expects one id per position");
    }
    const int block = block_len > 0 ? block_len : seq;
    if (seq % block != 0) throw DimError("cross_entropy_next rows not divisible by block_len");
    if (block < 2) throw ContractError("cross_entropy_next needs at least 2 tokens per block");
    const int n_blocks = seq / block;
    const int preds = block - 1;

    auto probs = std::make_shared<TensorT<T>>(std::vector<int>{seq, vocab});
    T loss = 0;
    for (int bs = 0; bs < seq; bs += block) {
      for (int t = bs; t < bs + preds; ++t) {
        T mx = lv(t, 0);
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, lv(t, j));
        T z = 0;
        for (int j = 0; j < vocab; ++j) {
          const T e = std::exp(lv(t, j) - mx);
          (*probs)(t, j) = e;
          z += e;
        }
        for (int j = 0; j < vocab; ++j) (*probs)(t, j) /= z;
        loss -= std::log((*probs)(t, ids[t + 1]));
      }
    }
    loss /= T(preds) * T(n_blocks);
    TensorT<T> out = TensorT<T>::scalar(loss);
    ensure_finite(out, "cross_entropy_next");
    return record(std::move(out), {logits},
                  [this, logits, ids, probs, preds, block, seq, vocab](Var y) {
      const T g = grad_buffer(y.id)[0] / (T(preds) * T(seq / block));
      TensorT<T>& gl = grad_buffer(logits.id);
      for (int bs = 0; bs < seq; bs += block) {
        for (int t = bs; t < bs + preds; ++t) {
          for (int j = 0; j < vocab; ++j) gl(t, j) += g * (*probs)(t, j);
          gl(t, ids[t + 1]) -= g;
        }
      }
    });
  }

  // log softmax of one row of a [T x V] tensor.
  Var log_softmax_row(Var logits, int row) {
    const TensorT<T>& lv = value(logits);
    const int vocab = lv.dim(1);
    if (row < 0 || row >= lv.dim(0)) throw ContractError("log_softmax_row out of range");
    TensorT<T> out({vocab});
    T mx = lv(row, 0);
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, lv(row, j));
    T z = 0;
    for (int j = 0; j < vocab; ++j) z += std::exp(lv(row, j) - mx);
    const T lz = std::log(z) + mx;
    for (int j = 0; j < vocab; ++j) out[j] = lv(row, j) - lz;
    ensure_finite(out, "log_softmax_row");
    return record(std::move(out), {logits}, [this, logits, row, vocab](Var y) {
      const TensorT<T>& gy = grad_buffer(y.id);
      const TensorT<T>& yv = value(y);
      TensorT<T>& gl = grad_buffer(logits.id);
      T gsum = 0;
      for (int j = 0; j < vocab; ++j) gsum += gy[j];
      for (int j = 0; j < vocab; ++j) gl(row, j) += gy[j] - std::exp(yv[j]) * gsum;
    });
  }

  Var pick(Var v, size_t index) {
    const TensorT<T>& vv = value(v);
    if (index >= vv.numel()) throw ContractError("pick index out of range");
    TensorT<T> out = TensorT<T>::scalar(vv[index]);
    return record(std::move(out), {v}, [this, v, index](Var y) {
      grad_buffer(v.id)[index] += grad_buffer(y.id)[0];
    });
  }

  Var sum(Var v) {
    const TensorT<T>& vv = value(v);
    T acc = 0;
    for (size_t i = 0; i < vv.numel(); ++i) acc += vv[i];
    TensorT<T> out = TensorT<T>::scalar(acc);
    ensure_finite(out, "sum");
    return record(std::move(out), {v}, [this, v](Var y) {
      const T g = grad_buffer(y.id)[0];
      TensorT<T>& gv = grad_buffer(v.id);
      for (size_t i = 0; i < gv.numel(); ++i) gv[i] += g;
    });
  }

 private:
  struct Node {
    TensorT<T> value;
    const TensorT<T>* ext = nullptr;
    std::function<void(Var)> backward;  // empty for leaves / no-grad nodes
    bool requires_grad = false;
  };

  int push_leaf(const TensorT<T>* p, bool requires_grad) {
    Node n;
    n.ext = p;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int push_owned(TensorT<T> v, bool requires_grad) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  template <typename F>
  Var record(TensorT<T> out, std::initializer_list<Var> inputs, F&& backward) {
    Node n;
    n.value = std::move(out);
    if (grad_) {
      for (Var in : inputs) {
        if (nodes_[in.id].requires_grad) {
          n.requires_grad = true;
          break;
        }
      }
      if (n.requires_grad) n.backward = std::forward<F>(backward);
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  TensorT<T>& grad_buffer(int id) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    TensorT<T>& g = grads_[id];
    if (g.numel() == 0) {
      const Node& n = nodes_[id];
      g = TensorT<T>((n.ext ? *n.ext : n.value).shape());
    }
    return g;
  }

  void accumulate(Var v, const TensorT<T>& delta) {
    TensorT<T>& g = grad_buffer(v.id);
    for (size_t i = 0; i < delta.numel(); ++i) g[i] += delta[i];
  }

  void zero_grads() {
    grads_.assign(nodes_.size(), TensorT<T>());
  }

  void sweep(int from) {
    for (int id = from; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.backward || !n.requires_grad) continue;
      if (static_cast<size_t>(id) >= grads_.size() || grads_[id].numel() == 0) continue;
      n.backward(Var{id});
    }
  }

  bool grad_;
  bool params_trainable_ = true;
  std::vector<Node> nodes_;
  std::vector<TensorT<T>> grads_;
  std::unordered_map<const TensorT<T>*, int> leaf_cache_;
  std::unordered_map<const TensorT<T>*, int> const_cache_;
};

}  // namespace ssmlens
