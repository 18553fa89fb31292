// SPDX-License-Identifier: Apache-2.0
//
// Miniature selective-SSM language model.
//
// Layer ell (1-indexed) maps the residual stream h^(ell-1) to h^(ell):
//
//   x = rmsnorm(h^(ell-1))
//   a = W_a x                     [2d]
//   c = SiLU(conv1d_causal(a))    [2d]
//   s = selective_ssm(c)          [2d]   input-dependent state recurrence
//   g = SiLU(W_g x)               [2d]   gate path, no token mixing
//   o = W_o (s * g)               [d]
//   h^(ell) = h^(ell-1) + o
//
// Logits are rmsnorm(h^(L)) against the tied embedding. Every intermediate
// state above is cached per (layer, token) and can be overwritten mid-run,
// with all downstream values recomputed from the patched state.

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ssmlens/rng.hpp"
#include "ssmlens/tape.hpp"
#include "ssmlens/tensor.hpp"

namespace ssmlens {

struct ModelConfig {
  int d_model = 64;
  int n_layers = 8;
  int d_state = 8;
  int d_conv = 4;
  int dt_rank = 4;  // max(1, d_model/16) for the default width
  int vocab_size = 256;
  int max_seq_len = 32;

  int d_inner() const { return 2 * d_model; }

  static ModelConfig with_dims(int d_model, int n_layers, int d_state = 8, int d_conv = 4,
                               int vocab_size = 256, int max_seq_len = 32) {
    ModelConfig c;
    c.d_model = d_model;
    c.n_layers = n_layers;
    c.d_state = d_state;
    c.d_conv = d_conv;
    c.dt_rank = std::max(1, d_model / 16);
    c.vocab_size = vocab_size;
    c.max_seq_len = max_seq_len;
    return c;
  }

  void validate() const {
    if (d_model < 1 || n_layers < 1 || d_state < 1 || d_conv < 1 || dt_rank < 1 ||
        vocab_size < 1 || max_seq_len < 1) {
      throw ContractError("model config fields must all be >= 1");
    }
    if (dt_rank > d_inner()) throw ContractError("dt_rank must not exceed d_inner");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct BlockParamsT {
  TensorT<T> w_a;      // [2d x d]
  TensorT<T> w_g;      // [2d x d]
  TensorT<T> w_o;      // [d x 2d]
  TensorT<T> conv_w;   // [2d x K]
  TensorT<T> conv_b;   // [2d]
  TensorT<T> a_log;    // [2d x N]; state decay A = -exp(a_log)
  TensorT<T> d_skip;   // [2d]
  TensorT<T> w_b;      // [N x 2d]
  TensorT<T> w_c;      // [N x 2d]
  TensorT<T> w_dt1;    // [dt_rank x 2d]
  TensorT<T> w_dt2;    // [2d x dt_rank]
  TensorT<T> dt_bias;  // [2d]
  TensorT<T> norm_gain;  // [d]
};

template <typename T>
struct MambaLMT {
  ModelConfig config;
  TensorT<T> embedding;  // [V x d]; also the unembedding, tied
  std::vector<BlockParamsT<T>> blocks;
  TensorT<T> final_norm_gain;  // [d]

  // Canonical name -> tensor map, stable order. Layer index is 1-based.
  std::vector<std::pair<std::string, TensorT<T>*>> named_tensors() {
    std::vector<std::pair<std::string, TensorT<T>*>> out;
    out.emplace_back("emb", &embedding);
    out.emplace_back("final_norm", &final_norm_gain);
    for (size_t l = 0; l < blocks.size(); ++l) {
      const std::string p = "blk" + std::to_string(l + 1) + ".";
      BlockParamsT<T>& b = blocks[l];
      out.emplace_back(p + "W_a", &b.w_a);
      out.emplace_back(p + "W_g", &b.w_g);
      out.emplace_back(p + "W_o", &b.w_o);
      out.emplace_back(p + "conv_w", &b.conv_w);
      out.emplace_back(p + "conv_b", &b.conv_b);
      out.emplace_back(p + "A_log", &b.a_log);
      out.emplace_back(p + "D", &b.d_skip);
      out.emplace_back(p + "W_B", &b.w_b);
      out.emplace_back(p + "W_C", &b.w_c);
      out.emplace_back(p + "W_dt1", &b.w_dt1);
      out.emplace_back(p + "W_dt2", &b.w_dt2);
      out.emplace_back(p + "dt_bias", &b.dt_bias);
      out.emplace_back(p + "norm", &b.norm_gain);
    }
    return out;
  }

  std::vector<std::pair<std::string, const TensorT<T>*>> named_tensors() const {
    auto mut = const_cast<MambaLMT*>(this)->named_tensors();
    std::vector<std::pair<std::string, const TensorT<T>*>> out;
    out.reserve(mut.size());
    for (auto& [n, p] : mut) out.emplace_back(n, p);
    return out;
  }

  template <typename U>
  MambaLMT<U> cast() const {
    MambaLMT<U> m;
    m.config = config;
    m.embedding = embedding.template cast<U>();
    m.final_norm_gain = final_norm_gain.template cast<U>();
    m.blocks.reserve(blocks.size());
    for (const auto& b : blocks) {
      BlockParamsT<U> nb;
      nb.w_a = b.w_a.template cast<U>();
      nb.w_g = b.w_g.template cast<U>();
      nb.w_o = b.w_o.template cast<U>();
      nb.conv_w = b.conv_w.template cast<U>();
      nb.conv_b = b.conv_b.template cast<U>();
      nb.a_log = b.a_log.template cast<U>();
      nb.d_skip = b.d_skip.template cast<U>();
      nb.w_b = b.w_b.template cast<U>();
      nb.w_c = b.w_c.template cast<U>();
      nb.w_dt1 = b.w_dt1.template cast<U>();
      nb.w_dt2 = b.w_dt2.template cast<U>();
      nb.dt_bias = b.dt_bias.template cast<U>();
      nb.norm_gain = b.norm_gain.template cast<U>();
      m.blocks.push_back(std::move(nb));
    }
    return m;
  }
};

using BlockParams = BlockParamsT<float>;
using MambaLM = MambaLMT<float>;

// --- interventions ----------------------------------------------------------

enum class StateKind { h, a, c, s, g, o, g_pre };

inline const char* to_string(StateKind k) {
  switch (k) {
    case StateKind::h: return "h";
    case StateKind::a: return "a";
    case StateKind::c: return "c";
    case StateKind::s: return "s";
    case StateKind::g: return "g";
    case StateKind::o: return "o";
    case StateKind::g_pre: return "g_pre";
  }
  return "?";
}

inline StateKind state_kind_from(const std::string& s) {
  if (s == "h") return StateKind::h;
  if (s == "a") return StateKind::a;
  if (s == "c") return StateKind::c;
  if (s == "s") return StateKind::s;
  if (s == "g") return StateKind::g;
  if (s == "o") return StateKind::o;
  if (s == "g_pre") return StateKind::g_pre;
  throw ContractError("unknown state kind '" + s + "'");
}

enum class PatchAction { replace, add, zero, mean };

// One edit applied at the moment the addressed state is produced. Tokens are
// 0-indexed, layers 1-indexed. `mean` behaves like `replace` but documents
// that the value is a corpus average.
template <typename T>
struct InterventionT {
  StateKind kind = StateKind::h;
  int layer = 1;
  int token = 0;
  PatchAction action = PatchAction::replace;
  TensorT<T> value;  // unused for zero

  static InterventionT replace_at(StateKind k, int layer, int token, TensorT<T> v) {
    return InterventionT{k, layer, token, PatchAction::replace, std::move(v)};
  }
};

using Intervention = InterventionT<float>;

// Site replacement whose value lives on the tape (used when optimizing the
// value itself).
struct VarPatch {
  StateKind kind;
  int layer;
  int token;
  Var value;
};

// --- activation cache --------------------------------------------------------

template <typename T>
struct ActivationCacheT {
  struct Layer {
    TensorT<T> h, a, c, s, g, g_pre, o;
  };
  TensorT<T> h0;      // [T x d] embedding output
  std::vector<Layer> layers;
  TensorT<T> logits;  // [T x V]

  int seq_len() const { return h0.dim(0); }

  const TensorT<T>& state(StateKind k, int layer) const {
    if (layer < 1 || layer > static_cast<int>(layers.size())) {
      throw ContractError("cache layer out of range");
    }
    const Layer& l = layers[layer - 1];
    switch (k) {
      case StateKind::h: return l.h;
      case StateKind::a: return l.a;
      case StateKind::c: return l.c;
      case StateKind::s: return l.s;
      case StateKind::g: return l.g;
      case StateKind::g_pre: return l.g_pre;
      case StateKind::o: return l.o;
    }
    throw ContractError("bad state kind");
  }

  TensorT<T> state_row(StateKind k, int layer, int token) const {
    const TensorT<T>& m = state(k, layer);
    if (token < 0 || token >= m.dim(0)) throw ContractError("cache token out of range");
    TensorT<T> row({m.dim(1)});
    for (int i = 0; i < m.dim(1); ++i) row[i] = m(token, i);
    return row;
  }
};

using ActivationCache = ActivationCacheT<float>;

// --- init ---------------------------------------------------------------------

template <typename T = float>
MambaLMT<T> init_params(const ModelConfig& config, uint64_t seed) {
  config.validate();
  MambaLMT<T> m;
  m.config = config;
  std::mt19937_64 gen(substream_seed(seed, "init"));
  std::normal_distribution<double> gauss(0.0, 0.02);
  auto fill_gauss = [&](TensorT<T>& t) {
    for (size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(gauss(gen));
  };

  const int d = config.d_model, e = config.d_inner(), n = config.d_state;
  const int k = config.d_conv, r = config.dt_rank;

  m.embedding = TensorT<T>({config.vocab_size, d});
  fill_gauss(m.embedding);
  m.final_norm_gain = TensorT<T>::full({d}, T(1));

  std::uniform_real_distribution<double> logdt(std::log(1e-3), std::log(1e-1));
  m.blocks.resize(config.n_layers);
  for (auto& b : m.blocks) {
    b.w_a = TensorT<T>({e, d});
    b.w_g = TensorT<T>({e, d});
    b.w_o = TensorT<T>({d, e});
    b.conv_w = TensorT<T>({e, k});
    b.conv_b = TensorT<T>({e});
    b.w_b = TensorT<T>({n, e});
    b.w_c = TensorT<T>({n, e});
    b.w_dt1 = TensorT<T>({r, e});
    b.w_dt2 = TensorT<T>({e, r});
    fill_gauss(b.w_a);
    fill_gauss(b.w_g);
    fill_gauss(b.w_o);
    fill_gauss(b.conv_w);
    fill_gauss(b.w_b);
    fill_gauss(b.w_c);
    fill_gauss(b.w_dt1);
    fill_gauss(b.w_dt2);

    // -A spans {1..N} on every channel (S4D-real), so state timescales are
    // staggered from the start.
    b.a_log = TensorT<T>({e, n});
    for (int ch = 0; ch < e; ++ch)
      for (int i = 0; i < n; ++i) b.a_log(ch, i) = static_cast<T>(std::log(double(i + 1)));

    b.d_skip = TensorT<T>::full({e}, T(1));

    // softplus(dt_bias) lands in [1e-3, 1e-1], log-uniform.
    b.dt_bias = TensorT<T>({e});
    for (int ch = 0; ch < e; ++ch) {
      const double dt = std::exp(logdt(gen));
      b.dt_bias[ch] = static_cast<T>(std::log(std::expm1(dt)));
    }

    b.norm_gain = TensorT<T>::full({d}, T(1));
  }
  return m;
}

// --- forward ------------------------------------------------------------------

namespace detail {

template <typename T>
struct PatchIndex {
  const std::vector<InterventionT<T>>* consts = nullptr;
  const std::vector<VarPatch>* vars = nullptr;

  // Applies every patch addressed at (kind, layer) to `x`, in list order.
  // Later replaces win by overwriting earlier ones.
  Var apply(Tape<T>& tp, StateKind kind, int layer, Var x) const {
    if (consts) {
      for (const auto& iv : *consts) {
        if (iv.kind != kind || iv.layer != layer) continue;
        switch (iv.action) {
          case PatchAction::replace:
          case PatchAction::mean:
            x = tp.overwrite_row(x, iv.token, tp.constant(iv.value));
            break;
          case PatchAction::add:
            x = tp.add_to_row(x, iv.token, tp.constant(iv.value));
            break;
          case PatchAction::zero: {
            TensorT<T> z({tp.value(x).dim(1)});
            x = tp.overwrite_row(x, iv.token, tp.constant(std::move(z)));
            break;
          }
        }
      }
    }
    if (vars) {
      for (const auto& vp : *vars) {
        if (vp.kind == kind && vp.layer == layer) x = tp.overwrite_row(x, vp.token, vp.value);
      }
    }
    return x;
  }
};

template <typename T>
void validate_interventions(const ModelConfig& cfg, int seq,
                            const std::vector<InterventionT<T>>& ivs) {
  for (const auto& iv : ivs) {
    if (iv.layer < 1 || iv.layer > cfg.n_layers) {
      throw ContractError("intervention layer " + std::to_string(iv.layer) + " out of [1," +
                          std::to_string(cfg.n_layers) + "]");
    }
    if (iv.token < 0 || iv.token >= seq) {
      throw ContractError("intervention token " + std::to_string(iv.token) + " out of range");
    }
    const bool wide = iv.kind == StateKind::a || iv.kind == StateKind::c ||
                      iv.kind == StateKind::s || iv.kind == StateKind::g ||
                      iv.kind == StateKind::g_pre;
    const size_t want = static_cast<size_t>(wide ? cfg.d_inner() : cfg.d_model);
    if (iv.action != PatchAction::zero && iv.value.numel() != want) {
      throw ContractError(std::string("intervention value size mismatch for kind ") +
                          to_string(iv.kind));
    }
  }
}

}  // namespace detail

template <typename T>
struct ForwardVarsT {
  Var logits;
  ActivationCacheT<T> cache;
};

// Records the full forward pass on `tp`. Interventions land at the exact
// site the addressed state is produced; everything downstream sees the
// patched value. The cache stores post-patch values.
template <typename T>
ForwardVarsT<T> build_forward(Tape<T>& tp, const MambaLMT<T>& model,
                              const std::vector<int>& tokens,
                              const std::vector<InterventionT<T>>* interventions = nullptr,
                              const std::vector<VarPatch>* var_patches = nullptr) {
  const ModelConfig& cfg = model.config;
  const int seq = static_cast<int>(tokens.size());
  if (seq < 1) throw ContractError("forward needs at least one token");
  if (seq > cfg.max_seq_len) throw ContractError("sequence exceeds max_seq_len");
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw ContractError("token id " + std::to_string(t) + " out of vocab");
    }
  }
  if (interventions) detail::validate_interventions(cfg, seq, *interventions);

  detail::PatchIndex<T> patches{interventions, var_patches};
  ForwardVarsT<T> out;
  out.cache.layers.resize(cfg.n_layers);

  Var emb = tp.param(&model.embedding);
  Var h = tp.rows(emb, tokens);
  out.cache.h0 = tp.value(h);

  for (int l = 1; l <= cfg.n_layers; ++l) {
    const BlockParamsT<T>& blk = model.blocks[l - 1];
    Var x = tp.rmsnorm_rows(h, tp.param(&blk.norm_gain));

    Var a = tp.matmul_nt(x, tp.param(&blk.w_a));
    a = patches.apply(tp, StateKind::a, l, a);

    Var c = tp.silu(tp.causal_conv1d(a, tp.param(&blk.conv_w), tp.param(&blk.conv_b)));
    c = patches.apply(tp, StateKind::c, l, c);

    Var delta = tp.softplus(tp.add_rowwise(
        tp.matmul_nt(tp.matmul_nt(c, tp.param(&blk.w_dt1)), tp.param(&blk.w_dt2)),
        tp.param(&blk.dt_bias)));
    Var b_seq = tp.matmul_nt(c, tp.param(&blk.w_b));
    Var c_seq = tp.matmul_nt(c, tp.param(&blk.w_c));
    Var a_neg = tp.scale(tp.exp(tp.param(&blk.a_log)), T(-1));
    Var s = tp.ssm_scan(c, delta, b_seq, c_seq, a_neg, tp.param(&blk.d_skip));
    s = patches.apply(tp, StateKind::s, l, s);

    Var g_pre = tp.matmul_nt(x, tp.param(&blk.w_g));
    g_pre = patches.apply(tp, StateKind::g_pre, l, g_pre);
    Var g = tp.silu(g_pre);
    g = patches.apply(tp, StateKind::g, l, g);

    Var o = tp.matmul_nt(tp.mul(s, g), tp.param(&blk.w_o));
    o = patches.apply(tp, StateKind::o, l, o);

    h = tp.add(h, o);
    h = patches.apply(tp, StateKind::h, l, h);

    auto& lc = out.cache.layers[l - 1];
    lc.a = tp.value(a);
    lc.c = tp.value(c);
    lc.s = tp.value(s);
    lc.g_pre = tp.value(g_pre);
    lc.g = tp.value(g);
    lc.o = tp.value(o);
    lc.h = tp.value(h);
  }

  Var xf = tp.rmsnorm_rows(h, tp.param(&model.final_norm_gain));
  out.logits = tp.matmul_nt(xf, tp.param(&model.embedding));
  out.cache.logits = tp.value(out.logits);
  return out;
}

// Logits-only forward for stacked equal-length sequences ([B*T] tokens,
// block_len = T). No cache, no interventions; the training path.
template <typename T>
Var build_forward_lm(Tape<T>& tp, const MambaLMT<T>& model, const std::vector<int>& tokens,
                     int block_len) {
  const ModelConfig& cfg = model.config;
  if (block_len < 1 || tokens.size() % static_cast<size_t>(block_len) != 0) {
    throw ContractError("stacked forward needs equal-length blocks");
  }
  if (block_len > cfg.max_seq_len) throw ContractError("sequence exceeds max_seq_len");
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) throw ContractError("token id out of vocab");
  }

  Var h = tp.rows(tp.param(&model.embedding), tokens);
  for (int l = 1; l <= cfg.n_layers; ++l) {
    const BlockParamsT<T>& blk = model.blocks[l - 1];
    Var x = tp.rmsnorm_rows(h, tp.param(&blk.norm_gain));
    Var a = tp.matmul_nt(x, tp.param(&blk.w_a));
    Var c = tp.silu(
        tp.causal_conv1d(a, tp.param(&blk.conv_w), tp.param(&blk.conv_b), block_len));
    Var delta = tp.softplus(tp.add_rowwise(
        tp.matmul_nt(tp.matmul_nt(c, tp.param(&blk.w_dt1)), tp.param(&blk.w_dt2)),
        tp.param(&blk.dt_bias)));
    Var b_seq = tp.matmul_nt(c, tp.param(&blk.w_b));
    Var c_seq = tp.matmul_nt(c, tp.param(&blk.w_c));
    Var a_neg = tp.scale(tp.exp(tp.param(&blk.a_log)), T(-1));
    Var s = tp.ssm_scan(c, delta, b_seq, c_seq, a_neg, tp.param(&blk.d_skip), block_len);
    Var g = tp.silu(tp.matmul_nt(x, tp.param(&blk.w_g)));
    h = tp.add(h, tp.matmul_nt(tp.mul(s, g), tp.param(&blk.w_o)));
  }
  Var xf = tp.rmsnorm_rows(h, tp.param(&model.final_norm_gain));
  return tp.matmul_nt(xf, tp.param(&model.embedding));
}

template <typename T>
struct ForwardResultT {
  TensorT<T> logits;  // [T x V]
  ActivationCacheT<T> cache;
};

using ForwardResult = ForwardResultT<float>;

template <typename T>
ForwardResultT<T> forward(const MambaLMT<T>& model, const std::vector<int>& tokens,
                          const std::vector<InterventionT<T>>& interventions = {}) {
  Tape<T> tp(/*grad_enabled=*/false);
  auto fv = build_forward(tp, model, tokens, &interventions);
  return ForwardResultT<T>{fv.cache.logits, std::move(fv.cache)};
}

// Next-token distribution at the last position.
template <typename T>
TensorT<T> next_token_probs(const TensorT<T>& logits) {
  const int seq = logits.dim(0), vocab = logits.dim(1);
  TensorT<T> row({vocab});
  for (int j = 0; j < vocab; ++j) row[j] = logits(seq - 1, j);
  return ops::softmax(row);
}

template <typename T>
int argmax_token(const TensorT<T>& logits) {
  const int seq = logits.dim(0), vocab = logits.dim(1);
  int best = 0;
  for (int j = 1; j < vocab; ++j) {
    if (logits(seq - 1, j) > logits(seq - 1, best)) best = j;
  }
  return best;
}

// --- standalone block ops (usable outside a full forward) ---------------------

// selective_ssm on a conv-activation sequence. Derives the step size and the
// input-dependent state mixers from c itself.
template <typename T>
TensorT<T> selective_ssm(const TensorT<T>& c_seq, const BlockParamsT<T>& blk) {
  Tape<T> tp(false);
  Var c = tp.constant_ref(&c_seq);
  Var delta = tp.softplus(tp.add_rowwise(
      tp.matmul_nt(tp.matmul_nt(c, tp.constant_ref(&blk.w_dt1)), tp.constant_ref(&blk.w_dt2)),
      tp.constant_ref(&blk.dt_bias)));
  Var b_seq = tp.matmul_nt(c, tp.constant_ref(&blk.w_b));
  Var cm_seq = tp.matmul_nt(c, tp.constant_ref(&blk.w_c));
  Var a_neg = tp.scale(tp.exp(tp.constant_ref(&blk.a_log)), T(-1));
  Var s = tp.ssm_scan(c, delta, b_seq, cm_seq, a_neg, tp.constant_ref(&blk.d_skip));
  return tp.value(s);
}

template <typename T>
struct BlockOut {
  TensorT<T> a, c, s, g, o;
};

// One block applied to an already-normalized input sequence.
template <typename T>
BlockOut<T> block_forward(const TensorT<T>& x_seq, const BlockParamsT<T>& blk) {
  BlockOut<T> r;
  r.a = ops::matmul_nt(x_seq, blk.w_a);
  r.c = ops::silu(ops::causal_conv1d(r.a, blk.conv_w, blk.conv_b));
  r.s = selective_ssm(r.c, blk);
  r.g = ops::silu(ops::matmul_nt(x_seq, blk.w_g));
  r.o = ops::matmul_nt(ops::mul(r.s, r.g), blk.w_o);
  return r;
}

// --- retention matrix ----------------------------------------------------------

// Per-channel decomposition of the SSM output into contributions from each
// past convolved input: alpha[k][q] in [T x T x 2d], lower triangular, with
// sum_q alpha[k][q] + D*c_k = s_k.
template <typename T>
struct RetentionMatrixT {
  int seq = 0;
  int channels = 0;
  std::vector<T> alpha;  // [T x T x E], row-major (k, q, e)

  T at(int k, int q, int e) const {
    return alpha[(static_cast<size_t>(k) * seq + q) * channels + e];
  }
  T& at(int k, int q, int e) {
    return alpha[(static_cast<size_t>(k) * seq + q) * channels + e];
  }
};

using RetentionMatrix = RetentionMatrixT<float>;

template <typename T>
RetentionMatrixT<T> retention_from_conv(const TensorT<T>& c_seq, const BlockParamsT<T>& blk) {
  const int seq = c_seq.dim(0), e_dim = c_seq.dim(1), n_dim = blk.a_log.dim(1);

  TensorT<T> pre = ops::matmul_nt(ops::matmul_nt(c_seq, blk.w_dt1), blk.w_dt2);
  TensorT<T> delta({seq, e_dim});
  for (int t = 0; t < seq; ++t)
    for (int e = 0; e < e_dim; ++e) delta(t, e) = ops::softplus(pre(t, e) + blk.dt_bias[e]);

  TensorT<T> b_seq = ops::matmul_nt(c_seq, blk.w_b);
  TensorT<T> cm_seq = ops::matmul_nt(c_seq, blk.w_c);

  RetentionMatrixT<T> r;
  r.seq = seq;
  r.channels = e_dim;
  r.alpha.assign(static_cast<size_t>(seq) * seq * e_dim, T(0));

  // alpha[k,q,e] = sum_n C_k,n (prod_{i=q+1..k} Abar_i,e,n) Bbar_q,e,n c_q,e
  for (int e = 0; e < e_dim; ++e) {
    for (int n = 0; n < n_dim; ++n) {
      const T a_en = -std::exp(blk.a_log(e, n));
      for (int k = 0; k < seq; ++k) {
        T prod = T(1);
        for (int q = k; q >= 0; --q) {
          if (q < k) prod *= std::exp(delta(q + 1, e) * a_en);
          const T bbar = delta(q, e) * b_seq(q, n);
          r.at(k, q, e) += cm_seq(k, n) * prod * bbar * c_seq(q, e);
        }
      }
    }
  }
  return r;
}

// Retention matrix of layer `layer` for a prompt, from a clean run.
template <typename T>
RetentionMatrixT<T> retention_matrix(const MambaLMT<T>& model, const std::vector<int>& tokens,
                                     int layer) {
  if (layer < 1 || layer > model.config.n_layers) {
    throw ContractError("retention layer out of range");
  }
  auto run = forward(model, tokens);
  const TensorT<T>& c_seq = run.cache.state(StateKind::c, layer);
  return retention_from_conv(c_seq, model.blocks[layer - 1]);
}

}  // namespace ssmlens
