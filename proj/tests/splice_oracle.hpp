// SPDX-License-Identifier: Apache-2.0
//
// Independent patched-run oracle: a hand-rolled layer loop that recomputes
// the model while manually splicing substitute rows into named states. Used
// to validate the intervention machinery inside forward(); it shares the
// elementary ops but none of the tape or patch-application code.

#pragma once

#include <map>
#include <tuple>
#include <vector>

#include "ssmlens/model.hpp"
#include "ssmlens/ops.hpp"
#include "ssmlens/trace.hpp"

namespace oracles {

using ssmlens::StateKind;
using ssmlens::Tensor;

using SpliceKey = std::tuple<StateKind, int, int>;  // kind, layer (1-based), token
using SpliceMap = std::map<SpliceKey, std::vector<float>>;

inline void apply_splices(Tensor& m, StateKind kind, int layer, const SpliceMap& subs) {
  for (int t = 0; t < m.dim(0); ++t) {
    auto it = subs.find({kind, layer, t});
    if (it == subs.end()) continue;
    for (int i = 0; i < m.dim(1); ++i) m(t, i) = it->second[static_cast<size_t>(i)];
  }
}

inline Tensor splice_forward(const ssmlens::MambaLM& model, const std::vector<int>& tokens,
                             const SpliceMap& subs) {
  namespace ops = ssmlens::ops;
  const auto& cfg = model.config;
  const int seq = static_cast<int>(tokens.size());
  const int e_dim = cfg.d_inner(), n_dim = cfg.d_state;

  Tensor h({seq, cfg.d_model});
  for (int t = 0; t < seq; ++t)
    for (int i = 0; i < cfg.d_model; ++i) h(t, i) = model.embedding(tokens[t], i);

  for (int l = 1; l <= cfg.n_layers; ++l) {
    const auto& blk = model.blocks[l - 1];
    Tensor x = ops::rmsnorm_rows(h, blk.norm_gain);

    Tensor a = ops::matmul_nt(x, blk.w_a);
    apply_splices(a, StateKind::a, l, subs);

    Tensor c = ops::silu(ops::causal_conv1d(a, blk.conv_w, blk.conv_b));
    apply_splices(c, StateKind::c, l, subs);

    // step sizes and input-dependent mixers, then the recurrence in the same
    // accumulation order as the production scan
    Tensor pre = ops::matmul_nt(ops::matmul_nt(c, blk.w_dt1), blk.w_dt2);
    Tensor delta({seq, e_dim});
    for (int t = 0; t < seq; ++t)
      for (int e = 0; e < e_dim; ++e)
        delta(t, e) = ops::softplus(pre(t, e) + blk.dt_bias[e]);
    Tensor b_seq = ops::matmul_nt(c, blk.w_b);
    Tensor cm_seq = ops::matmul_nt(c, blk.w_c);

    Tensor s({seq, e_dim});
    std::vector<float> state(static_cast<size_t>(e_dim) * n_dim, 0.f);
    for (int t = 0; t < seq; ++t) {
      for (int e = 0; e < e_dim; ++e) {
        const float dt = delta(t, e);
        const float ct = c(t, e);
        float acc = 0.f;
        for (int n = 0; n < n_dim; ++n) {
          const float abar = std::exp(dt * -std::exp(blk.a_log(e, n)));
          float& st = state[static_cast<size_t>(e) * n_dim + n];
          st = abar * st + dt * b_seq(t, n) * ct;
          acc += cm_seq(t, n) * st;
        }
        s(t, e) = acc + blk.d_skip[e] * ct;
      }
    }
    apply_splices(s, StateKind::s, l, subs);

    Tensor g_pre = ops::matmul_nt(x, blk.w_g);
    apply_splices(g_pre, StateKind::g_pre, l, subs);
    Tensor g = ops::silu(g_pre);
    apply_splices(g, StateKind::g, l, subs);

    Tensor o = ops::matmul_nt(ops::mul(s, g), blk.w_o);
    apply_splices(o, StateKind::o, l, subs);

    h = ops::add(h, o);
    apply_splices(h, StateKind::h, l, subs);
  }
  return ops::matmul_nt(ops::rmsnorm_rows(h, model.final_norm_gain), model.embedding);
}

// IE recomputed end to end through the splice oracle.
inline double splice_ie(const ssmlens::MambaLM& model, const ssmlens::TracePair& pair,
                        StateKind kind, int layer, int token, int window) {
  if (kind == StateKind::h) window = 1;
  const auto [lo, hi] = ssmlens::window_bounds(layer, window, model.config.n_layers);
  SpliceMap subs;
  for (int l = lo; l <= hi; ++l) {
    const Tensor row = pair.clean_cache.state_row(kind, l, token);
    subs[{kind, l, token}] = row.vec();
  }
  Tensor logits = splice_forward(model, pair.corrupt_fact.tokens, subs);
  const double p = ssmlens::next_token_probs(logits)[pair.clean_fact.object_token];
  return (p - pair.p_corrupt) / pair.denominator();
}

}  // namespace oracles
