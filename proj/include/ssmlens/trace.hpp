// SPDX-License-Identifier: Apache-2.0
//
// Activation patching. A TracePair holds a clean run G on prompt x and a
// corrupted run G* on the subject-swapped prompt x*. Indirect effect of
// restoring a state from G into G*:
//
//   IE = (p*[<-state](o) - p*(o)) / (p(o) - p*(o))
//
// 1 when the patch fully restores the correct-answer probability, 0 when it
// does nothing.

#pragma once

#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ssmlens/corpus.hpp"
#include "ssmlens/model.hpp"
#include "ssmlens/parallel.hpp"

namespace ssmlens {

inline constexpr double kDenominatorGuard = 1e-4;

struct TracePair {
  Fact clean_fact;
  Fact corrupt_fact;
  ActivationCache clean_cache;
  ActivationCache corrupt_cache;
  double p_clean = 0.0;    // p(o) on x
  double p_corrupt = 0.0;  // p*(o) on x*

  int seq_len() const { return static_cast<int>(clean_fact.tokens.size()); }
  double denominator() const { return p_clean - p_corrupt; }
};

// Builds the pair, enforcing top-1(x) = o, top-1(x*) = o*, and the
// denominator guard. Returns nothing when the fact has to be skipped.
template <typename T>
std::optional<TracePair> make_trace_pair(const MambaLMT<T>& model, const World& world,
                                         const Tokenizer& tok, const Fact& fact,
                                         uint64_t seed) {
  auto corrupt = pick_corrupt_pair(world, tok, fact, seed, &model);
  if (!corrupt) return std::nullopt;

  auto clean_run = forward(model, fact.tokens);
  auto corrupt_run = forward(model, corrupt->tokens);
  if (argmax_token(clean_run.logits) != fact.object_token) return std::nullopt;
  if (argmax_token(corrupt_run.logits) != corrupt->object_token) return std::nullopt;

  TracePair pair;
  pair.clean_fact = fact;
  pair.corrupt_fact = *corrupt;
  pair.p_clean = next_token_probs(clean_run.logits)[fact.object_token];
  pair.p_corrupt = next_token_probs(corrupt_run.logits)[fact.object_token];
  if (pair.p_clean - pair.p_corrupt < kDenominatorGuard) return std::nullopt;
  pair.clean_cache = std::move(clean_run.cache);
  pair.corrupt_cache = std::move(corrupt_run.cache);
  return pair;
}

// Layers actually restored for a centered window at `layer`, clamped to
// [1, L].
inline std::pair<int, int> window_bounds(int layer, int window, int n_layers) {
  const int half = window / 2;
  return {std::max(1, layer - half), std::min(n_layers, layer + half)};
}

// IE of restoring `kind` at (layer, token) from the clean run, with a
// centered window of layers for the non-residual kinds. For kind h the
// window is forced to 1: restoring the residual at one layer already carries
// everything earlier.
template <typename T>
double indirect_effect(const MambaLMT<T>& model, const TracePair& pair, StateKind kind,
                       int layer, int token, int window = 1) {
  if (window < 1 || window % 2 == 0) {
    throw ContractError("window must be odd and >= 1");
  }
  if (kind == StateKind::h) window = 1;
  const auto [lo, hi] = window_bounds(layer, window, model.config.n_layers);

  std::vector<InterventionT<T>> ivs;
  for (int l = lo; l <= hi; ++l) {
    ivs.push_back(InterventionT<T>::replace_at(
        kind, l, token, pair.clean_cache.state_row(kind, l, token)));
  }
  auto patched = forward(model, pair.corrupt_fact.tokens, ivs);
  const double p_patched =
      next_token_probs(patched.logits)[pair.clean_fact.object_token];
  return (p_patched - pair.p_corrupt) / pair.denominator();
}

// --- role-aligned grids -----------------------------------------------------

enum class TokenRole { subject_first, subject_last, relation, prompt_last };

inline const std::vector<std::string>& role_names() {
  static const std::vector<std::string> names{"subject-first", "subject-last", "relation",
                                              "prompt-last"};
  return names;
}

inline TokenRole role_of(const Fact& fact, int token) {
  if (token == fact.prompt_last) return TokenRole::prompt_last;
  if (token == fact.subject_first) return TokenRole::subject_first;
  if (token == fact.subject_last) return TokenRole::subject_last;
  return TokenRole::relation;
}

struct TraceGrid {
  StateKind kind = StateKind::h;
  int window = 1;
  int n_layers = 0;
  int n_pairs = 0;
  int n_skipped = 0;
  // mean IE per (layer, role); count of contributing (pair, token) samples
  std::vector<std::vector<double>> values;  // [L][role]
  std::vector<std::vector<int>> counts;     // [L][role]
  std::vector<int> layers_restored;         // per center layer, after clamping

  double at(int layer, TokenRole role) const {
    return values[layer - 1][static_cast<int>(role)];
  }

  nlohmann::json to_json() const {
    nlohmann::json grid = nlohmann::json::array();
    for (int l = 0; l < n_layers; ++l) {
      nlohmann::json row = nlohmann::json::object();
      for (size_t r = 0; r < role_names().size(); ++r) {
        if (counts[l][r]) {
          row[role_names()[r]] = values[l][r];
        } else {
          row[role_names()[r]] = nullptr;
        }
      }
      grid.push_back(row);
    }
    return nlohmann::json{{"kind", to_string(kind)},
                          {"window", window},
                          {"n_pairs", n_pairs},
                          {"n_skipped", n_skipped},
                          {"roles", role_names()},
                          {"layers_restored", layers_restored},
                          {"grid", grid}};
  }
};

class EmptyGridError : public std::runtime_error {
 public:
  EmptyGridError() : std::runtime_error("all trace pairs were skipped") {}
};

// Mean IE per (layer, token role) over pairs. Tokens are grouped by role, so
// prompts of different lengths average into the same four columns.
template <typename T>
TraceGrid trace_grid(const MambaLMT<T>& model, const std::vector<TracePair>& pairs,
                     StateKind kind, int window, int n_skipped = 0) {
  if (pairs.empty()) throw EmptyGridError();
  const int n_layers = model.config.n_layers;
  const int n_roles = static_cast<int>(role_names().size());

  TraceGrid grid;
  grid.kind = kind;
  grid.window = kind == StateKind::h ? 1 : window;
  grid.n_layers = n_layers;
  grid.n_pairs = static_cast<int>(pairs.size());
  grid.n_skipped = n_skipped;
  grid.values.assign(n_layers, std::vector<double>(n_roles, 0.0));
  grid.counts.assign(n_layers, std::vector<int>(n_roles, 0));
  grid.layers_restored.resize(n_layers);
  for (int l = 1; l <= n_layers; ++l) {
    const auto [lo, hi] = window_bounds(l, grid.window, n_layers);
    grid.layers_restored[l - 1] = hi - lo + 1;
  }

  // one grid per pair, reduced in pair order
  std::vector<std::vector<std::vector<double>>> per_pair(pairs.size());
  parallel_for(static_cast<int>(pairs.size()), [&](int p) {
    const TracePair& pair = pairs[p];
    auto& mine = per_pair[p];
    mine.assign(n_layers, std::vector<double>(n_roles, 0.0));
    std::vector<std::vector<int>> cnt(n_layers, std::vector<int>(n_roles, 0));
    for (int l = 1; l <= n_layers; ++l) {
      for (int t = 0; t < pair.seq_len(); ++t) {
        const double ie = indirect_effect(model, pair, kind, l, t, window);
        const int r = static_cast<int>(role_of(pair.clean_fact, t));
        mine[l - 1][r] += ie;
        cnt[l - 1][r] += 1;
      }
    }
    // store per-role sums and counts; counts folded below via role layout
    for (int l = 0; l < n_layers; ++l)
      for (int r = 0; r < n_roles; ++r)
        if (cnt[l][r]) mine[l][r] /= cnt[l][r];  // per-pair role mean
  });

  for (size_t p = 0; p < pairs.size(); ++p) {
    for (int l = 0; l < n_layers; ++l) {
      for (int r = 0; r < n_roles; ++r) {
        // every pair contributes one role mean per cell; relation cells may
        // be absent for prompts without free relation tokens
        bool present = true;
        if (r == static_cast<int>(TokenRole::relation)) {
          const Fact& f = pairs[p].clean_fact;
          present = f.prompt_last - f.subject_last > 1 || f.subject_first > 0;
        }
        if (!present) continue;
        grid.values[l][r] += per_pair[p][l][r];
        grid.counts[l][r] += 1;
      }
    }
  }
  for (int l = 0; l < n_layers; ++l)
    for (int r = 0; r < n_roles; ++r)
      if (grid.counts[l][r]) grid.values[l][r] /= grid.counts[l][r];
  return grid;
}

// --- path blocking ------------------------------------------------------------

// IE of the h patch at (layer, token) while the blocked state family at that
// token is pinned to its corrupted-run values for every layer strictly after
// the patched one. Pinning o severs the s and g contributions as well.
template <typename T>
double path_blocked_ie(const MambaLMT<T>& model, const TracePair& pair, int token,
                       StateKind blocked_kind, int layer) {
  if (blocked_kind != StateKind::s && blocked_kind != StateKind::g &&
      blocked_kind != StateKind::o) {
    throw ContractError("path blocking supports kinds s, g, o");
  }
  std::vector<InterventionT<T>> ivs;
  ivs.push_back(InterventionT<T>::replace_at(
      StateKind::h, layer, token, pair.clean_cache.state_row(StateKind::h, layer, token)));
  for (int l = layer + 1; l <= model.config.n_layers; ++l) {
    ivs.push_back(InterventionT<T>::replace_at(
        blocked_kind, l, token, pair.corrupt_cache.state_row(blocked_kind, l, token)));
  }
  auto patched = forward(model, pair.corrupt_fact.tokens, ivs);
  const double p_patched =
      next_token_probs(patched.logits)[pair.clean_fact.object_token];
  return (p_patched - pair.p_corrupt) / pair.denominator();
}

struct PathBlockReport {
  std::string token_role;  // "subject-last" or "prompt-last"
  int n_pairs = 0;
  std::vector<double> base_ie;                         // IE(h) per layer, no blocking
  std::map<std::string, std::vector<double>> blocked;  // kind -> IE per layer

  nlohmann::json to_json() const {
    nlohmann::json blocked_json;
    for (const auto& [kind, v] : blocked) blocked_json[kind] = v;
    return nlohmann::json{{"token_role", token_role},
                          {"n_pairs", n_pairs},
                          {"base_ie", base_ie},
                          {"blocked_ie", blocked_json}};
  }
};

// Fig-style comparison: per layer, IE of the h patch alone and under path
// blocking for each of s, g, o, averaged over pairs at one token role.
template <typename T>
PathBlockReport path_block_profile(const MambaLMT<T>& model,
                                   const std::vector<TracePair>& pairs, bool at_subject_last) {
  if (pairs.empty()) throw EmptyGridError();
  const int n_layers = model.config.n_layers;
  PathBlockReport rep;
  rep.token_role = at_subject_last ? "subject-last" : "prompt-last";
  rep.n_pairs = static_cast<int>(pairs.size());
  rep.base_ie.assign(n_layers, 0.0);
  for (StateKind k : {StateKind::s, StateKind::g, StateKind::o}) {
    rep.blocked[to_string(k)].assign(n_layers, 0.0);
  }

  struct PairResult {
    std::vector<double> base;
    std::map<std::string, std::vector<double>> blocked;
  };
  std::vector<PairResult> results(pairs.size());
  parallel_for(static_cast<int>(pairs.size()), [&](int p) {
    const TracePair& pair = pairs[p];
    const int token =
        at_subject_last ? pair.clean_fact.subject_last : pair.clean_fact.prompt_last;
    PairResult r;
    r.base.resize(n_layers);
    for (int l = 1; l <= n_layers; ++l) {
      r.base[l - 1] = indirect_effect(model, pair, StateKind::h, l, token, 1);
    }
    for (StateKind k : {StateKind::s, StateKind::g, StateKind::o}) {
      auto& v = r.blocked[to_string(k)];
      v.resize(n_layers);
      for (int l = 1; l <= n_layers; ++l) {
        v[l - 1] = path_blocked_ie(model, pair, token, k, l);
      }
    }
    results[p] = std::move(r);
  });

  for (const auto& r : results) {
    for (int l = 0; l < n_layers; ++l) rep.base_ie[l] += r.base[l];
    for (const auto& [kind, v] : r.blocked)
      for (int l = 0; l < n_layers; ++l) rep.blocked[kind][l] += v[l];
  }
  const double inv = 1.0 / double(pairs.size());
  for (int l = 0; l < n_layers; ++l) rep.base_ie[l] *= inv;
  for (auto& [kind, v] : rep.blocked)
    for (int l = 0; l < n_layers; ++l) v[l] *= inv;
  return rep;
}

// --- W_o isolation ---------------------------------------------------------------

// Elementwise IE_o - (IE_s + IE_g) over grids computed from the same pairs
// with the same window.
inline TraceGrid subtract_grids(const TraceGrid& o_grid, const TraceGrid& s_grid,
                                const TraceGrid& g_grid) {
  auto compatible = [&](const TraceGrid& a, const TraceGrid& b) {
    return a.n_layers == b.n_layers && a.n_pairs == b.n_pairs && a.window == b.window &&
           a.counts == b.counts;
  };
  if (!compatible(o_grid, s_grid) || !compatible(o_grid, g_grid)) {
    throw ContractError("grids mismatched in shape or pair set");
  }
  TraceGrid out = o_grid;
  for (int l = 0; l < out.n_layers; ++l) {
    for (size_t r = 0; r < role_names().size(); ++r) {
      out.values[l][r] = o_grid.values[l][r] - s_grid.values[l][r] - g_grid.values[l][r];
    }
  }
  return out;
}

template <typename T>
TraceGrid wo_isolation(const MambaLMT<T>& model, const std::vector<TracePair>& pairs,
                       int window) {
  TraceGrid o_grid = trace_grid(model, pairs, StateKind::o, window);
  TraceGrid s_grid = trace_grid(model, pairs, StateKind::s, window);
  TraceGrid g_grid = trace_grid(model, pairs, StateKind::g, window);
  return subtract_grids(o_grid, s_grid, g_grid);
}

}  // namespace ssmlens
