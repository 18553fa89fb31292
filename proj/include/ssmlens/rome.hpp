// SPDX-License-Identifier: Apache-2.0
//
// Rank-one model editing. A projection matrix W is treated as an associative
// memory: the edit inserts the association k* -> v* as
//
//   Delta = (v* - W k*) (C^-1 k*)^T / ((C^-1 k*)^T k*)
//
// where C is the uncentered second moment of keys seen at the site plus a
// ridge. (W + Delta) k* = v* while keys C-conjugate-orthogonal to k* are
// untouched. v* is found by gradient descent on the site output so the model
// emits the counterfactual object.

#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ssmlens/corpus.hpp"
#include "ssmlens/model.hpp"
#include "ssmlens/parallel.hpp"
#include "ssmlens/rng.hpp"

namespace ssmlens {

enum class EditMatrix { W_a, W_g, W_o };

inline const char* to_string(EditMatrix m) {
  switch (m) {
    case EditMatrix::W_a: return "W_a";
    case EditMatrix::W_g: return "W_g";
    case EditMatrix::W_o: return "W_o";
  }
  return "?";
}

inline EditMatrix edit_matrix_from(const std::string& s) {
  if (s == "W_a") return EditMatrix::W_a;
  if (s == "W_g") return EditMatrix::W_g;
  if (s == "W_o") return EditMatrix::W_o;
  throw ContractError("unknown edit matrix '" + s + "'");
}

struct EditSite {
  int layer = 1;
  EditMatrix matrix = EditMatrix::W_o;

  // W_a and W_g read the normalized block input (dim d); W_o reads s*g
  // (dim 2d).
  int key_dim(const ModelConfig& cfg) const {
    return matrix == EditMatrix::W_o ? cfg.d_inner() : cfg.d_model;
  }
  int value_dim(const ModelConfig& cfg) const {
    return matrix == EditMatrix::W_o ? cfg.d_model : cfg.d_inner();
  }
  // The state that carries the raw matrix output in the forward pass.
  StateKind output_kind() const {
    switch (matrix) {
      case EditMatrix::W_a: return StateKind::a;
      case EditMatrix::W_g: return StateKind::g_pre;
      case EditMatrix::W_o: return StateKind::o;
    }
    return StateKind::o;
  }
  template <typename T>
  TensorT<T>& weights(MambaLMT<T>& model) const {
    auto& blk = model.blocks.at(layer - 1);
    switch (matrix) {
      case EditMatrix::W_a: return blk.w_a;
      case EditMatrix::W_g: return blk.w_g;
      case EditMatrix::W_o: return blk.w_o;
    }
    return blk.w_o;
  }
  template <typename T>
  const TensorT<T>& weights(const MambaLMT<T>& model) const {
    return weights(const_cast<MambaLMT<T>&>(model));
  }
};

struct EditRequest {
  std::string subject;
  std::string relation_id;
  std::string template_str;  // "{}"-slotted main prompt
  std::string object_true;
  std::string object_new;
  std::vector<std::string> paraphrases;  // more "{}"-slotted templates
  std::vector<std::pair<std::string, std::string>> neighbors;  // (subject, object)

  void validate() const {
    if (object_true == object_new) throw ContractError("edit target equals current object");
    for (const auto& [s, o] : neighbors) {
      if (o == object_new) {
        throw ContractError("neighbor '" + s + "' maps to the edit target");
      }
    }
  }
};

// --- request files (JSON lines) ------------------------------------------------

inline void save_requests(const std::vector<EditRequest>& reqs, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ContractError("cannot open " + path);
  for (const auto& r : reqs) {
    nlohmann::json nb = nlohmann::json::array();
    for (const auto& [s, o] : r.neighbors) nb.push_back({{"subject", s}, {"object", o}});
    os << nlohmann::json{{"subject", r.subject},
                         {"relation_id", r.relation_id},
                         {"template", r.template_str},
                         {"object_true", r.object_true},
                         {"object_new", r.object_new},
                         {"paraphrases", r.paraphrases},
                         {"neighbors", nb}}
              .dump()
       << "\n";
  }
}

inline std::vector<EditRequest> load_requests(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ContractError("cannot open " + path);
  std::vector<EditRequest> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    EditRequest r;
    r.subject = j.at("subject").get<std::string>();
    r.relation_id = j.at("relation_id").get<std::string>();
    r.template_str = j.at("template").get<std::string>();
    r.object_true = j.at("object_true").get<std::string>();
    r.object_new = j.at("object_new").get<std::string>();
    r.paraphrases = j.at("paraphrases").get<std::vector<std::string>>();
    for (const auto& n : j.at("neighbors")) {
      r.neighbors.emplace_back(n.at("subject").get<std::string>(),
                               n.at("object").get<std::string>());
    }
    r.validate();
    out.push_back(std::move(r));
  }
  return out;
}

// Counterfact-shaped requests built from world facts: o* is another object
// of the same relation, paraphrases are the remaining templates, neighbors
// are other subjects whose object differs from o*.
inline std::vector<EditRequest> requests_from_world(const World& world, int max_requests,
                                                    uint64_t seed, int max_neighbors = 8) {
  std::mt19937_64 gen(substream_seed(seed, "requests"));
  std::vector<EditRequest> out;
  for (size_t ri = 0; ri < world.relations.size(); ++ri) {
    const RelationSet& rel = world.relations[ri];
    std::vector<std::string> objects;
    for (const auto& [s, o] : rel.pairs) {
      if (std::find(objects.begin(), objects.end(), o) == objects.end()) objects.push_back(o);
    }
    for (size_t pi = 0; pi < rel.pairs.size(); ++pi) {
      const auto& [subj, obj] = rel.pairs[pi];
      std::vector<std::string> alternatives;
      for (const auto& o : objects) {
        if (o != obj) alternatives.push_back(o);
      }
      if (alternatives.empty()) continue;
      EditRequest r;
      r.subject = subj;
      r.relation_id = rel.relation_id;
      r.template_str = rel.templates[0];
      r.object_true = obj;
      r.object_new = alternatives[std::uniform_int_distribution<size_t>(
          0, alternatives.size() - 1)(gen)];
      for (size_t t = 1; t < rel.templates.size(); ++t) r.paraphrases.push_back(rel.templates[t]);
      for (size_t qi = 0; qi < rel.pairs.size() && int(r.neighbors.size()) < max_neighbors;
           ++qi) {
        if (qi == pi) continue;
        const auto& [ns, no] = rel.pairs[qi];
        if (no != r.object_new) r.neighbors.emplace_back(ns, no);
      }
      r.validate();
      out.push_back(std::move(r));
    }
  }
  std::shuffle(out.begin(), out.end(), gen);
  if (max_requests > 0 && int(out.size()) > max_requests) out.resize(max_requests);
  return out;
}

// --- keys and second moments ------------------------------------------------------

namespace detail {

// The exact input vector the site matrix sees at (layer, position).
template <typename T>
TensorT<T> key_from_cache(const ActivationCacheT<T>& cache, const MambaLMT<T>& model,
                          const EditSite& site, int position) {
  const auto& blk = model.blocks.at(site.layer - 1);
  if (site.matrix == EditMatrix::W_o) {
    TensorT<T> s = cache.state_row(StateKind::s, site.layer, position);
    TensorT<T> g = cache.state_row(StateKind::g, site.layer, position);
    return ops::mul(s, g);
  }
  const TensorT<T>& h_prev = site.layer == 1
                                 ? cache.h0
                                 : cache.state(StateKind::h, site.layer - 1);
  TensorT<T> row({1, h_prev.dim(1)});
  for (int i = 0; i < h_prev.dim(1); ++i) row(0, i) = h_prev(position, i);
  TensorT<T> x = ops::rmsnorm_rows(row, blk.norm_gain);
  TensorT<T> key({x.dim(1)});
  for (int i = 0; i < x.dim(1); ++i) key[i] = x(0, i);
  return key;
}

}  // namespace detail

template <typename T>
TensorT<T> key_at(const MambaLMT<T>& model, const EditSite& site,
                  const std::vector<int>& tokens, int position) {
  if (position < 0 || position >= static_cast<int>(tokens.size())) {
    throw ContractError("key position out of range");
  }
  auto run = forward(model, tokens);
  return detail::key_from_cache(run.cache, model, site, position);
}

// k*: the site input at the subject-last position, averaged over the bare
// prompt and a few random prefix contexts.
template <typename T>
TensorT<T> compute_key(const MambaLMT<T>& model, const EditSite& site,
                       const std::vector<int>& prompt_tokens, int subject_last,
                       int vocab_limit, uint64_t seed, int n_prefixes = 4) {
  TensorT<T> acc = key_at(model, site, prompt_tokens, subject_last);
  std::mt19937_64 gen(substream_seed(seed, "key-prefix"));
  std::uniform_int_distribution<int> pick_len(1, 4);
  std::uniform_int_distribution<int> pick_tok(0, vocab_limit - 1);
  for (int p = 0; p < n_prefixes; ++p) {
    std::vector<int> tokens;
    const int len = pick_len(gen);
    for (int i = 0; i < len; ++i) tokens.push_back(pick_tok(gen));
    tokens.insert(tokens.end(), prompt_tokens.begin(), prompt_tokens.end());
    TensorT<T> k = key_at(model, site, tokens, subject_last + len);
    for (size_t i = 0; i < acc.numel(); ++i) acc[i] += k[i];
  }
  return ops::scale(acc, T(1) / T(n_prefixes + 1));
}

struct SecondMoment {
  Tensor c;  // [k_dim x k_dim], symmetric positive definite after ridge
  int n_samples = 0;
  double ridge = 0.0;
};

// C = (1/n) sum k k^T + ridge I. ridge < 0 selects the scale-aware default
// 1e-4 trace(C)/k_dim.
inline SecondMoment second_moment_from_keys(const std::vector<Tensor>& keys, double ridge) {
  if (keys.empty()) throw ContractError("second moment needs at least one key");
  const int k_dim = keys[0].dim(0);
  TensorT<double> acc({k_dim, k_dim});
  for (const Tensor& k : keys) {
    for (int i = 0; i < k_dim; ++i)
      for (int j = 0; j < k_dim; ++j) acc(i, j) += double(k[i]) * double(k[j]);
  }
  SecondMoment m;
  m.n_samples = static_cast<int>(keys.size());
  m.c = Tensor({k_dim, k_dim});
  double trace = 0.0;
  for (int i = 0; i < k_dim; ++i) trace += acc(i, i) / double(m.n_samples);
  m.ridge = ridge >= 0.0 ? ridge : 1e-4 * trace / double(k_dim);
  for (int i = 0; i < k_dim; ++i)
    for (int j = 0; j < k_dim; ++j)
      m.c(i, j) =
          static_cast<float>(acc(i, j) / double(m.n_samples) + (i == j ? m.ridge : 0.0));
  return m;
}

// Keys harvested at the site from random (prompt, position) samples of the
// corpus.
template <typename T>
SecondMoment collect_second_moment(const MambaLMT<T>& model, const EditSite& site,
                                   const std::vector<std::vector<int>>& corpus, int n,
                                   double ridge, uint64_t seed) {
  if (corpus.empty()) throw ContractError("second moment needs a nonempty corpus");
  const int k_dim = site.key_dim(model.config);
  if (n < k_dim) {
    std::fprintf(stderr, "warning: %d key samples for dim %d is rank-deficient pre-ridge\n",
                 n, k_dim);
  }

  std::mt19937_64 gen(substream_seed(seed, "moments"));
  std::uniform_int_distribution<size_t> pick_prompt(0, corpus.size() - 1);
  // sample positions, then batch by prompt so each prompt runs once
  std::map<size_t, std::vector<int>> wanted;
  for (int i = 0; i < n; ++i) {
    const size_t pi = pick_prompt(gen);
    std::uniform_int_distribution<int> pick_pos(0, int(corpus[pi].size()) - 1);
    wanted[pi].push_back(pick_pos(gen));
  }

  std::vector<Tensor> keys;
  keys.reserve(n);
  for (const auto& [pi, positions] : wanted) {
    auto run = forward(model, corpus[pi]);
    for (int pos : positions) {
      keys.push_back(detail::key_from_cache(run.cache, model, site, pos).template cast<float>());
    }
  }
  return second_moment_from_keys(keys, ridge);
}

// --- value optimization --------------------------------------------------------

struct ValueOptHyper {
  double lambda_kl = 0.0625;
  double lambda_wd = 0.5;
  int max_steps = 100;
  double lr = 0.5;
  double clamp_ratio = 4.0;   // cap on |v| / |v0|
  double stop_margin = 0.95;  // stop once p(o*) > margin * p(top-1)
};

struct ValueOptReport {
  int steps = 0;
  double p_target = 0.0;  // p(o* | x) with v* spliced in
  bool converged = false;
};

namespace detail {

// Loss for a candidate site output v on the request prompt:
//   -log p_v(o* | x) + l_kl KL(p_v(.|essence) || p(.|essence)) + l_wd |v-v0|^2/|v0|^2
template <typename T>
Var vstar_loss(Tape<T>& tp, const MambaLMT<T>& model, const EditSite& site, Var v,
               const std::vector<int>& prompt, int subject_last,
               const std::vector<int>& essence, int essence_subject_last, int target_token,
               const TensorT<T>& v0, const TensorT<T>& essence_ref_logprobs,
               const ValueOptHyper& hy) {
  std::vector<VarPatch> patches{{site.output_kind(), site.layer, subject_last, v}};
  auto fv = build_forward(tp, model, prompt, nullptr, &patches);
  Var nll = tp.scale(
      tp.pick(tp.log_softmax_row(fv.logits, int(prompt.size()) - 1), target_token), T(-1));

  std::vector<VarPatch> essence_patches{
      {site.output_kind(), site.layer, essence_subject_last, v}};
  auto fe = build_forward(tp, model, essence, nullptr, &essence_patches);
  Var ls_e = tp.log_softmax_row(fe.logits, int(essence.size()) - 1);
  Var kl = tp.sum(tp.mul(tp.exp(ls_e), tp.sub(ls_e, tp.constant(essence_ref_logprobs))));

  Var dv = tp.sub(v, tp.constant(v0));
  const T inv_v0 = T(1) / std::max(ops::dot(v0, v0), T(1e-12));
  Var wd = tp.scale(tp.sum(tp.mul(dv, dv)), inv_v0);

  return tp.add(nll, tp.add(tp.scale(kl, T(hy.lambda_kl)), tp.scale(wd, T(hy.lambda_wd))));
}

}  // namespace detail

// Gradient-descent search for v*: the site output at (layer, subject-last)
// that makes the model emit the target object while keeping the subject's
// generic continuations and staying near the original output.
template <typename T>
std::pair<TensorT<T>, ValueOptReport> optimize_value(
    const MambaLMT<T>& model, const EditSite& site, const std::vector<int>& prompt,
    int subject_last, const std::vector<int>& essence, int target_token,
    const ValueOptHyper& hy = {}) {
  const int essence_last = int(essence.size()) - 1;

  // originals: v0 at the site, reference essence distribution
  auto base = forward(model, prompt);
  TensorT<T> v0 = base.cache.state_row(site.output_kind(), site.layer, subject_last);
  auto essence_base = forward(model, essence);
  TensorT<T> ref({model.config.vocab_size});
  {
    TensorT<T> probs = next_token_probs(essence_base.logits);
    for (int i = 0; i < model.config.vocab_size; ++i) ref[i] = std::log(probs[i]);
  }
  const T v0_norm = ops::norm2(v0);

  TensorT<T> v = v0;
  TensorT<T> m_state(v.shape()), s_state(v.shape());
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  ValueOptReport report;
  for (int step = 0; step < hy.max_steps; ++step) {
    // convergence probe with the current v spliced in
    {
      std::vector<InterventionT<T>> ivs{InterventionT<T>::replace_at(
          site.output_kind(), site.layer, subject_last, v)};
      auto probe = forward(model, prompt, ivs);
      TensorT<T> probs = next_token_probs(probe.logits);
      report.p_target = probs[target_token];
      int top = 0;
      for (int i = 1; i < model.config.vocab_size; ++i)
        if (probs[i] > probs[top]) top = i;
      if (report.p_target > hy.stop_margin * probs[top]) {
        report.converged = true;
        break;
      }
    }

    Tape<T> tp(true);
    tp.set_params_trainable(false);
    Var vv = tp.variable(v);
    Var loss = detail::vstar_loss(tp, model, site, vv, prompt, subject_last, essence,
                                  essence_last, target_token, v0, ref, hy);
    tp.backward(loss);
    const TensorT<T>& g = tp.grad(vv);

    const double bc1 = 1.0 - std::pow(beta1, step + 1);
    const double bc2 = 1.0 - std::pow(beta2, step + 1);
    for (size_t i = 0; i < v.numel(); ++i) {
      m_state[i] = static_cast<T>(beta1 * m_state[i] + (1.0 - beta1) * g[i]);
      s_state[i] = static_cast<T>(beta2 * s_state[i] + (1.0 - beta2) * double(g[i]) * g[i]);
      v[i] -= static_cast<T>(hy.lr * (m_state[i] / bc1) /
                             (std::sqrt(s_state[i] / bc2) + adam_eps));
    }
    // keep v inside a ball around the original output
    const T vn = ops::norm2(v);
    if (vn > T(hy.clamp_ratio) * v0_norm) {
      v = ops::scale(v, T(hy.clamp_ratio) * v0_norm / vn);
    }
    report.steps = step + 1;
  }

  if (!report.converged) {
    std::vector<InterventionT<T>> ivs{InterventionT<T>::replace_at(
        site.output_kind(), site.layer, subject_last, v)};
    auto probe = forward(model, prompt, ivs);
    report.p_target = next_token_probs(probe.logits)[target_token];
  }
  return {std::move(v), report};
}

// --- the closed-form update -----------------------------------------------------

// Delta = (v* - W k*) (C^-1 k*)^T / ((C^-1 k*)^T k*).
inline Tensor rank_one_update(const Tensor& w, const SecondMoment& moment, const Tensor& k,
                              const Tensor& v) {
  const int out_dim = w.dim(0), in_dim = w.dim(1);
  if (k.dim(0) != in_dim || v.dim(0) != out_dim) {
    throw DimError("rank_one_update shape mismatch");
  }
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      c_map(moment.c.data(), in_dim, in_dim);
  Eigen::Map<const Eigen::VectorXf> k_map(k.data(), in_dim);

  Eigen::LLT<Eigen::MatrixXf> llt(c_map);
  if (llt.info() != Eigen::Success) {
    throw ContractError("second moment is not positive definite");
  }
  Eigen::VectorXf u = llt.solve(k_map);
  const double denom = double(u.dot(k_map));
  if (denom <= 0.0) throw ContractError("singular key: (C^-1 k)^T k <= 0");

  Tensor residual({out_dim});
  for (int i = 0; i < out_dim; ++i) {
    float acc = 0.f;
    for (int j = 0; j < in_dim; ++j) acc += w(i, j) * k[j];
    residual[i] = v[i] - acc;
  }
  Tensor delta({out_dim, in_dim});
  for (int i = 0; i < out_dim; ++i)
    for (int j = 0; j < in_dim; ++j)
      delta(i, j) = static_cast<float>(double(residual[i]) * double(u[j]) / denom);
  ensure_finite(delta, "rank_one_update");
  return delta;
}

// --- evaluation -------------------------------------------------------------------

struct EditOutcome {
  bool efficacy = false;
  double paraphrase_score = -1.0;  // -1 when no paraphrases given
  double neighborhood_score = -1.0;
  double p_new = 0.0, p_true = 0.0;
  double delta_norm = 0.0;
};

struct EditReport {
  double es = 0.0, ps = 0.0, ns = 0.0, s = 0.0;
  int n_requests = 0;
  int n_errors = 0;
  bool ps_present = true, ns_present = true;
  std::vector<EditOutcome> outcomes;
};

inline double harmonic3(double a, double b, double c) {
  return 3.0 / (1.0 / a + 1.0 / b + 1.0 / c);
}

// ES: p(o*) > p(o) on the edited model. PS: the same over paraphrases.
// NS: p(o_n) > p(o*) over neighbor prompts. Read-only on both models.
template <typename T>
EditOutcome evaluate_edit(const MambaLMT<T>& model_post, const MambaLMT<T>& model_pre,
                          const EditSite& site, const EditRequest& req, const Tokenizer& tok) {
  if (model_post.config != model_pre.config) {
    throw ContractError("pre/post models differ in config");
  }
  req.validate();
  const int tok_new = tok.id_of(req.object_new);
  const int tok_true = tok.id_of(req.object_true);

  EditOutcome out;
  {
    auto run = forward(model_post, tok.tokenize(render_template(req.template_str, req.subject)));
    TensorT<T> p = next_token_probs(run.logits);
    out.p_new = p[tok_new];
    out.p_true = p[tok_true];
    out.efficacy = out.p_new > out.p_true;
  }
  if (!req.paraphrases.empty()) {
    int hits = 0;
    for (const auto& tmpl : req.paraphrases) {
      auto run = forward(model_post, tok.tokenize(render_template(tmpl, req.subject)));
      TensorT<T> p = next_token_probs(run.logits);
      if (p[tok_new] > p[tok_true]) ++hits;
    }
    out.paraphrase_score = double(hits) / double(req.paraphrases.size());
  }
  if (!req.neighbors.empty()) {
    int hits = 0;
    for (const auto& [ns, no] : req.neighbors) {
      auto run = forward(model_post, tok.tokenize(render_template(req.template_str, ns)));
      TensorT<T> p = next_token_probs(run.logits);
      if (p[tok.id_of(no)] > p[tok_new]) ++hits;
    }
    out.neighborhood_score = double(hits) / double(req.neighbors.size());
  }
  {
    const TensorT<T>& w_post = site.weights(model_post);
    const TensorT<T>& w_pre = site.weights(model_pre);
    double acc = 0.0;
    for (size_t i = 0; i < w_post.numel(); ++i) {
      const double d = double(w_post[i]) - double(w_pre[i]);
      acc += d * d;
    }
    out.delta_norm = std::sqrt(acc);
  }
  return out;
}

inline EditReport aggregate_outcomes(std::vector<EditOutcome> outcomes, int n_errors = 0) {
  EditReport rep;
  rep.outcomes = std::move(outcomes);
  rep.n_requests = static_cast<int>(rep.outcomes.size());
  rep.n_errors = n_errors;
  if (rep.outcomes.empty()) return rep;
  int n_ps = 0, n_ns = 0;
  for (const auto& o : rep.outcomes) {
    rep.es += o.efficacy ? 1.0 : 0.0;
    if (o.paraphrase_score >= 0.0) {
      rep.ps += o.paraphrase_score;
      ++n_ps;
    }
    if (o.neighborhood_score >= 0.0) {
      rep.ns += o.neighborhood_score;
      ++n_ns;
    }
  }
  rep.es /= rep.n_requests;
  rep.ps_present = n_ps > 0;
  rep.ns_present = n_ns > 0;
  rep.ps = rep.ps_present ? rep.ps / n_ps : 0.0;
  rep.ns = rep.ns_present ? rep.ns / n_ns : 0.0;

  // harmonic mean over the metrics that are present
  std::vector<double> parts{rep.es};
  if (rep.ps_present) parts.push_back(rep.ps);
  if (rep.ns_present) parts.push_back(rep.ns);
  bool all_positive = true;
  for (double p : parts) all_positive &= p > 0.0;
  if (all_positive) {
    double inv = 0.0;
    for (double p : parts) inv += 1.0 / p;
    rep.s = double(parts.size()) / inv;
  } else {
    rep.s = 0.0;
  }
  return rep;
}

// --- one full edit ------------------------------------------------------------------

struct AppliedEdit {
  Tensor delta;
  TensorT<float> key;
  TensorT<float> value;
  ValueOptReport value_report;
};

// Computes k*, optimizes v*, applies the rank-one update in place.
template <typename T>
AppliedEdit apply_rome_edit(MambaLMT<T>& model, const EditSite& site, const EditRequest& req,
                            const Tokenizer& tok, const SecondMoment& moment, uint64_t seed,
                            const ValueOptHyper& hyper = {}) {
  req.validate();
  Fact fact;
  fact.prompt = render_template(req.template_str, req.subject);
  fact.tokens = tok.tokenize(fact.prompt);
  const std::string prefix = req.template_str.substr(0, req.template_str.find("{}"));
  const int n_prefix = int(tok.tokenize(prefix).size());
  fact.subject_first = n_prefix;
  fact.subject_last = n_prefix + int(tok.tokenize(req.subject).size()) - 1;
  fact.prompt_last = int(fact.tokens.size()) - 1;

  TensorT<T> key = compute_key(model, site, fact.tokens, fact.subject_last,
                               tok.vocab_size(), seed);
  std::vector<int> essence = tok.tokenize(req.subject);
  auto [value, vrep] = optimize_value(model, site, fact.tokens, fact.subject_last, essence,
                                      tok.id_of(req.object_new), hyper);

  TensorT<T>& w = site.weights(model);
  Tensor delta = rank_one_update(w, moment, key, value);
  for (size_t i = 0; i < w.numel(); ++i) w[i] += delta[i];

  AppliedEdit applied;
  applied.delta = std::move(delta);
  applied.key = std::move(key);
  applied.value = std::move(value);
  applied.value_report = vrep;
  return applied;
}

// --- layer/matrix sweep ----------------------------------------------------------------

struct SweepRow {
  int layer;
  std::string matrix;
  double es, ps, ns, s;
  int n_errors;
};

// One edit per fresh model copy; the base model is never written.
template <typename T>
std::vector<SweepRow> layer_matrix_sweep(const MambaLMT<T>& base,
                                         const std::vector<EditRequest>& requests,
                                         const std::vector<int>& layers,
                                         const std::vector<EditMatrix>& matrices,
                                         const Tokenizer& tok,
                                         const std::vector<std::vector<int>>& corpus,
                                         int moment_samples, uint64_t seed,
                                         const ValueOptHyper& hyper = {}) {
  std::vector<SweepRow> rows;
  for (int layer : layers) {
    for (EditMatrix mat : matrices) {
      const EditSite site{layer, mat};
      const SecondMoment moment =
          collect_second_moment(base, site, corpus, moment_samples, -1.0, seed);

      std::vector<EditOutcome> outcomes(requests.size());
      std::vector<int> failed(requests.size(), 0);
      parallel_for(static_cast<int>(requests.size()), [&](int i) {
        try {
          MambaLMT<T> copy = base;
          apply_rome_edit(copy, site, requests[i], tok, moment,
                          substream_seed(seed, "edit" + std::to_string(i)), hyper);
          outcomes[i] = evaluate_edit(copy, base, site, requests[i], tok);
        } catch (const std::exception&) {
          failed[i] = 1;
        }
      });

      std::vector<EditOutcome> ok;
      int n_err = 0;
      for (size_t i = 0; i < requests.size(); ++i) {
        if (failed[i]) {
          ++n_err;
        } else {
          ok.push_back(outcomes[i]);
        }
      }
      EditReport rep = aggregate_outcomes(std::move(ok), n_err);
      rows.push_back(SweepRow{layer, to_string(mat), rep.es, rep.ps, rep.ns, rep.s, n_err});
    }
  }
  return rows;
}

}  // namespace ssmlens
