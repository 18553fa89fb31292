// SPDX-License-Identifier: Apache-2.0
//
// Next-token training on the rendered fact corpus until the model memorizes
// it. Batch gradients are evaluated per sequence (possibly in parallel) and
// reduced in index order, so a run is reproducible for a fixed seed no
// matter the thread count.

#pragma once

#include <chrono>
#include <map>
#include <set>

#include "ssmlens/corpus.hpp"
#include "ssmlens/model.hpp"
#include "ssmlens/parallel.hpp"
#include "ssmlens/tape.hpp"

namespace ssmlens {

class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainHyper {
  double lr = 1e-3;
  int steps = 20000;
  int batch = 32;
  uint64_t seed = 0;
  int eval_every = 200;
  double target_recall = 0.999;  // strict top-1 recall that stops training
  bool holdout_rotate = false;   // exclude template (r mod n_templates) of relation r
};

struct TrainReport {
  int steps_run = 0;
  double final_loss = 0.0;
  std::map<std::string, double> recall_per_relation;  // range-restricted top-1
  double recall_strict = 0.0;                         // full-vocab top-1, train templates
  double recall_holdout = -1.0;  // strict recall on held-out templates, -1 if none
  double seconds = 0.0;
};

namespace detail {

template <typename T>
struct TrainSequence {
  std::vector<int> tokens;  // prompt + object
  int relation;
  int object_token;
  std::vector<int> range_tokens;  // candidate objects of the relation
};

inline bool is_holdout(const TrainHyper& hy, int relation, int template_id, int n_templates) {
  return hy.holdout_rotate && template_id == relation % n_templates;
}

}  // namespace detail

// Range-restricted top-1: the decoded token is the argmax over the
// relation's own object tokens, which makes an untrained model score at
// chance = 1/range instead of 1/vocab.
template <typename T>
double restricted_recall(const TensorT<T>& logits, const std::vector<int>& range_tokens,
                         int object_token) {
  int best = range_tokens[0];
  const int last = logits.dim(0) - 1;
  for (int cand : range_tokens) {
    if (logits(last, cand) > logits(last, best)) best = cand;
  }
  return best == object_token ? 1.0 : 0.0;
}

struct RecallStats {
  std::map<std::string, double> restricted_per_relation;
  double strict = 0.0;
  double strict_holdout = -1.0;
  int n_train = 0, n_holdout = 0;
};

template <typename T>
RecallStats evaluate_recall(const MambaLMT<T>& model, const World& world, const Tokenizer& tok,
                            const TrainHyper& hy) {
  RecallStats st;
  std::map<std::string, std::pair<double, int>> per_rel;
  int strict_hits = 0, holdout_hits = 0;

  struct Item {
    Fact fact;
    std::vector<int> range_tokens;
    bool holdout;
  };
  std::vector<Item> items;
  for (size_t r = 0; r < world.relations.size(); ++r) {
    const RelationSet& rel = world.relations[r];
    std::set<int> range;
    for (const auto& [s, o] : rel.pairs) range.insert(tok.id_of(o));
    std::vector<int> range_tokens(range.begin(), range.end());
    for (size_t p = 0; p < rel.pairs.size(); ++p) {
      for (size_t t = 0; t < rel.templates.size(); ++t) {
        Item it;
        it.fact = render_fact(world, tok, static_cast<int>(r), static_cast<int>(p),
                              static_cast<int>(t));
        it.range_tokens = range_tokens;
        it.holdout = detail::is_holdout(hy, static_cast<int>(r), static_cast<int>(t),
                                        static_cast<int>(rel.templates.size()));
        items.push_back(std::move(it));
      }
    }
  }

  std::vector<std::pair<double, int>> results(items.size());  // (restricted, strict)
  parallel_for(static_cast<int>(items.size()), [&](int i) {
    const Item& it = items[i];
    auto run = forward(model, it.fact.tokens);
    const double restr =
        restricted_recall(run.logits, it.range_tokens, it.fact.object_token);
    const int strict = argmax_token(run.logits) == it.fact.object_token ? 1 : 0;
    results[i] = {restr, strict};
  });

  for (size_t i = 0; i < items.size(); ++i) {
    const Item& it = items[i];
    if (it.holdout) {
      st.n_holdout++;
      holdout_hits += results[i].second;
      continue;
    }
    st.n_train++;
    strict_hits += results[i].second;
    auto& [acc, n] = per_rel[world.relations[it.fact.relation].relation_id];
    acc += results[i].first;
    n++;
  }
  for (auto& [rel, accn] : per_rel) {
    st.restricted_per_relation[rel] = accn.first / accn.second;
  }
  st.strict = st.n_train ? double(strict_hits) / st.n_train : 0.0;
  if (st.n_holdout) st.strict_holdout = double(holdout_hits) / st.n_holdout;
  return st;
}

// Adam with bias correction; state keyed by parameter order.
template <typename T>
class AdamState {
 public:
  AdamState(std::vector<std::pair<std::string, TensorT<T>*>> params, double lr)
      : params_(std::move(params)), lr_(lr) {
    for (auto& [name, p] : params_) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }

  void step(const std::vector<TensorT<T>>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t k = 0; k < params_.size(); ++k) {
      TensorT<T>& p = *params_[k].second;
      const TensorT<T>& g = grads[k];
      for (size_t i = 0; i < p.numel(); ++i) {
        const double gi = g[i];
        m_[k][i] = static_cast<T>(beta1_ * m_[k][i] + (1.0 - beta1_) * gi);
        v_[k][i] = static_cast<T>(beta2_ * v_[k][i] + (1.0 - beta2_) * gi * gi);
        const double mhat = m_[k][i] / bc1;
        const double vhat = v_[k][i] / bc2;
        p[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  std::vector<std::pair<std::string, TensorT<T>*>> params_;
  std::vector<TensorT<T>> m_, v_;
  double lr_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int64_t t_ = 0;
};

template <typename T>
TrainReport train(MambaLMT<T>& model, const World& world, const TrainHyper& hy) {
  const auto t0 = std::chrono::steady_clock::now();
  const Tokenizer tok = world.tokenizer();
  if (tok.vocab_size() > model.config.vocab_size) {
    throw ContractError("world vocabulary (" + std::to_string(tok.vocab_size()) +
                        " words) exceeds model vocab_size");
  }

  // Training sequences: every (fact, template) render, object appended.
  std::vector<std::vector<int>> seqs;
  for (size_t r = 0; r < world.relations.size(); ++r) {
    const RelationSet& rel = world.relations[r];
    for (size_t p = 0; p < rel.pairs.size(); ++p) {
      for (size_t t = 0; t < rel.templates.size(); ++t) {
        if (detail::is_holdout(hy, static_cast<int>(r), static_cast<int>(t),
                               static_cast<int>(rel.templates.size()))) {
          continue;
        }
        Fact f = render_fact(world, tok, static_cast<int>(r), static_cast<int>(p),
                             static_cast<int>(t));
        if (static_cast<int>(f.tokens.size()) + 1 > model.config.max_seq_len) {
          throw ContractError("prompt '" + f.prompt + "' exceeds max_seq_len");
        }
        std::vector<int> seq = f.tokens;
        seq.push_back(f.object_token);
        seqs.push_back(std::move(seq));
      }
    }
  }
  if (seqs.empty()) throw ContractError("no training sequences");

  auto params = model.named_tensors();
  AdamState<T> adam(params, hy.lr);
  std::mt19937_64 gen(substream_seed(hy.seed, "train"));
  std::uniform_int_distribution<size_t> pick(0, seqs.size() - 1);

  TrainReport report;
  double loss_avg = 0.0;

  for (int step = 0; step < hy.steps; ++step) {
    std::vector<size_t> batch(hy.batch);
    for (auto& b : batch) b = pick(gen);

    // Equal-length sequences are stacked into one tape and run as blocks.
    // The batch mean is the length-group means weighted by group size, which
    // equals the per-sequence mean regardless of grouping.
    std::map<int, std::vector<size_t>> by_len;
    for (size_t b : batch) by_len[static_cast<int>(seqs[b].size())].push_back(b);
    struct Group {
      int len;
      std::vector<int> stacked;
      size_t count;
    };
    std::vector<Group> groups;
    for (auto& [len, members] : by_len) {
      Group g;
      g.len = len;
      g.count = members.size();
      for (size_t b : members) {
        g.stacked.insert(g.stacked.end(), seqs[b].begin(), seqs[b].end());
      }
      groups.push_back(std::move(g));
    }

    std::vector<double> losses(groups.size(), 0.0);
    std::vector<std::vector<TensorT<T>>> grads(groups.size());
    std::vector<std::string> errors(groups.size());
    parallel_for(static_cast<int>(groups.size()), [&](int i) {
      try {
        const Group& g = groups[i];
        Tape<T> tp(true);
        Var logits = build_forward_lm(tp, model, g.stacked, g.len);
        Var loss = tp.cross_entropy_next(logits, g.stacked, g.len);
        const double w = double(g.count) / double(batch.size());
        losses[i] = tp.value(loss)[0] * w;
        tp.backward(tp.scale(loss, T(w)));
        grads[i].reserve(params.size());
        for (auto& [name, p] : params) {
          const TensorT<T>* gr = tp.grad_of(p);
          grads[i].push_back(gr ? *gr : TensorT<T>(p->shape()));
        }
      } catch (const NonFiniteError& e) {
        errors[i] = e.what();
      }
    });
    for (const auto& e : errors) {
      if (!e.empty()) {
        throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": " + e);
      }
    }

    // Fixed-order reduction over length groups.
    std::vector<TensorT<T>> total;
    total.reserve(params.size());
    for (auto& [name, p] : params) total.emplace_back(p->shape());
    double loss = 0.0;
    for (size_t i = 0; i < groups.size(); ++i) {
      loss += losses[i];
      for (size_t k = 0; k < total.size(); ++k) {
        const TensorT<T>& g = grads[i][k];
        TensorT<T>& acc = total[k];
        for (size_t j = 0; j < acc.numel(); ++j) acc[j] += g[j];
      }
    }
    if (!std::isfinite(loss)) {
      throw TrainingDiverged("training diverged at step " + std::to_string(step) +
                             ": loss is not finite");
    }
    loss_avg = step ? 0.9 * loss_avg + 0.1 * loss : loss;

    adam.step(total);
    report.steps_run = step + 1;
    report.final_loss = loss;

    if (hy.eval_every > 0 && (step + 1) % hy.eval_every == 0) {
      RecallStats st = evaluate_recall(model, world, tok, hy);
      if (st.strict >= hy.target_recall) break;
    }
  }

  RecallStats st = evaluate_recall(model, world, tok, hy);
  report.recall_per_relation = st.restricted_per_relation;
  report.recall_strict = st.strict;
  report.recall_holdout = st.strict_holdout;
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace ssmlens
