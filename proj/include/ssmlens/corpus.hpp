// SPDX-License-Identifier: Apache-2.0
//
// Synthetic subject-relation-object world. Every word of the made-up
// language is one token; subjects are always two words, so swapping subjects
// never shifts token positions. Objects are single words.

#pragma once

#include <algorithm>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ssmlens/model.hpp"
#include "ssmlens/rng.hpp"
#include "ssmlens/tensor.hpp"

namespace ssmlens {

class Tokenizer {
 public:
  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::string> words) : words_(std::move(words)) {
    for (size_t i = 0; i < words_.size(); ++i) ids_[words_[i]] = static_cast<int>(i);
  }

  int vocab_size() const { return static_cast<int>(words_.size()); }

  int id_of(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) throw ContractError("unknown word '" + word + "'");
    return it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || id >= vocab_size()) throw ContractError("token id out of vocab");
    return words_[static_cast<size_t>(id)];
  }

  std::vector<int> tokenize(const std::string& text) const {
    std::vector<int> out;
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) out.push_back(id_of(w));
    return out;
  }

  std::string detokenize(const std::vector<int>& tokens) const {
    std::string out;
    for (size_t i = 0; i < tokens.size(); ++i) {
      if (i) out += ' ';
      out += word(tokens[i]);
    }
    return out;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

struct RelationSet {
  std::string relation_id;
  std::vector<std::string> templates;  // each contains one "{}" subject slot
  std::vector<std::pair<std::string, std::string>> pairs;  // (subject, object)

  int range_size() const {
    std::set<std::string> objs;
    for (const auto& [s, o] : pairs) objs.insert(o);
    return static_cast<int>(objs.size());
  }

  void validate() const {
    if (templates.size() < 3) {
      throw ContractError("relation " + relation_id + " needs >= 3 templates");
    }
    for (const auto& t : templates) {
      if (t.find("{}") == std::string::npos) {
        throw ContractError("template without subject slot: " + t);
      }
    }
    std::set<std::string> subjects;
    for (const auto& [s, o] : pairs) {
      if (!subjects.insert(s).second) {
        throw ContractError("duplicate subject '" + s + "' in " + relation_id);
      }
    }
    if (range_size() < 2) {
      throw ContractError("relation " + relation_id + " needs >= 2 distinct objects");
    }
  }
};

struct World {
  std::vector<RelationSet> relations;

  // All words of the language, sorted; tokenization is stable across runs
  // for the same world file.
  std::vector<std::string> vocabulary() const {
    std::set<std::string> words;
    auto add_text = [&](const std::string& text) {
      std::istringstream ss(text);
      std::string w;
      while (ss >> w) {
        if (w != "{}") words.insert(w);
      }
    };
    for (const auto& r : relations) {
      for (const auto& t : r.templates) add_text(t);
      for (const auto& [s, o] : r.pairs) {
        add_text(s);
        words.insert(o);
      }
    }
    return {words.begin(), words.end()};
  }

  Tokenizer tokenizer() const { return Tokenizer(vocabulary()); }

  void validate() const {
    for (const auto& r : relations) r.validate();
  }
};

// A rendered prompt whose ground-truth continuation is the object token.
struct Fact {
  int relation = 0;
  int pair = 0;
  int template_id = 0;
  std::string subject;
  std::string object;
  std::string prompt;
  std::vector<int> tokens;  // prompt only, object excluded
  int subject_first = 0;
  int subject_last = 0;
  int prompt_last = 0;
  int object_token = 0;
};

inline std::string render_template(const std::string& tmpl, const std::string& subject) {
  const auto pos = tmpl.find("{}");
  if (pos == std::string::npos) throw ContractError("template without subject slot");
  return tmpl.substr(0, pos) + subject + tmpl.substr(pos + 2);
}

inline Fact render_fact(const World& world, const Tokenizer& tok, int relation, int pair,
                        int template_id) {
  const RelationSet& r = world.relations.at(relation);
  const auto& [subject, object] = r.pairs.at(pair);
  const std::string& tmpl = r.templates.at(template_id);

  Fact f;
  f.relation = relation;
  f.pair = pair;
  f.template_id = template_id;
  f.subject = subject;
  f.object = object;
  f.prompt = render_template(tmpl, subject);
  f.tokens = tok.tokenize(f.prompt);

  // subject span = tokens of the template prefix .. +subject length
  const std::string prefix = tmpl.substr(0, tmpl.find("{}"));
  const int n_prefix = static_cast<int>(tok.tokenize(prefix).size());
  const int n_subject = static_cast<int>(tok.tokenize(subject).size());
  f.subject_first = n_prefix;
  f.subject_last = n_prefix + n_subject - 1;
  f.prompt_last = static_cast<int>(f.tokens.size()) - 1;
  f.object_token = tok.id_of(object);
  if (f.subject_last >= f.prompt_last) {
    throw ContractError("template leaves no tokens after the subject: " + tmpl);
  }
  return f;
}

inline std::vector<Fact> all_facts(const World& world, const Tokenizer& tok,
                                   int template_id = 0) {
  std::vector<Fact> out;
  for (size_t r = 0; r < world.relations.size(); ++r) {
    for (size_t p = 0; p < world.relations[r].pairs.size(); ++p) {
      out.push_back(render_fact(world, tok, static_cast<int>(r), static_cast<int>(p),
                                template_id));
    }
  }
  return out;
}

// --- generation ------------------------------------------------------------

// Deterministic toy world. Subjects are "fn# ln#" two-word names; last names
// are globally unique so all subjects are distinct. Relation templates share
// a relation word and vary filler/terminator words, so a template unseen for
// one relation is still made of words trained on other relations.
inline World generate_world(int n_relations, int subjects_per_relation, int range_size,
                            uint64_t seed, int max_vocab = 256) {
  if (n_relations < 1 || subjects_per_relation < 2 || range_size < 2) {
    throw ContractError("world needs >= 1 relation, >= 2 subjects, >= 2 objects");
  }
  const int total_subjects = n_relations * subjects_per_relation;
  const int first_names = (total_subjects + 9) / 10;
  const int n_words = first_names + total_subjects /*last names*/ +
                      n_relations * range_size /*objects*/ + n_relations /*relation words*/ +
                      4 /*aux + 3 terminators*/;
  if (n_words > max_vocab) {
    throw ContractError("vocab exhaustion: world needs " + std::to_string(n_words) +
                        " words, cap is " + std::to_string(max_vocab));
  }

  std::mt19937_64 gen(substream_seed(seed, "world"));
  World w;
  int subj_counter = 0;
  for (int r = 0; r < n_relations; ++r) {
    RelationSet rel;
    rel.relation_id = "rel" + std::to_string(r);
    const std::string rw = "rel" + std::to_string(r);
    rel.templates = {"{} " + rw + " fq0", "{} aux " + rw + " fq1", "{} " + rw + " fq2"};

    std::uniform_int_distribution<int> pick_obj(0, range_size - 1);
    for (int s = 0; s < subjects_per_relation; ++s, ++subj_counter) {
      const std::string subject =
          "fn" + std::to_string(subj_counter / 10) + " ln" + std::to_string(subj_counter);
      const std::string object = "ob" + std::to_string(r) + "x" + std::to_string(pick_obj(gen));
      rel.pairs.emplace_back(subject, object);
    }
    // Guarantee at least two distinct objects per relation.
    if (rel.range_size() < 2) {
      auto& [s0, o0] = rel.pairs[0];
      const std::string alt = "ob" + std::to_string(r) + "x" +
                              std::to_string((std::stoi(o0.substr(o0.find('x') + 1)) + 1) %
                                             range_size);
      o0 = alt;
    }
    w.relations.push_back(std::move(rel));
  }
  w.validate();
  return w;
}

// --- JSONL persistence --------------------------------------------------------

inline void save_world(const World& world, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ContractError("cannot open " + path);
  for (const auto& r : world.relations) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& [s, o] : r.pairs) pairs.push_back({s, o});
    nlohmann::json line{{"relation_id", r.relation_id},
                        {"templates", r.templates},
                        {"pairs", pairs}};
    os << line.dump() << "\n";
  }
}

inline World load_world(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ContractError("cannot open " + path);
  World w;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    RelationSet r;
    r.relation_id = j.at("relation_id").get<std::string>();
    r.templates = j.at("templates").get<std::vector<std::string>>();
    for (const auto& p : j.at("pairs")) {
      r.pairs.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
    }
    w.relations.push_back(std::move(r));
  }
  w.validate();
  return w;
}

// --- corruption -----------------------------------------------------------------

// Same-relation subject swap: s* != s with a different object, same token
// length. With a model given, both prompts must be answered correctly
// (top-1 = their own object); otherwise only the structural conditions
// apply. Returns nothing when no eligible partner exists.
template <typename T = float>
std::optional<Fact> pick_corrupt_pair(const World& world, const Tokenizer& tok,
                                      const Fact& fact, uint64_t seed,
                                      const MambaLMT<T>* model = nullptr) {
  const RelationSet& rel = world.relations.at(fact.relation);
  std::vector<int> candidates;
  for (size_t p = 0; p < rel.pairs.size(); ++p) {
    if (static_cast<int>(p) == fact.pair) continue;
    if (rel.pairs[p].second == fact.object) continue;
    candidates.push_back(static_cast<int>(p));
  }
  if (candidates.empty()) return std::nullopt;

  if (model) {
    auto clean = forward(*model, fact.tokens);
    if (argmax_token(clean.logits) != fact.object_token) return std::nullopt;
  }

  std::mt19937_64 gen(substream_seed(seed, "corrupt"));
  std::shuffle(candidates.begin(), candidates.end(), gen);
  for (int p : candidates) {
    Fact alt = render_fact(world, tok, fact.relation, p, fact.template_id);
    if (alt.tokens.size() != fact.tokens.size()) continue;  // two-word subjects: always equal
    if (model) {
      auto run = forward(*model, alt.tokens);
      if (argmax_token(run.logits) != alt.object_token) continue;
    }
    return alt;
  }
  return std::nullopt;
}

}  // namespace ssmlens
