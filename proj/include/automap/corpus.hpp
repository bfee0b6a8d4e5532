/*
 * Copyright 2026 The AutoMap Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "automap/common.hpp"

namespace automap {

/// Ordered set of code ids; a code's index is its row in every embedding matrix.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> ids) : ids_(std::move(ids)) {
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      auto [it, inserted] = index_.emplace(ids_[i], i);
      require(inserted, "duplicate code id '", ids_[i], "' in vocabulary");
    }
  }

  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  const std::string& id(std::size_t index) const { return ids_.at(index); }
  const std::vector<std::string>& ids() const { return ids_; }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t index(const std::string& id) const {
    auto idx = find(id);
    require(idx.has_value(), "unknown code id '", id, "'");
    return *idx;
  }

  bool operator==(const Vocabulary& o) const { return ids_ == o.ids_; }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Visit {
  std::vector<std::size_t> codes;  // vocabulary indices, duplicates allowed
  double los_days = 0.0;
  bool operator==(const Visit&) const = default;
};

/// Length-of-stay bins: [0,1) -> 0, [1,7) -> 1, [7,14) -> 2, [14,inf) -> 3.
inline int derive_los_class(double los_days) {
  require(std::isfinite(los_days) && los_days >= 0.0, "length of stay must be non-negative, got ",
          los_days);
  if (los_days < 1.0) return 0;
  if (los_days < 7.0) return 1;
  if (los_days < 14.0) return 2;
  return 3;
}

inline constexpr int kLosClasses = 4;

struct Patient {
  std::string id;
  std::vector<Visit> visits;
  int mortality = 0;

  std::vector<int> los_classes() const {
    std::vector<int> out;
    out.reserve(visits.size());
    for (const auto& v : visits) out.push_back(derive_los_class(v.los_days));
    return out;
  }
  bool operator==(const Patient&) const = default;
};

enum class Role { Source, Target };

inline const char* to_string(Role r) { return r == Role::Source ? "source" : "target"; }

struct Corpus {
  Role role = Role::Target;
  std::vector<Patient> patients;
  Vocabulary vocabulary;

  std::size_t visit_count() const {
    std::size_t n = 0;
    for (const auto& p : patients) n += p.visits.size();
    return n;
  }

  /// Occurrence count of every code across all visits.
  std::vector<double> code_frequencies() const {
    std::vector<double> f(vocabulary.size(), 0.0);
    for (const auto& p : patients)
      for (const auto& v : p.visits)
        for (auto c : v.codes) f[c] += 1.0;
    return f;
  }

  void validate() const {
    for (const auto& p : patients) {
      require(!p.visits.empty(), "patient '", p.id, "' has no visits");
      require(p.mortality == 0 || p.mortality == 1, "patient '", p.id,
              "' has a non-binary mortality label");
      for (const auto& v : p.visits) {
        require(!v.codes.empty(), "patient '", p.id, "' has a visit without codes");
        derive_los_class(v.los_days);
        for (auto c : v.codes)
          require(c < vocabulary.size(), "patient '", p.id, "' references code index ", c,
                  " outside the vocabulary");
      }
    }
  }

  bool operator==(const Corpus& o) const {
    return role == o.role && patients == o.patients && vocabulary == o.vocabulary;
  }
};

/// Rooted hierarchy over leaf codes and intermediate categories. The reserved id
/// "ROOT" names the root. A node's first-declared parent defines its level.
class Ontology {
 public:
  static constexpr const char* kRoot = "ROOT";

  Ontology() { add_node(kRoot); }

  /// Adds edge parent -> child. The parent must already be declared (the root,
  /// or the child of an earlier edge).
  void add_edge(const std::string& parent, const std::string& child) {
    auto p = find(parent);
    require(p.has_value(), "ontology edge references undeclared parent '", parent, "'");
    require(child != kRoot, "ROOT cannot be a child");
    require(parent != child, "self-loop on '", child, "'");
    auto c = find(child);
    std::size_t ci;
    if (!c) {
      ci = add_node(child);
      parent_[ci] = *p;
      level_[ci] = level_[*p] + 1;
    } else {
      ci = *c;
      require(!is_ancestor_of(ci, *p), "ontology edge ", parent, " -> ", child, " creates a cycle");
      for (auto existing : children_[*p])
        require(existing != ci, "duplicate ontology edge ", parent, " -> ", child);
    }
    children_[*p].push_back(ci);
    edges_.emplace_back(*p, ci);
  }

  std::size_t node_count() const { return names_.size(); }
  const std::string& name(std::size_t node) const { return names_.at(node); }
  std::size_t root() const { return 0; }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t node(const std::string& id) const {
    auto n = find(id);
    require(n.has_value(), "unknown ontology node '", id, "'");
    return *n;
  }

  int level(std::size_t node) const { return level_.at(node); }
  bool is_leaf(std::size_t node) const { return children_.at(node).empty() && node != root(); }
  const std::vector<std::size_t>& children(std::size_t node) const { return children_.at(node); }
  const std::vector<std::pair<std::size_t, std::size_t>>& edges() const { return edges_; }

  std::vector<std::size_t> leaves() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (is_leaf(i)) out.push_back(i);
    return out;
  }

  /// Deepest level of any node.
  int depth() const { return *std::max_element(level_.begin(), level_.end()); }

  /// The level-`level` node on the root-to-leaf path of `leaf`.
  std::size_t ancestor(std::size_t leaf, int level) const {
    require(leaf < names_.size(), "node index out of range");
    require(is_leaf(leaf), "'", names_[leaf], "' is not a leaf code");
    require(level >= 0 && level <= level_[leaf], "invalid level ", level, " for '", names_[leaf],
            "' at depth ", level_[leaf]);
    std::size_t n = leaf;
    while (level_[n] > level) n = parent_[n];
    return n;
  }

  std::string ancestor(const std::string& leaf, int level) const {
    return names_[ancestor(node(leaf), level)];
  }

  bool operator==(const Ontology& o) const {
    if (names_ != o.names_ || edges_.size() != o.edges_.size()) return false;
    return edges_ == o.edges_;
  }

 private:
  std::size_t add_node(const std::string& id) {
    const std::size_t i = names_.size();
    names_.push_back(id);
    index_.emplace(id, i);
    children_.emplace_back();
    parent_.push_back(i);
    level_.push_back(0);
    return i;
  }

  bool is_ancestor_of(std::size_t a, std::size_t n) const {
    // any-parent reachability from n upwards
    std::vector<std::size_t> stack{n};
    std::vector<bool> seen(names_.size(), false);
    while (!stack.empty()) {
      auto x = stack.back();
      stack.pop_back();
      if (x == a) return true;
      if (seen[x]) continue;
      seen[x] = true;
      for (const auto& [p, c] : edges_)
        if (c == x) stack.push_back(p);
    }
    return false;
  }

  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::vector<std::size_t>> children_;
  std::vector<std::size_t> parent_;
  std::vector<int> level_;
  std::vector<std::pair<std::size_t, std::size_t>> edges_;
};

/// Vocabulary formed by an ontology's leaves in sorted id order.
inline Vocabulary leaf_vocabulary(const Ontology& o) {
  std::vector<std::string> ids;
  for (auto l : o.leaves()) ids.push_back(o.name(l));
  std::sort(ids.begin(), ids.end());
  return Vocabulary(std::move(ids));
}

struct GroundTruthMap {
  std::vector<std::pair<std::string, std::string>> pairs;  // (target id, source id)

  /// target id -> every source partner.
  std::map<std::string, std::vector<std::string>> by_target() const {
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& [t, s] : pairs) out[t].push_back(s);
    return out;
  }
  bool operator==(const GroundTruthMap&) const = default;
};

struct CorpusSplit {
  Corpus train, valid, test;
};

/// Patient-level partition. Sizes are round(ratio * n) for train and valid; the
/// remainder goes to test.
inline CorpusSplit split_corpus(const Corpus& corpus, std::array<double, 3> ratios,
                                std::uint64_t seed) {
  require(corpus.patients.size() >= 3, "cannot split a corpus of ", corpus.patients.size(),
          " patients into three sets");
  for (double r : ratios) require(r > 0.0, "split ratios must be positive");
  require(std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) <= 1e-9, "split ratios must sum to 1");

  const std::size_t n = corpus.patients.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(stream_seed(seed, "split"));
  std::shuffle(order.begin(), order.end(), rng);

  auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(n)));
  auto n_valid = static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n)));
  n_train = std::min(n_train, n);
  n_valid = std::min(n_valid, n - n_train);

  auto take = [&](std::size_t from, std::size_t to) {
    std::vector<std::size_t> idx(order.begin() + from, order.begin() + to);
    std::sort(idx.begin(), idx.end());
    Corpus c{corpus.role, {}, corpus.vocabulary};
    for (auto i : idx) c.patients.push_back(corpus.patients[i]);
    return c;
  };
  return {take(0, n_train), take(n_train, n_train + n_valid), take(n_train + n_valid, n)};
}

/// First `n` patients of a corpus, used to emulate a limited label budget.
inline Corpus head(const Corpus& c, std::size_t n) {
  Corpus out{c.role, {}, c.vocabulary};
  for (std::size_t i = 0; i < std::min(n, c.patients.size()); ++i) out.patients.push_back(c.patients[i]);
  return out;
}

// ---------------------------------------------------------------------------
// File formats

inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot open ", path, " for writing");
  for (const auto& p : corpus.patients) {
    nlohmann::ordered_json j;
    j["id"] = p.id;
    j["mortality"] = p.mortality;
    auto visits = nlohmann::ordered_json::array();
    for (const auto& v : p.visits) {
      nlohmann::ordered_json jv;
      auto codes = nlohmann::ordered_json::array();
      for (auto c : v.codes) codes.push_back(corpus.vocabulary.id(c));
      jv["codes"] = std::move(codes);
      jv["los_days"] = v.los_days;
      visits.push_back(std::move(jv));
    }
    j["visits"] = std::move(visits);
    os << j.dump() << '\n';
  }
}

/// Loads a JSON-lines corpus. When `vocabulary` is empty it is derived from the
/// file as the sorted set of referenced ids.
inline Corpus load_corpus(const std::string& path, Role role, Vocabulary vocabulary = {}) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot open ", path);
  std::vector<nlohmann::json> lines;
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::size_t> linenos;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      lines.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      fail(path, ":", lineno, ": malformed JSON: ", e.what());
    }
    linenos.push_back(lineno);
  }

  const bool derive = vocabulary.empty();
  if (derive) {
    std::vector<std::string> ids;
    for (const auto& j : lines)
      if (j.contains("visits") && j["visits"].is_array())
        for (const auto& v : j["visits"])
          if (v.contains("codes") && v["codes"].is_array())
            for (const auto& c : v["codes"])
              if (c.is_string()) ids.push_back(c.get<std::string>());
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    vocabulary = Vocabulary(std::move(ids));
  }

  Corpus corpus{role, {}, std::move(vocabulary)};
  for (std::size_t k = 0; k < lines.size(); ++k) {
    const auto& j = lines[k];
    const auto ln = linenos[k];
    auto bad = [&](const std::string& what) { fail(path, ":", ln, ": ", what); };
    if (!j.is_object()) bad("expected a JSON object");
    if (!j.contains("id") || !j["id"].is_string()) bad("missing string field 'id'");
    if (!j.contains("mortality") || !j["mortality"].is_number_integer()) bad("missing integer field 'mortality'");
    if (!j.contains("visits") || !j["visits"].is_array()) bad("missing array field 'visits'");
    Patient p;
    p.id = j["id"].get<std::string>();
    p.mortality = j["mortality"].get<int>();
    if (p.mortality != 0 && p.mortality != 1) bad("mortality must be 0 or 1");
    if (j["visits"].empty()) bad("patient has no visits");
    for (const auto& jv : j["visits"]) {
      if (!jv.is_object() || !jv.contains("codes") || !jv["codes"].is_array())
        bad("visit without a 'codes' array");
      if (jv["codes"].empty()) bad("visit has an empty code list");
      if (!jv.contains("los_days") || !jv["los_days"].is_number()) bad("visit without numeric 'los_days'");
      Visit v;
      v.los_days = jv["los_days"].get<double>();
      if (!(v.los_days >= 0.0)) bad("los_days must be non-negative");
      for (const auto& c : jv["codes"]) {
        if (!c.is_string()) bad("code ids must be strings");
        auto idx = corpus.vocabulary.find(c.get<std::string>());
        if (!idx) bad("unknown code id '" + c.get<std::string>() + "'");
        v.codes.push_back(*idx);
      }
      p.visits.push_back(std::move(v));
    }
    corpus.patients.push_back(std::move(p));
  }
  return corpus;
}

inline void save_ontology(const Ontology& o, const std::string& path) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot open ", path, " for writing");
  for (const auto& [p, c] : o.edges()) os << o.name(p) << '\t' << o.name(c) << '\n';
}

inline Ontology load_ontology(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot open ", path);
  Ontology o;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      fail(path, ":", lineno, ": expected 'parent<TAB>child'");
    try {
      o.add_edge(line.substr(0, tab), line.substr(tab + 1));
    } catch (const Error& e) {
      fail(path, ":", lineno, ": ", e.what());
    }
  }
  return o;
}

inline void save_truth(const GroundTruthMap& truth, const std::string& path) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot open ", path, " for writing");
  for (const auto& [t, s] : truth.pairs) os << t << '\t' << s << '\n';
}

/// Loads a truth TSV; ids are checked against the vocabularies when given.
inline GroundTruthMap load_truth(const std::string& path, const Vocabulary* target = nullptr,
                                 const Vocabulary* source = nullptr) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot open ", path);
  GroundTruthMap truth;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      fail(path, ":", lineno, ": expected 'target_code<TAB>source_code'");
    std::string t = line.substr(0, tab), s = line.substr(tab + 1);
    if (target && !target->find(t)) fail(path, ":", lineno, ": unknown target code id '", t, "'");
    if (source && !source->find(s)) fail(path, ":", lineno, ": unknown source code id '", s, "'");
    truth.pairs.emplace_back(std::move(t), std::move(s));
  }
  return truth;
}

}  // namespace automap
