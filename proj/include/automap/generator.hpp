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

// Synthetic two-coding-system benchmark.
//
// A latent concept tree of `branching`^`depth` leaf concepts drives both
// corpora. Source codes are the leaf concepts themselves; every concept is
// split into 1..split_max target codes with Dirichlet usage weights. Patients
// of both corpora draw visits from sparse mixtures over a shared set of topics,
// each topic concentrated on a subtree of the concept tree, so the two
// co-occurrence structures agree up to sampling noise.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "automap/common.hpp"
#include "automap/corpus.hpp"

namespace automap {

struct GeneratorConfig {
  int concept_tree_depth = 3;
  int branching = 4;
  int split_max = 3;
  int n_patients = 2000;  // per corpus
  double visits_mean = 2.5;
  double codes_per_visit_mean = 10.0;
  double topic_concentration = 0.05;
  double risk_concept_fraction = 0.2;
  double noise = 0.05;           // probability a code is drawn uniformly at random
  double mortality_rate = 0.3;   // approximate prevalence
  double split_concentration = 2.0;
  double prevalence_skew = 1.0;         // Zipf exponent of topic prevalence (0: uniform)
  double comorbidity_mass = 0.4;        // share of a topic spent on other categories
  double comorbidity_concentration = 0.05;
  std::uint64_t seed = 7;

  void validate() const {
    require(concept_tree_depth >= 2, "concept_tree_depth must be >= 2");
    require(branching >= 2, "branching must be >= 2");
    require(split_max >= 1, "split_max must be >= 1");
    require(n_patients >= 1, "n_patients must be positive");
    require(visits_mean >= 1.0, "visits_mean must be >= 1");
    require(codes_per_visit_mean >= 1.0, "codes_per_visit_mean must be >= 1");
    require(topic_concentration > 0.0, "topic_concentration must be positive");
    require(risk_concept_fraction > 0.0 && risk_concept_fraction < 1.0,
            "risk_concept_fraction must lie in (0,1)");
    require(noise >= 0.0 && noise < 1.0, "noise must lie in [0,1)");
    require(mortality_rate > 0.0 && mortality_rate < 1.0, "mortality_rate must lie in (0,1)");
    require(split_concentration > 0.0, "split_concentration must be positive");
    require(prevalence_skew >= 0.0, "prevalence_skew must be non-negative");
    require(comorbidity_mass >= 0.0 && comorbidity_mass <= 0.4,
            "comorbidity_mass must be non-negative and leave room for the home category");
    require(comorbidity_concentration > 0.0, "comorbidity_concentration must be positive");
    const double leaves = std::pow(static_cast<double>(branching), concept_tree_depth);
    require(leaves >= 1.0 && leaves <= 1e6, "vocabulary size ", leaves, " is out of range");
  }
};

struct SyntheticBenchmark {
  Corpus source;
  Corpus target;
  Ontology source_ontology;
  Ontology target_ontology;
  GroundTruthMap truth;
};

namespace detail {

inline std::string padded(const std::string& prefix, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%0*zu", width, i);
  return prefix + buf;
}

inline int digits(std::size_t n) {
  int d = 1;
  while (n >= 10) {
    n /= 10;
    ++d;
  }
  return d;
}

inline std::vector<double> dirichlet(Rng& rng, const std::vector<double>& alpha) {
  const std::size_t n = alpha.size();
  std::vector<double> w(n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::gamma_distribution<double> gamma(alpha[i], 1.0);
    s += (w[i] = gamma(rng));
  }
  if (s <= 0.0) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(n));
    return w;
  }
  for (auto& x : w) x /= s;
  return w;
}

inline std::vector<double> dirichlet(Rng& rng, std::size_t n, double alpha) {
  return dirichlet(rng, std::vector<double>(n, alpha));
}

inline int draw_count(Rng& rng, double mean) {
  // 1 + Poisson(mean - 1): always at least one
  if (mean <= 1.0) return 1;
  std::poisson_distribution<int> pois(mean - 1.0);
  return 1 + pois(rng);
}

struct LatentVisit {
  std::vector<std::size_t> concepts;
  double los_days = 0.0;
};

struct LatentPatient {
  std::vector<LatentVisit> visits;
  double risk_score = 0.0;
};

}  // namespace detail

/// Builds the two corpora, their ontologies and the target -> source truth map.
/// Deterministic for a fixed config.
inline SyntheticBenchmark generate_synthetic(const GeneratorConfig& cfg) {
  cfg.validate();
  const int depth = cfg.concept_tree_depth;
  const std::size_t b = static_cast<std::size_t>(cfg.branching);

  // Nodes of the concept tree at each level, identified by their index within
  // the level; node i at level l has parent i / b.
  std::vector<std::size_t> level_size(depth + 1, 1);
  for (int l = 1; l <= depth; ++l) level_size[l] = level_size[l - 1] * b;
  const std::size_t n_concepts = level_size[depth];
  auto ancestor_index = [&](std::size_t leaf, int level) {
    std::size_t i = leaf;
    for (int l = depth; l > level; --l) i /= b;
    return i;
  };

  Rng tree_rng = make_rng(cfg.seed, "generator.tree");

  // Target code splits.
  std::vector<std::vector<double>> split_weights(n_concepts);
  std::size_t n_target = 0;
  {
    std::uniform_int_distribution<int> split_count(1, cfg.split_max);
    for (auto& w : split_weights) {
      w = detail::dirichlet(tree_rng, static_cast<std::size_t>(split_count(tree_rng)),
                            cfg.split_concentration);
      n_target += w.size();
    }
  }

  // Shuffled ids so that neither side's vocabulary order reveals the truth.
  auto permutation = [&](std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    std::shuffle(p.begin(), p.end(), tree_rng);
    return p;
  };
  std::vector<std::string> source_ids(n_concepts);
  {
    auto perm = permutation(n_concepts);
    const int w = detail::digits(n_concepts);
    for (std::size_t c = 0; c < n_concepts; ++c) source_ids[c] = detail::padded("S", perm[c], w);
  }
  std::vector<std::vector<std::string>> target_ids(n_concepts);
  {
    auto perm = permutation(n_target);
    const int w = detail::digits(n_target);
    std::size_t k = 0;
    for (std::size_t c = 0; c < n_concepts; ++c)
      for (std::size_t s = 0; s < split_weights[c].size(); ++s)
        target_ids[c].push_back(detail::padded("T", perm[k++], w));
  }
  std::vector<std::vector<std::string>> source_cat(depth), target_cat(depth);
  for (int l = 1; l < depth; ++l) {
    auto ps = permutation(level_size[l]);
    auto pt = permutation(level_size[l]);
    const int w = detail::digits(level_size[l]);
    for (std::size_t i = 0; i < level_size[l]; ++i) {
      source_cat[l].push_back(detail::padded("SC" + std::to_string(l) + "_", ps[i], w));
      target_cat[l].push_back(detail::padded("TC" + std::to_string(l) + "_", pt[i], w));
    }
  }

  SyntheticBenchmark out;
  for (int l = 1; l < depth; ++l) {
    for (std::size_t i = 0; i < level_size[l]; ++i) {
      const std::string sp = l == 1 ? Ontology::kRoot : source_cat[l - 1][i / b];
      const std::string tp = l == 1 ? Ontology::kRoot : target_cat[l - 1][i / b];
      out.source_ontology.add_edge(sp, source_cat[l][i]);
      out.target_ontology.add_edge(tp, target_cat[l][i]);
    }
  }
  for (std::size_t c = 0; c < n_concepts; ++c) {
    const std::size_t parent = ancestor_index(c, depth - 1);
    out.source_ontology.add_edge(source_cat[depth - 1][parent], source_ids[c]);
    for (const auto& t : target_ids[c]) {
      out.target_ontology.add_edge(target_cat[depth - 1][parent], t);
      out.truth.pairs.emplace_back(t, source_ids[c]);
    }
  }
  std::sort(out.truth.pairs.begin(), out.truth.pairs.end());

  // Topics: one per category at level depth-1 plus one per level-1 category.
  // A fine topic puts most of its mass on its home category and spreads a
  // comorbidity share over a sparse random set of other categories (biased
  // towards its own level-1 subtree), so categories differ in how they relate
  // to the rest of the vocabulary.
  Rng topic_rng = make_rng(cfg.seed, "generator.topics");
  std::vector<std::discrete_distribution<std::size_t>> topics;
  const int fine = depth - 1;
  auto members_of = [&](int level, std::size_t cat) {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < n_concepts; ++c)
      if (ancestor_index(c, level) == cat) out.push_back(c);
    return out;
  };
  auto make_topic = [&](int home_level, std::size_t home) {
    std::vector<double> w(n_concepts, 0.0);
    const auto inside = members_of(home_level, home);
    const bool coarse = home_level == 1 && fine > 1;
    // per-topic share in [0, 2 * comorbidity_mass]: some categories are hubs, some isolated
    std::uniform_real_distribution<double> spread(0.0, 2.0);
    const double comorbid_mass = coarse ? 0.0 : std::min(0.85, cfg.comorbidity_mass * spread(topic_rng));
    const double inside_mass = 0.95 - comorbid_mass;
    auto wi = detail::dirichlet(topic_rng, inside.size(), 1.0);
    for (std::size_t k = 0; k < inside.size(); ++k) w[inside[k]] += inside_mass * wi[k];
    if (comorbid_mass > 0.0) {
      std::size_t home_top = home;
      for (int l = home_level; l > 1; --l) home_top /= b;
      std::vector<double> alpha(level_size[fine]);
      for (std::size_t c = 0; c < alpha.size(); ++c) {
        std::size_t top = c;
        for (int l = fine; l > 1; --l) top /= b;
        alpha[c] = c == home ? 1e-3 : cfg.comorbidity_concentration * (top == home_top ? 3.0 : 1.0);
      }
      auto wc = detail::dirichlet(topic_rng, alpha);
      wc[home] = 0.0;
      const double total = std::accumulate(wc.begin(), wc.end(), 0.0);
      for (std::size_t c = 0; c < wc.size(); ++c) {
        if (wc[c] <= 0.0) continue;
        const auto m = members_of(fine, c);
        for (auto x : m) w[x] += comorbid_mass * wc[c] / total / static_cast<double>(m.size());
      }
    }
    for (auto& x : w) x += 0.05 / static_cast<double>(n_concepts);
    topics.emplace_back(w.begin(), w.end());
  };
  for (std::size_t i = 0; i < level_size[fine]; ++i) make_topic(fine, i);
  if (fine > 1)
    for (std::size_t i = 0; i < level_size[1]; ++i) make_topic(1, i);

  // Topic prevalence: Zipf weights over a random ordering of the topics.
  std::vector<double> prevalence(topics.size());
  {
    std::vector<std::size_t> order(topics.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), topic_rng);
    double total = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r)
      total += prevalence[order[r]] = std::pow(static_cast<double>(r + 1), -cfg.prevalence_skew);
    for (auto& p : prevalence)
      p *= cfg.topic_concentration * static_cast<double>(topics.size()) / total;
  }

  // Concept effects on outcomes.
  Rng effect_rng = make_rng(cfg.seed, "generator.effects");
  // Risk concepts come in whole fine categories, the way lethal conditions
  // cluster in disease families; the last category drawn may be partial.
  std::vector<double> risk(n_concepts, 0.0);
  {
    std::vector<std::size_t> cats(level_size[fine]);
    std::iota(cats.begin(), cats.end(), 0);
    std::shuffle(cats.begin(), cats.end(), effect_rng);
    auto n_risk = static_cast<std::size_t>(
        std::max(1.0, std::round(cfg.risk_concept_fraction * static_cast<double>(n_concepts))));
    std::uniform_real_distribution<double> weight(0.5, 1.5);
    for (std::size_t k = 0; k < cats.size() && n_risk > 0; ++k)
      for (auto c : members_of(fine, cats[k]))
        if (n_risk > 0) {
          risk[c] = weight(effect_rng);
          --n_risk;
        }
  }
  std::vector<double> los_effect(n_concepts);
  {
    std::normal_distribution<double> n01(0.0, 1.0);
    for (auto& u : los_effect) u = 0.8 * n01(effect_rng);
  }

  auto simulate = [&](Rng& rng) {
    std::vector<detail::LatentPatient> patients(static_cast<std::size_t>(cfg.n_patients));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> any_concept(0, n_concepts - 1);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (auto& p : patients) {
      auto theta = detail::dirichlet(rng, prevalence);
      std::discrete_distribution<std::size_t> pick_topic(theta.begin(), theta.end());
      const int n_visits = detail::draw_count(rng, cfg.visits_mean);
      for (int v = 0; v < n_visits; ++v) {
        detail::LatentVisit lv;
        const int n_codes = detail::draw_count(rng, cfg.codes_per_visit_mean);
        double effect = 0.0;
        for (int k = 0; k < n_codes; ++k) {
          std::size_t c = unif(rng) < cfg.noise ? any_concept(rng) : topics[pick_topic(rng)](rng);
          lv.concepts.push_back(c);
          effect += los_effect[c];
          p.risk_score += risk[c];
        }
        const double log_los = std::log(3.0) + 1.5 * effect / std::sqrt(static_cast<double>(n_codes)) +
                               0.5 * n01(rng);
        lv.los_days = std::exp(log_los);
        p.visits.push_back(std::move(lv));
      }
    }
    return patients;
  };

  Rng source_rng = make_rng(cfg.seed, "generator.source");
  Rng target_rng = make_rng(cfg.seed, "generator.target");
  auto latent_source = simulate(source_rng);
  auto latent_target = simulate(target_rng);

  // Mortality: logistic in the standardized risk score, centred so that the
  // pooled prevalence is close to mortality_rate.
  std::vector<double> scores;
  for (const auto* side : {&latent_source, &latent_target})
    for (const auto& p : *side) scores.push_back(p.risk_score);
  std::vector<double> sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  const double cut = sorted[static_cast<std::size_t>((1.0 - cfg.mortality_rate) *
                                                     static_cast<double>(sorted.size() - 1))];
  const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
  double var = 0.0;
  for (double s : scores) var += (s - mean) * (s - mean);
  const double sd = std::max(std::sqrt(var / static_cast<double>(scores.size())), 1e-9);
  Rng label_rng = make_rng(cfg.seed, "generator.labels");
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  auto realize = [&](const std::vector<detail::LatentPatient>& latent, Role role,
                     const std::string& prefix, Rng& code_rng) {
    Corpus c;
    c.role = role;
    std::vector<std::string> ids;
    if (role == Role::Source) {
      ids = source_ids;
    } else {
      for (const auto& t : target_ids) ids.insert(ids.end(), t.begin(), t.end());
    }
    std::sort(ids.begin(), ids.end());
    c.vocabulary = Vocabulary(std::move(ids));
    std::vector<std::size_t> source_index(n_concepts);
    std::vector<std::vector<std::size_t>> target_index(n_concepts);
    std::vector<std::discrete_distribution<std::size_t>> split_pick;
    for (std::size_t k = 0; k < n_concepts; ++k) {
      source_index[k] = c.vocabulary.find(source_ids[k]).value_or(0);
      if (role == Role::Target) {
        for (const auto& t : target_ids[k]) target_index[k].push_back(c.vocabulary.index(t));
        split_pick.emplace_back(split_weights[k].begin(), split_weights[k].end());
      }
    }
    const int w = detail::digits(latent.size());
    for (std::size_t i = 0; i < latent.size(); ++i) {
      Patient p;
      p.id = detail::padded(prefix, i, w);
      const double z = (latent[i].risk_score - cut) / sd;
      const double prob = 1.0 / (1.0 + std::exp(-3.0 * z));
      p.mortality = unif(label_rng) < prob ? 1 : 0;
      for (const auto& lv : latent[i].visits) {
        Visit v;
        v.los_days = lv.los_days;
        for (auto k : lv.concepts)
          v.codes.push_back(role == Role::Source ? source_index[k]
                                                 : target_index[k][split_pick[k](code_rng)]);
        p.visits.push_back(std::move(v));
      }
      c.patients.push_back(std::move(p));
    }
    return c;
  };
  Rng code_rng = make_rng(cfg.seed, "generator.codes");
  out.source = realize(latent_source, Role::Source, "SP", code_rng);
  out.target = realize(latent_target, Role::Target, "TP", code_rng);
  return out;
}

}  // namespace automap
