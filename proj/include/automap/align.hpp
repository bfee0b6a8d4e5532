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

// Ontology-level alignment: coarse-to-fine self-supervised orthogonal mapping
// of target code embeddings onto source code embeddings.
//
// All step-1 geometry works on length-normalized embeddings (normalized, mean
// centered, normalized again), so every inner product below is a cosine
// similarity and the Procrustes objective, the dictionary re-induction and the
// reported objective all agree.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "automap/common.hpp"
#include "automap/corpus.hpp"
#include "automap/embedding.hpp"
#include "automap/numerics.hpp"

namespace automap {

struct Group {
  std::string category;              // ontology node id, cluster label, or code id
  std::vector<std::size_t> members;  // vocabulary indices
  std::vector<double> mean;          // arithmetic mean of member embeddings
  std::size_t median = 0;            // vocabulary index of the representative code
};

struct GroupSet {
  int level = 0;
  std::vector<Group> groups;
  Matrix embeddings;  // k x d, row i = embedding of groups[i].median

  std::size_t k() const { return groups.size(); }
};

namespace detail {

// Unit-length copy; zero rows stay zero.
inline Matrix unit_rows(const Matrix& a) {
  Matrix out = a;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const double n = norm(out.row(i));
    if (n > 0.0)
      for (double& v : out.row(i)) v /= n;
  }
  return out;
}

inline Matrix center_columns(const Matrix& a) {
  Matrix out = a;
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) mu += a(i, j);
    mu /= static_cast<double>(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) out(i, j) -= mu;
  }
  return out;
}

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < v.size(); ++j)
    if (v[j] > v[best]) best = j;
  return best;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

// Fills mean, median and the embedding matrix for groups whose members are set.
inline void finish_groups(GroupSet& gs, const Matrix& e) {
  const std::size_t d = e.cols();
  gs.embeddings = Matrix(gs.groups.size(), d);
  for (std::size_t g = 0; g < gs.groups.size(); ++g) {
    Group& grp = gs.groups[g];
    grp.mean.assign(d, 0.0);
    for (auto m : grp.members)
      for (std::size_t k = 0; k < d; ++k) grp.mean[k] += e(m, k);
    for (double& v : grp.mean) v /= static_cast<double>(grp.members.size());
    // representative: the member closest in cosine to the mean (lowest index on ties)
    grp.median = grp.members.front();
    double best = -std::numeric_limits<double>::infinity();
    for (auto m : grp.members) {
      const double c = cosine(e.row(m), grp.mean);
      if (c > best) {
        best = c;
        grp.median = m;
      }
    }
    std::copy(e.row(grp.median).begin(), e.row(grp.median).end(), gs.embeddings.row(g).begin());
  }
}

inline void retain_top_k(GroupSet& gs, std::size_t k) {
  std::stable_sort(gs.groups.begin(), gs.groups.end(), [](const Group& a, const Group& b) {
    if (a.members.size() != b.members.size()) return a.members.size() > b.members.size();
    return a.category < b.category;
  });
  if (gs.groups.size() > k) gs.groups.resize(k);
}

}  // namespace detail

/// Groups the leaves present in `e` by their level-`level` ontology ancestor and
/// keeps the k largest groups (ties by category id). A leaf at exactly `level`
/// forms its own group.
inline GroupSet group_by_ontology(const EmbeddingMatrix& e, const Ontology& o, int level,
                                  std::size_t k) {
  require(k >= 1, "group count k must be positive");
  require(level >= 0 && level <= o.depth(), "grouping level ", level, " exceeds ontology depth ",
          o.depth());
  std::map<std::size_t, std::vector<std::size_t>> by_category;
  for (auto leaf : o.leaves()) {
    if (o.level(leaf) < level) continue;
    auto idx = e.codes.find(o.name(leaf));
    if (!idx) continue;
    by_category[o.ancestor(leaf, level)].push_back(*idx);
  }
  require(by_category.size() >= 2, "level ", level, " yields ", by_category.size(),
          " non-empty group(s); at least 2 are needed");
  GroupSet gs;
  gs.level = level;
  for (auto& [cat, members] : by_category) {
    std::sort(members.begin(), members.end());
    gs.groups.push_back({o.name(cat), std::move(members), {}, 0});
  }
  detail::retain_top_k(gs, k);
  detail::finish_groups(gs, e.rows);
  return gs;
}

/// k-means++ seeding followed by Lloyd iterations (assignment fixpoint or 100
/// iterations) over the embedding rows; of `restarts` runs the one with the
/// lowest within-cluster sum of squares is kept.
inline GroupSet group_by_kmeans(const EmbeddingMatrix& e, std::size_t k, std::uint64_t seed,
                                int level = 1, int restarts = 10) {
  const std::size_t n = e.size(), d = e.dim();
  require(k >= 1, "k must be positive");
  require(k <= n, "k = ", k, " exceeds the number of codes ", n);
  require(restarts >= 1, "k-means needs at least one run");
  const Matrix& x = e.rows;
  auto sqdist = [&](std::size_t i, std::span<const double> c) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (x(i, j) - c[j]) * (x(i, j) - c[j]);
    return s;
  };

  std::vector<std::size_t> best_assign;
  double best_inertia = std::numeric_limits<double>::infinity();
  for (int run = 0; run < restarts; ++run) {
  Rng rng(stream_seed(seed, "kmeans." + std::to_string(run)));
  Matrix centers(k, d);
  std::vector<std::size_t> chosen;
  {
    std::uniform_int_distribution<std::size_t> first(0, n - 1);
    chosen.push_back(first(rng));
    std::vector<double> dist(n, std::numeric_limits<double>::infinity());
    while (chosen.size() < k) {
      const auto last = chosen.back();
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        dist[i] = std::min(dist[i], sqdist(i, x.row(last)));
        total += dist[i];
      }
      std::size_t pick = 0;
      if (total <= 0.0) {
        // all remaining points coincide with a center: take the first unused
        std::vector<bool> used(n, false);
        for (auto c : chosen) used[c] = true;
        while (used[pick]) ++pick;
      } else {
        std::uniform_real_distribution<double> u(0.0, total);
        double r = u(rng), acc = 0.0;
        pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
          acc += dist[i];
          if (r < acc && dist[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
      chosen.push_back(pick);
    }
    for (std::size_t c = 0; c < k; ++c)
      std::copy(x.row(chosen[c]).begin(), x.row(chosen[c]).end(), centers.row(c).begin());
  }

  std::vector<std::size_t> assign(n, k);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double bd = sqdist(i, centers.row(0));
      for (std::size_t c = 1; c < k; ++c) {
        const double dc = sqdist(i, centers.row(c));
        if (dc < bd) {
          bd = dc;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    Matrix sums(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      for (std::size_t j = 0; j < d; ++j) sums(assign[i], j) += x(i, j);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // empty cluster: move it onto the point farthest from its center
        std::size_t far = 0;
        double fd = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double di = sqdist(i, centers.row(assign[i]));
          if (di > fd) {
            fd = di;
            far = i;
          }
        }
        std::copy(x.row(far).begin(), x.row(far).end(), centers.row(c).begin());
        assign[far] = c;
        continue;
      }
      for (std::size_t j = 0; j < d; ++j)
        centers(c, j) = sums(c, j) / static_cast<double>(counts[c]);
    }
  }
  double inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) inertia += sqdist(i, centers.row(assign[i]));
  if (inertia < best_inertia) {
    best_inertia = inertia;
    best_assign = std::move(assign);
  }
  }

  GroupSet gs;
  gs.level = level;
  for (std::size_t c = 0; c < k; ++c) {
    Group g;
    g.category = "K" + std::to_string(level) + "_" + std::to_string(c);
    for (std::size_t i = 0; i < n; ++i)
      if (best_assign[i] == c) g.members.push_back(i);
    if (!g.members.empty()) gs.groups.push_back(std::move(g));
  }
  detail::finish_groups(gs, x);
  return gs;
}

/// Singleton groups, one per code. When `cap` is nonzero and smaller than the
/// vocabulary, keeps the `cap` most frequent codes (ties by index).
inline GroupSet leaf_groups(const EmbeddingMatrix& e, int level, std::size_t cap = 0,
                            const std::vector<double>* frequencies = nullptr) {
  std::vector<std::size_t> order(e.size());
  std::iota(order.begin(), order.end(), 0);
  if (cap > 0 && cap < e.size()) {
    if (frequencies) {
      require(frequencies->size() == e.size(), "frequency vector length mismatch");
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return (*frequencies)[a] > (*frequencies)[b];
      });
    }
    order.resize(cap);
    std::sort(order.begin(), order.end());
  }
  GroupSet gs;
  gs.level = level;
  for (auto i : order) gs.groups.push_back({e.codes.id(i), {i}, {}, i});
  detail::finish_groups(gs, e.rows);
  return gs;
}

/// Cosine self-similarity of group embeddings and its row-wise descending sort.
struct SimilarityProfile {
  Matrix m;
  Matrix sorted;
};

inline SimilarityProfile similarity_profile(const Matrix& groups) {
  SimilarityProfile p{cosine_similarity_matrix(groups, groups), {}};
  p.sorted = p.m;
  for (std::size_t i = 0; i < p.sorted.rows(); ++i) {
    auto r = p.sorted.row(i);
    std::stable_sort(r.begin(), r.end(), std::greater<>());
  }
  return p;
}

struct Anchor {
  int level = 0;
  std::size_t target_group = 0;  // row in the level's target GroupSet
  std::size_t source_group = 0;
  std::string target_label;
  std::string source_label;
  std::vector<double> target;  // unit-length embedding
  std::vector<double> source;
};

/// Matched (target, source) embedding pairs accumulated across levels.
struct AnchorDictionary {
  std::vector<Anchor> pairs;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }

  void merge(const AnchorDictionary& other) {
    pairs.insert(pairs.end(), other.pairs.begin(), other.pairs.end());
  }

  Matrix target_matrix() const { return stack(&Anchor::target); }
  Matrix source_matrix() const { return stack(&Anchor::source); }

 private:
  Matrix stack(std::vector<double> Anchor::*field) const {
    require(!pairs.empty(), "empty anchor dictionary");
    const std::size_t d = (pairs.front().*field).size();
    Matrix m(pairs.size(), d);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      require((pairs[i].*field).size() == d, "anchor dimension mismatch");
      std::copy((pairs[i].*field).begin(), (pairs[i].*field).end(), m.row(i).begin());
    }
    return m;
  }
};

inline Anchor make_anchor(const GroupSet& t, const GroupSet& s, std::size_t i, std::size_t j,
                          int level) {
  auto unit = [](std::span<const double> v) {
    std::vector<double> out(v.begin(), v.end());
    const double n = norm(out);
    if (n > 0.0)
      for (double& x : out) x /= n;
    return out;
  };
  return {level, i, j, t.groups[i].category, s.groups[j].category, unit(t.embeddings.row(i)),
          unit(s.embeddings.row(j))};
}

/// For every target group, the source group whose sorted similarity profile is
/// nearest. Sorted rows are truncated to the shorter length, then normalized
/// (unit length, column centering, unit length) so the comparison is a cosine;
/// ties go to the lowest source index.
inline std::vector<std::size_t> match_profiles(const GroupSet& t, const GroupSet& s) {
  require(t.k() > 0 && s.k() > 0, "seed induction needs non-empty group sets");
  require(t.embeddings.cols() == s.embeddings.cols(), "seed induction: embedding dimensions differ (",
          t.embeddings.cols(), " vs ", s.embeddings.cols(), ")");
  const std::size_t width = std::min(t.k(), s.k());
  auto prepare = [&](const GroupSet& g) {
    Matrix sorted = similarity_profile(g.embeddings).sorted;
    Matrix m(sorted.rows(), width);
    for (std::size_t i = 0; i < sorted.rows(); ++i)
      std::copy_n(sorted.row(i).begin(), width, m.row(i).begin());
    return detail::unit_rows(detail::center_columns(detail::unit_rows(m)));
  };
  Matrix sim = matmul_nt(prepare(t), prepare(s));
  std::vector<std::size_t> match(t.k());
  for (std::size_t i = 0; i < t.k(); ++i) match[i] = detail::argmax(sim.row(i));
  return match;
}

/// Σ_{i≠j} M_T(i,j)·M_S(π(i),π(j)): agreement of the two similarity matrices
/// under the one-to-one matching π. For a permutation this ranks candidates
/// exactly like ‖M_T − P M_S Pᵀ‖_F.
inline double isometry_score(const Matrix& mt, const Matrix& ms, const std::vector<std::size_t>& pi) {
  double total = 0.0;
  for (std::size_t i = 0; i < pi.size(); ++i)
    for (std::size_t j = 0; j < pi.size(); ++j)
      if (i != j) total += mt(i, j) * ms(pi[i], pi[j]);
  return total;
}

namespace detail {

// Greedy one-to-one matching from a score matrix: highest scores first.
inline std::vector<std::size_t> greedy_assignment(const Matrix& score) {
  const std::size_t n = score.rows();
  std::vector<std::tuple<double, std::size_t, std::size_t>> cells;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < score.cols(); ++j) cells.emplace_back(-score(i, j), i, j);
  std::sort(cells.begin(), cells.end());
  std::vector<std::size_t> pi(n, score.cols());
  std::vector<bool> used(score.cols(), false);
  std::size_t left = n;
  for (const auto& [neg, i, j] : cells) {
    if (left == 0) break;
    if (pi[i] != score.cols() || used[j]) continue;
    pi[i] = j;
    used[j] = true;
    --left;
  }
  return pi;
}

// Pairwise-swap hill climbing on isometry_score; returns the local optimum.
inline double swap_descent(const Matrix& mt, const Matrix& ms, std::vector<std::size_t>& pi) {
  const std::size_t n = pi.size();
  bool improved = true;
  while (improved) {
    improved = false;
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = a + 1; b < n; ++b) {
        const std::size_t p = pi[a], q = pi[b];
        double delta = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          if (j == a || j == b) continue;
          delta += (mt(a, j) - mt(b, j)) * (ms(q, pi[j]) - ms(p, pi[j]));
        }
        if (2.0 * delta > 1e-12) {
          std::swap(pi[a], pi[b]);
          improved = true;
        }
      }
    }
  }
  return isometry_score(mt, ms, pi);
}

}  // namespace detail

struct ScoredMatching {
  double score = 0.0;             // isometry_score
  std::vector<std::size_t> match;  // target group -> source group
};

/// One-to-one refinement of the sorted-profile matching for equally sized group
/// sets. The profile seed (made one-to-one greedily) and `restarts` random
/// permutations are each improved by pairwise swaps; the `keep` best distinct
/// local optima are returned by descending isometry score (earliest on ties).
inline std::vector<ScoredMatching> polish_matching(const GroupSet& t, const GroupSet& s,
                                                   std::size_t restarts, std::uint64_t seed,
                                                   std::size_t keep = 1) {
  require(t.k() == s.k(), "matching polish needs equally sized group sets");
  require(keep >= 1, "keep at least one matching");
  const Matrix mt = cosine_similarity_matrix(t.embeddings, t.embeddings);
  const Matrix ms = cosine_similarity_matrix(s.embeddings, s.embeddings);
  const auto profile = match_profiles(t, s);
  const auto sorted_t = similarity_profile(t.embeddings).sorted;
  const auto sorted_s = similarity_profile(s.embeddings).sorted;
  Matrix vote(t.k(), s.k());
  for (std::size_t i = 0; i < t.k(); ++i)
    for (std::size_t j = 0; j < s.k(); ++j)
      // profile agreement, with each row's argmax choice claimed first
      vote(i, j) = dot(sorted_t.row(i), sorted_s.row(j)) + (profile[i] == j ? 1e6 : 0.0);

  std::vector<ScoredMatching> found;
  auto consider = [&](std::vector<std::size_t> pi) {
    const double score = detail::swap_descent(mt, ms, pi);
    for (const auto& f : found)
      if (f.match == pi) return;
    found.push_back({score, std::move(pi)});
  };
  consider(detail::greedy_assignment(vote));
  Rng rng(stream_seed(seed, "align.polish"));
  for (std::size_t r = 0; r < restarts; ++r) {
    std::vector<std::size_t> pi(t.k());
    std::iota(pi.begin(), pi.end(), 0);
    std::shuffle(pi.begin(), pi.end(), rng);
    consider(std::move(pi));
  }
  std::stable_sort(found.begin(), found.end(),
                   [](const ScoredMatching& x, const ScoredMatching& y) { return x.score > y.score + 1e-12; });
  if (found.size() > keep) found.resize(keep);
  return found;
}

/// Unsupervised seed dictionary: one anchor per target group.
inline AnchorDictionary induce_seed(const GroupSet& t, const GroupSet& s) {
  auto match = match_profiles(t, s);
  AnchorDictionary d;
  for (std::size_t i = 0; i < match.size(); ++i) d.pairs.push_back(make_anchor(t, s, i, match[i], t.level));
  return d;
}

/// For every target group, the source group of highest cosine to its mapped embedding.
inline std::vector<std::size_t> match_by_mapping(const GroupSet& t, const GroupSet& s,
                                                 const Matrix& w) {
  Matrix sim = matmul_nt(matmul(detail::unit_rows(t.embeddings), w), detail::unit_rows(s.embeddings));
  std::vector<std::size_t> match(t.k());
  for (std::size_t i = 0; i < t.k(); ++i) match[i] = detail::argmax(sim.row(i));
  return match;
}

/// Σ over anchors of cosine(target·W, source).
inline double anchor_objective(const AnchorDictionary& d, const Matrix& w) {
  double total = 0.0;
  for (const auto& a : d.pairs) {
    std::vector<double> mapped(w.cols(), 0.0);
    for (std::size_t i = 0; i < a.target.size(); ++i)
      for (std::size_t j = 0; j < w.cols(); ++j) mapped[j] += a.target[i] * w(i, j);
    total += detail::cosine(mapped, a.source);
  }
  return total;
}

struct RefineOutcome {
  Matrix w;
  AnchorDictionary anchors;
  int iterations = 0;
  bool converged = false;
  std::vector<double> objective;  // after each Procrustes solve
};

/// Alternates a Procrustes solve over all anchors with re-inducing the anchors
/// of the current level (those tagged with t.level) by nearest mapped
/// neighbour. Anchors from other levels are kept fixed. Stops after `iters`
/// rounds or when the current-level matching no longer changes.
inline RefineOutcome procrustes_refine(const GroupSet& t, const GroupSet& s, AnchorDictionary d,
                                       int iters) {
  require(iters >= 1, "procrustes_refine needs at least one iteration");
  require(!d.empty(), "procrustes_refine needs a non-empty anchor dictionary");
  RefineOutcome out;
  auto current_matching = [&](const AnchorDictionary& dict) {
    std::vector<std::size_t> m;
    for (const auto& a : dict.pairs)
      if (a.level == t.level) m.push_back(a.source_group);
    return m;
  };
  for (int it = 1; it <= iters; ++it) {
    out.w = procrustes_pairs(d.target_matrix(), d.source_matrix());
    out.objective.push_back(anchor_objective(d, out.w));
    out.iterations = it;
    auto match = match_by_mapping(t, s, out.w);
    AnchorDictionary next;
    for (const auto& a : d.pairs)
      if (a.level != t.level) next.pairs.push_back(a);
    for (std::size_t i = 0; i < t.k(); ++i) next.pairs.push_back(make_anchor(t, s, i, match[i], t.level));
    const bool same = current_matching(next) == current_matching(d);
    d = std::move(next);
    if (same) {
      out.converged = true;
      break;
    }
  }
  if (!out.converged) {
    out.w = procrustes_pairs(d.target_matrix(), d.source_matrix());
    out.objective.push_back(anchor_objective(d, out.w));
  }
  out.anchors = std::move(d);
  return out;
}

enum class Grouping { Ontology, KMeans };

struct AlignConfig {
  std::size_t k = 50;           // groups retained per level (clamped to what exists)
  int max_level = 0;            // 0: every category level of the deeper ontology
  int first_level = 1;          // coarsest level aligned
  int procrustes_iters = 20;
  Grouping grouping = Grouping::Ontology;
  int kmeans_levels = 2;        // levels used when grouping by k-means
  std::vector<std::size_t> kmeans_k;  // explicit per-level cluster counts (overrides kmeans_levels)
  int kmeans_restarts = 10;     // Lloyd runs per clustering, lowest inertia kept
  int kmeans_draws = 8;         // independent clusterings offered to the beam per level
  std::size_t leaf_k = 0;       // 0: every code takes part in the leaf pass
  bool leaf_pass = true;
  bool code_level_only = false; // single leaf-level pass seeded from similarity profiles
  bool center = true;           // mean-center embeddings (between unit normalizations)
  std::size_t polish_restarts = 200;  // 0: plain sorted-profile seeds
  std::size_t beam = 8;         // candidate matchings carried per level
  std::uint64_t seed = 1;

  void validate() const {
    require(k >= 2, "k must be >= 2");
    require(procrustes_iters >= 1, "procrustes_iters must be >= 1");
    require(max_level >= 0, "max_level must be >= 0");
    require(kmeans_levels >= 1, "kmeans_levels must be >= 1");
    require(first_level >= 1, "first_level must be >= 1");
    require(kmeans_restarts >= 1, "kmeans_restarts must be >= 1");
    require(kmeans_draws >= 1, "kmeans_draws must be >= 1");
    require(beam >= 1, "beam must be >= 1");
    for (auto kk : kmeans_k) require(kk >= 2, "every k-means level needs k >= 2");
  }
};

struct LevelTrace {
  int level = 0;
  int target_level = 0;
  int source_level = 0;
  std::size_t k = 0;
  int iterations = 0;
  std::size_t anchors = 0;
};

struct AlignResult {
  Matrix w;
  AnchorDictionary anchors;
  std::vector<LevelTrace> levels;
  double score = 0.0;  // mean nearest-neighbour cosine of mapped target codes
};

namespace detail {

inline int max_category_level(const Ontology& o) {
  int deepest_leaf = 0;
  for (auto l : o.leaves()) deepest_leaf = std::max(deepest_leaf, o.level(l));
  return deepest_leaf - 1;
}

}  // namespace detail

/// Unsupervised model-selection criterion: mean over target codes of the
/// highest cosine between the mapped code and any source code.
inline double mapping_fit(const Matrix& w, const Matrix& target_unit, const Matrix& source_unit) {
  Matrix sim = matmul_nt(matmul(target_unit, w), source_unit);
  double total = 0.0;
  for (std::size_t i = 0; i < sim.rows(); ++i) total += sim(i, detail::argmax(sim.row(i)));
  return total / static_cast<double>(sim.rows());
}

/// Rows scaled to unit length, mean centred and scaled again: the space every
/// mapping is fitted in, and the one downstream models should consume.
inline EmbeddingMatrix prepare_embedding(const EmbeddingMatrix& e, bool center = true) {
  return {e.codes, center ? detail::unit_rows(detail::center_columns(detail::unit_rows(e.rows)))
                          : detail::unit_rows(e.rows)};
}

/// Multi-resolution alignment: per level, group both sides, induce a seed
/// dictionary, merge it with the anchors of coarser levels and refine by
/// Procrustes; finish with a pass over individual codes. With beam > 1 the best
/// few seed matchings of every level are followed and the finished mapping with
/// the highest mapping_fit wins.
inline AlignResult ontology_align(const EmbeddingMatrix& target, const EmbeddingMatrix& source,
                                  const Ontology* target_ontology, const Ontology* source_ontology,
                                  const AlignConfig& cfg,
                                  const std::vector<double>* target_frequencies = nullptr,
                                  const std::vector<double>* source_frequencies = nullptr) {
  cfg.validate();
  require(target.dim() == source.dim(), "embedding dimensions differ: target ", target.dim(),
          ", source ", source.dim());
  const EmbeddingMatrix et = prepare_embedding(target, cfg.center);
  const EmbeddingMatrix es = prepare_embedding(source, cfg.center);

  struct State {
    AnchorDictionary anchors;
    std::optional<Matrix> w;
    std::vector<LevelTrace> levels;
  };
  auto run_level = [&](const State& from, const GroupSet& gt, const GroupSet& gs,
                       AnchorDictionary seed, LevelTrace trace) {
    State out{from.anchors, {}, from.levels};
    out.anchors.merge(seed);
    auto refined = procrustes_refine(gt, gs, out.anchors, cfg.procrustes_iters);
    out.anchors = std::move(refined.anchors);
    out.w = std::move(refined.w);
    trace.k = gt.k();
    trace.iterations = refined.iterations;
    trace.anchors = out.anchors.size();
    out.levels.push_back(trace);
    return out;
  };

  const bool use_leaves = cfg.leaf_pass || cfg.code_level_only;
  std::optional<GroupSet> leaf_t, leaf_s;
  auto finish = [&](const State& st) {
    if (!use_leaves) return st;
    const int leaf_level = st.levels.empty() ? 1 : st.levels.back().level + 1;
    if (!leaf_t) {
      leaf_t = leaf_groups(et, 0, cfg.leaf_k, target_frequencies);
      leaf_s = leaf_groups(es, 0, cfg.leaf_k, source_frequencies);
    }
    GroupSet gt = *leaf_t, gs = *leaf_s;
    gt.level = gs.level = leaf_level;
    AnchorDictionary seed;
    if (st.w) {
      auto match = match_by_mapping(gt, gs, *st.w);
      for (std::size_t i = 0; i < gt.k(); ++i) seed.pairs.push_back(make_anchor(gt, gs, i, match[i], leaf_level));
    } else {
      seed = induce_seed(gt, gs);
    }
    return run_level(st, gt, gs, std::move(seed), LevelTrace{leaf_level, -1, -1, 0, 0, 0});
  };
  auto fit = [&](const State& finished) { return mapping_fit(*finished.w, et.rows, es.rows); };

  // beam entries: (state before the leaf pass, its finished state, fit)
  struct Entry {
    State partial;
    State finished;
    double score;
  };
  std::vector<Entry> beam;

  if (!cfg.code_level_only) {
    int levels = 0;
    int cat_t = 0, cat_s = 0;
    if (cfg.grouping == Grouping::Ontology) {
      require(target_ontology && source_ontology, "ontology grouping needs both ontologies");
      cat_t = detail::max_category_level(*target_ontology);
      cat_s = detail::max_category_level(*source_ontology);
      levels = std::max(cat_t, cat_s);
    } else {
      levels = cfg.kmeans_k.empty() ? cfg.kmeans_levels : static_cast<int>(cfg.kmeans_k.size());
    }
    if (cfg.max_level > 0) levels = std::min(levels, cfg.max_level);
    require(levels >= 1 && (levels + (cfg.leaf_pass ? 1 : 0)) >= 2,
            "alignment needs at least 2 usable levels, found ", levels + (cfg.leaf_pass ? 1 : 0));

    std::vector<State> frontier{State{}};
    require(cfg.first_level <= levels, "first_level ", cfg.first_level, " exceeds the ", levels,
            " available level(s)");
    for (int l = cfg.first_level; l <= levels; ++l) {
      LevelTrace trace{l, l, l, 0, 0, 0};
      // candidate (target groups, source groups, seed dictionary) triples
      struct Option {
        GroupSet gt, gs;
        AnchorDictionary seed;
      };
      std::vector<Option> options;
      auto add_options = [&](GroupSet gt, GroupSet gs, std::uint64_t stream) {
        gt.level = gs.level = l;
        if (cfg.polish_restarts > 0 && gt.k() == gs.k()) {
          for (const auto& m : polish_matching(gt, gs, cfg.polish_restarts, stream, cfg.beam)) {
            AnchorDictionary d;
            for (std::size_t i = 0; i < gt.k(); ++i) d.pairs.push_back(make_anchor(gt, gs, i, m.match[i], l));
            options.push_back({gt, gs, std::move(d)});
          }
        } else {
          auto d = induce_seed(gt, gs);
          options.push_back({std::move(gt), std::move(gs), std::move(d)});
        }
      };
      const std::string tag = std::to_string(l);
      if (cfg.grouping == Grouping::Ontology) {
        trace.target_level = std::max(1, std::min(l, cat_t));
        trace.source_level = std::max(1, std::min(l, cat_s));
        GroupSet gt = group_by_ontology(et, *target_ontology, trace.target_level, cfg.k);
        GroupSet gs = group_by_ontology(es, *source_ontology, trace.source_level, cfg.k);
        const std::size_t k = std::min(gt.k(), gs.k());
        if (gt.k() > k) gt = group_by_ontology(et, *target_ontology, trace.target_level, k);
        if (gs.k() > k) gs = group_by_ontology(es, *source_ontology, trace.source_level, k);
        add_options(std::move(gt), std::move(gs), stream_seed(cfg.seed, "align.level." + tag));
      } else {
        const double n = static_cast<double>(std::min(et.size(), es.size()));
        auto k = cfg.kmeans_k.empty()
                     ? static_cast<std::size_t>(std::llround(std::pow(n, double(l) / double(levels + 1))))
                     : cfg.kmeans_k[static_cast<std::size_t>(l - 1)];
        k = std::clamp<std::size_t>(k, 2, std::min<std::size_t>(cfg.k, std::min(et.size(), es.size())));
        // independent clusterings are alternative groupings for the beam
        for (int draw = 0; draw < cfg.kmeans_draws; ++draw) {
          const std::string dtag = tag + "." + std::to_string(draw);
          GroupSet gt = group_by_kmeans(et, k, stream_seed(cfg.seed, "kmeans.target." + dtag), l,
                                        cfg.kmeans_restarts);
          GroupSet gs = group_by_kmeans(es, k, stream_seed(cfg.seed, "kmeans.source." + dtag), l,
                                        cfg.kmeans_restarts);
          const std::size_t keep = std::min(gt.k(), gs.k());
          detail::retain_top_k(gt, keep);
          detail::retain_top_k(gs, keep);
          detail::finish_groups(gt, et.rows);
          detail::finish_groups(gs, es.rows);
          add_options(std::move(gt), std::move(gs), stream_seed(cfg.seed, "align.level." + dtag));
        }
      }

      std::vector<Entry> next;
      for (const auto& st : frontier)
        for (const auto& op : options) {
          State partial = run_level(st, op.gt, op.gs, op.seed, trace);
          State finished = finish(partial);
          const double score = fit(finished);
          next.push_back({std::move(partial), std::move(finished), score});
        }
      // best first; earlier candidates win ties
      std::stable_sort(next.begin(), next.end(),
                       [](const Entry& x, const Entry& y) { return x.score > y.score + 1e-12; });
      if (next.size() > cfg.beam) next.resize(cfg.beam);
      frontier.clear();
      for (const auto& e : next) frontier.push_back(e.partial);
      beam = std::move(next);
    }
  } else {
    State finished = finish(State{});
    const double score = fit(finished);
    beam.push_back({State{}, std::move(finished), score});
  }

  Entry& best = beam.front();
  AlignResult result;
  result.w = std::move(*best.finished.w);
  result.anchors = std::move(best.finished.anchors);
  result.levels = std::move(best.finished.levels);
  result.score = best.score;
  return result;
}

/// Same tree shape with the leaves shuffled across parent slots.
inline Ontology randomize_ontology(const Ontology& o, std::uint64_t seed) {
  std::vector<std::size_t> leaves;
  for (const auto& [p, c] : o.edges())
    if (o.is_leaf(c)) leaves.push_back(c);
  std::vector<std::size_t> shuffled = leaves;
  Rng rng(stream_seed(seed, "random-ontology"));
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  Ontology out;
  std::size_t k = 0;
  for (const auto& [p, c] : o.edges()) {
    if (o.is_leaf(c))
      out.add_edge(o.name(p), o.name(shuffled[k++]));
    else
      out.add_edge(o.name(p), o.name(c));
  }
  return out;
}

inline void save_anchors(const AnchorDictionary& d, const std::string& path) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot open ", path, " for writing");
  for (const auto& a : d.pairs) os << a.level << '\t' << a.target_label << '\t' << a.source_label << '\n';
}

}  // namespace automap
