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
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "automap/common.hpp"
#include "automap/corpus.hpp"
#include "automap/embedding.hpp"
#include "automap/numerics.hpp"

namespace automap {

// ---------------------------------------------------------------------------
// Mapping accuracy

namespace detail {

inline Matrix mapped_unit_rows(const Matrix& w, const EmbeddingMatrix& target) {
  require(target.dim() == w.rows(), "mapping has ", w.rows(), " rows but embeddings have dimension ",
          target.dim());
  Matrix mapped = matmul(target.rows, w);
  for (std::size_t i = 0; i < mapped.rows(); ++i) {
    const double n = norm(mapped.row(i));
    require(n > 1e-300, "degenerate mapping: transformed embedding of '", target.codes.id(i),
            "' has zero norm");
    for (double& v : mapped.row(i)) v /= n;
  }
  return mapped;
}

}  // namespace detail

/// Per target code: cosine to every true partner and whether one is in the top k.
struct MappingDetail {
  std::string target;
  std::string source;
  double cosine = 0.0;
  std::size_t rank = 0;  // 1-based rank of this partner among all source codes
};

struct MappingReport {
  double similarity = 0.0;
  double hit_at_10 = 0.0;
  std::vector<MappingDetail> details;
};

inline MappingReport mapping_report(const Matrix& w, const EmbeddingMatrix& target,
                                    const EmbeddingMatrix& source, const GroundTruthMap& truth,
                                    std::size_t k = 10) {
  require(!truth.pairs.empty(), "ground truth is empty");
  require(k >= 1, "k must be >= 1");
  require(source.dim() == w.cols(), "mapping output dimension does not match source embeddings");
  Matrix mapped = detail::mapped_unit_rows(w, target);
  Matrix src = normalize_rows(source.rows);

  MappingReport report;
  double total = 0.0;
  std::size_t hits = 0;
  const auto grouped = truth.by_target();
  for (const auto& [t, partners] : grouped) {
    const std::size_t ti = target.codes.index(t);
    std::vector<double> sims(src.rows());
    for (std::size_t j = 0; j < src.rows(); ++j) sims[j] = dot(mapped.row(ti), src.row(j));
    bool hit = false;
    for (const auto& s : partners) {
      const std::size_t si = source.codes.index(s);
      // rank with ties broken by source index
      std::size_t rank = 1;
      for (std::size_t j = 0; j < sims.size(); ++j)
        if (sims[j] > sims[si] || (sims[j] == sims[si] && j < si)) ++rank;
      report.details.push_back({t, s, sims[si], rank});
      total += sims[si];
      hit = hit || rank <= k;
    }
    if (hit) ++hits;
  }
  report.similarity = total / static_cast<double>(truth.pairs.size());
  report.hit_at_10 = static_cast<double>(hits) / static_cast<double>(grouped.size());
  return report;
}

/// Mean cosine between mapped target embeddings and their true source partners.
inline double mapping_similarity(const Matrix& w, const EmbeddingMatrix& target,
                                 const EmbeddingMatrix& source, const GroundTruthMap& truth) {
  return mapping_report(w, target, source, truth).similarity;
}

/// Fraction of target codes with any true partner among the k nearest source
/// codes (cosine, ties by source index).
inline double hit_at_k(const Matrix& w, const EmbeddingMatrix& target, const EmbeddingMatrix& source,
                       const GroundTruthMap& truth, std::size_t k = 10) {
  return mapping_report(w, target, source, truth, k).hit_at_10;
}

/// Summary file "metric,value"; per-pair rows go to a second file when a path is given.
inline void save_mapping_report(const MappingReport& r, const std::string& path,
                                const std::string& pairs_path = {}) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot open ", path, " for writing");
  os << std::setprecision(17) << "metric,value\nsimilarity," << r.similarity << "\nhit_at_10," << r.hit_at_10
     << '\n';
  if (pairs_path.empty()) return;
  std::ofstream ps(pairs_path);
  require(static_cast<bool>(ps), "cannot open ", pairs_path, " for writing");
  ps << std::setprecision(17) << "target,source,cosine,rank\n";
  for (const auto& d : r.details) ps << d.target << ',' << d.source << ',' << d.cosine << ',' << d.rank << '\n';
}

inline MappingReport load_mapping_report(const std::string& path, const std::string& pairs_path = {}) {
  MappingReport r;
  const auto t = read_csv(path);
  const auto m = t.column("metric"), v = t.column("value");
  for (const auto& row : t.rows) {
    if (row[m] == "similarity") r.similarity = parse_double(row[v]);
    else if (row[m] == "hit_at_10") r.hit_at_10 = parse_double(row[v]);
    else fail(path, ": unknown metric '", row[m], "'");
  }
  if (pairs_path.empty()) return r;
  const auto p = read_csv(pairs_path);
  for (const auto& row : p.rows)
    r.details.push_back({row[p.column("target")], row[p.column("source")],
                         parse_double(row[p.column("cosine")]),
                         static_cast<std::size_t>(parse_double(row[p.column("rank")]))});
  return r;
}

// ---------------------------------------------------------------------------
// Task metrics

/// Mann-Whitney statistic: probability a positive outranks a negative, ties count half.
inline double auc_roc(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), "scores and labels differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]] == 1) {
        rank_sum += mid_rank;
        ++pos;
      } else {
        ++neg;
      }
    }
    i = j;
  }
  require(pos > 0 && neg > 0, "AUC-ROC needs both classes present");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

/// Area under the precision-recall step curve: Σ (R_n − R_{n−1}) P_n over
/// descending score thresholds, tied scores forming one threshold.
inline double auc_pr(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), "scores and labels differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const double total_pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  require(total_pos > 0, "AUC-PR needs at least one positive");
  require(total_pos < static_cast<double>(labels.size()), "AUC-PR needs at least one negative");
  double tp = 0, fp = 0, prev_recall = 0, area = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      if (labels[idx[j]] == 1) ++tp; else ++fp;
      ++j;
    }
    const double recall = tp / total_pos;
    area += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
    i = j;
  }
  return area;
}

/// Per-class F1 averaged with weights equal to true-class support.
inline double weighted_f1(std::span<const int> predicted, std::span<const int> truth) {
  require(!truth.empty(), "weighted F1 of empty input");
  require(predicted.size() == truth.size(), "prediction and truth lengths differ");
  std::map<int, double> tp, fp, fn, support;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    support[truth[i]] += 1;
    if (predicted[i] == truth[i]) {
      tp[truth[i]] += 1;
    } else {
      fp[predicted[i]] += 1;
      fn[truth[i]] += 1;
    }
  }
  double total = 0.0;
  for (const auto& [c, n] : support) {
    const double denom = 2 * tp[c] + fp[c] + fn[c];
    const double f1 = denom > 0 ? 2 * tp[c] / denom : 0.0;
    total += n * f1;
  }
  return total / static_cast<double>(truth.size());
}

/// One-vs-one AUC: for each unordered pair of present classes (a, b), the mean
/// of AUC(a vs b on p_a) and AUC(b vs a on p_b) over samples of those two
/// classes, weighted by the pair's prevalence.
inline double ovo_weighted_auc(const Matrix& probabilities, std::span<const int> truth) {
  require(!truth.empty(), "one-vs-one AUC of empty input");
  require(probabilities.rows() == truth.size(), "probability rows and truth lengths differ");
  std::vector<int> classes(truth.begin(), truth.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  require(classes.size() >= 2, "one-vs-one AUC needs at least two classes");
  for (int c : classes)
    require(c >= 0 && static_cast<std::size_t>(c) < probabilities.cols(), "class ", c,
            " has no probability column");
  double total = 0.0, weights = 0.0;
  for (std::size_t x = 0; x < classes.size(); ++x) {
    for (std::size_t y = x + 1; y < classes.size(); ++y) {
      const int a = classes[x], b = classes[y];
      std::vector<double> sa, sb;
      std::vector<int> la, lb;
      for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] != a && truth[i] != b) continue;
        sa.push_back(probabilities(i, static_cast<std::size_t>(a)));
        la.push_back(truth[i] == a ? 1 : 0);
        sb.push_back(probabilities(i, static_cast<std::size_t>(b)));
        lb.push_back(truth[i] == b ? 1 : 0);
      }
      const double pair_auc = 0.5 * (auc_roc(sa, la) + auc_roc(sb, lb));
      const double weight = static_cast<double>(sa.size());
      total += weight * pair_auc;
      weights += weight;
    }
  }
  return total / weights;
}

// ---------------------------------------------------------------------------
// Bootstrap

struct BootstrapResult {
  double mean = 0.0;
  double std = 0.0;
  std::size_t redraws = 0;
};

/// Resamples `n_units` units with replacement `n` times. Replicate r draws from
/// its own generator seeded with seed + r; resamples on which `metric` throws
/// are redrawn. Fails when more than half of all draws fail.
inline BootstrapResult bootstrap(const std::function<double(std::span<const std::size_t>)>& metric,
                                 std::size_t n_units, int n, std::uint64_t seed) {
  require(n_units > 0, "bootstrap over empty data");
  require(n >= 1, "bootstrap needs at least one replicate");
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(n));
  BootstrapResult out;
  std::vector<std::size_t> sample(n_units);
  std::uniform_int_distribution<std::size_t> pick(0, n_units - 1);
  for (int r = 0; r < n; ++r) {
    Rng rng(seed + static_cast<std::uint64_t>(r));
    for (;;) {
      for (auto& s : sample) s = pick(rng);
      try {
        values.push_back(metric(sample));
        break;
      } catch (const Error&) {
        ++out.redraws;
        // more failures than replicates means the failure rate exceeds one half
        require(out.redraws <= static_cast<std::size_t>(n),
                "bootstrap metric failed on more than half of the resamples");
      }
    }
  }
  const double m = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - m) * (v - m);
  out.mean = m;
  out.std = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
  return out;
}

}  // namespace automap
