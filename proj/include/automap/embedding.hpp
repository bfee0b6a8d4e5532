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
#include <iomanip>
#include <map>
#include <random>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "automap/common.hpp"
#include "automap/corpus.hpp"
#include "automap/numerics.hpp"

namespace automap {

/// Symmetric visit-level co-occurrence counts; the diagonal is never stored.
class CooccurrenceMatrix {
 public:
  explicit CooccurrenceMatrix(std::size_t dim = 0) : dim_(dim) {}

  std::size_t dim() const { return dim_; }

  void add(std::size_t i, std::size_t j, double count) {
    require(i < dim_ && j < dim_, "co-occurrence index out of range");
    if (i == j) return;
    upper_[key(i, j)] += count;
  }

  double at(std::size_t i, std::size_t j) const {
    if (i == j) return 0.0;
    auto it = upper_.find(key(i, j));
    return it == upper_.end() ? 0.0 : it->second;
  }

  /// Number of distinct unordered pairs with a stored count.
  std::size_t pair_count() const { return upper_.size(); }

  /// Every nonzero entry in both orientations, sorted by (i, j).
  std::vector<std::tuple<std::size_t, std::size_t, double>> entries() const {
    std::vector<std::tuple<std::size_t, std::size_t, double>> out;
    out.reserve(2 * upper_.size());
    for (const auto& [k, v] : upper_) {
      if (v <= 0.0) continue;
      out.emplace_back(k.first, k.second, v);
      out.emplace_back(k.second, k.first, v);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  Matrix dense() const {
    Matrix m(dim_, dim_);
    for (const auto& [k, v] : upper_) {
      m(k.first, k.second) = v;
      m(k.second, k.first) = v;
    }
    return m;
  }

  CooccurrenceMatrix& operator+=(const CooccurrenceMatrix& o) {
    require(dim_ == o.dim_, "co-occurrence dimension mismatch");
    for (const auto& [k, v] : o.upper_) upper_[k] += v;
    return *this;
  }

 private:
  static std::pair<std::size_t, std::size_t> key(std::size_t i, std::size_t j) {
    return i < j ? std::make_pair(i, j) : std::make_pair(j, i);
  }

  std::size_t dim_;
  std::map<std::pair<std::size_t, std::size_t>, double> upper_;
};

/// Counts, for every visit, each unordered pair of code occurrences with
/// distinct codes. Repeated codes contribute once per occurrence.
inline CooccurrenceMatrix build_cooccurrence(const Corpus& corpus) {
  require(!corpus.patients.empty(), "cannot build co-occurrence of an empty corpus");
  CooccurrenceMatrix x(corpus.vocabulary.size());
  for (const auto& p : corpus.patients)
    for (const auto& v : p.visits)
      for (std::size_t a = 0; a < v.codes.size(); ++a)
        for (std::size_t b = a + 1; b < v.codes.size(); ++b)
          if (v.codes[a] != v.codes[b]) x.add(v.codes[a], v.codes[b], 1.0);
  return x;
}

struct EmbeddingMatrix {
  Vocabulary codes;
  Matrix rows;  // |C| x d, row i belongs to codes.id(i)

  std::size_t dim() const { return rows.cols(); }
  std::size_t size() const { return rows.rows(); }

  std::span<const double> lookup(const std::string& id) const { return rows.row(codes.index(id)); }

  bool operator==(const EmbeddingMatrix& o) const { return codes == o.codes && rows == o.rows; }
};

inline void save_embedding(const EmbeddingMatrix& e, const std::string& path) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot open ", path, " for writing");
  os << e.size() << ' ' << e.dim() << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < e.size(); ++i) {
    os << e.codes.id(i);
    for (double v : e.rows.row(i)) os << ' ' << v;
    os << '\n';
  }
}

inline EmbeddingMatrix load_embedding(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot open ", path);
  std::size_t n = 0, d = 0;
  require(static_cast<bool>(is >> n >> d), path, ":1: expected 'num_codes dim'");
  std::vector<std::string> ids(n);
  Matrix rows(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    require(static_cast<bool>(is >> ids[i]), path, ":", i + 2, ": missing code id");
    for (std::size_t j = 0; j < d; ++j)
      require(static_cast<bool>(is >> rows(i, j)), path, ":", i + 2, ": expected ", d, " values");
  }
  require(rows.all_finite(), path, ": non-finite embedding values");
  return {Vocabulary(std::move(ids)), std::move(rows)};
}

struct GloveConfig {
  std::size_t d = 128;
  int epochs = 50;
  double learning_rate = 0.05;
  double x_max = 100.0;
  double alpha = 0.75;
  std::uint64_t seed = 1;

  void validate() const {
    require(d >= 2, "embedding dimension must be >= 2");
    require(epochs >= 1, "epochs must be >= 1");
    require(learning_rate > 0.0, "learning rate must be positive");
    require(x_max > 0.0 && alpha > 0.0, "x_max and alpha must be positive");
  }
};

/// Word vectors, context vectors and both bias vectors.
struct GloveModel {
  Matrix w, wc;
  std::vector<double> b, bc;
};

inline double glove_weight(double x, const GloveConfig& cfg) {
  return x < cfg.x_max ? std::pow(x / cfg.x_max, cfg.alpha) : 1.0;
}

/// Σ f(X_ij)(w_i·w̃_j + b_i + b̃_j − log X_ij)² over nonzero ordered entries.
inline double glove_loss(const GloveModel& m, const CooccurrenceMatrix& x, const GloveConfig& cfg) {
  double loss = 0.0;
  for (const auto& [i, j, v] : x.entries()) {
    const double diff = dot(m.w.row(i), m.wc.row(j)) + m.b[i] + m.bc[j] - std::log(v);
    loss += glove_weight(v, cfg) * diff * diff;
  }
  return loss;
}

/// Full gradient of glove_loss, laid out like the model.
inline GloveModel glove_gradient(const GloveModel& m, const CooccurrenceMatrix& x,
                                 const GloveConfig& cfg) {
  GloveModel g{Matrix(m.w.rows(), m.w.cols()), Matrix(m.wc.rows(), m.wc.cols()),
               std::vector<double>(m.b.size(), 0.0), std::vector<double>(m.bc.size(), 0.0)};
  for (const auto& [i, j, v] : x.entries()) {
    const double diff = dot(m.w.row(i), m.wc.row(j)) + m.b[i] + m.bc[j] - std::log(v);
    const double coef = 2.0 * glove_weight(v, cfg) * diff;
    for (std::size_t k = 0; k < m.w.cols(); ++k) {
      g.w(i, k) += coef * m.wc(j, k);
      g.wc(j, k) += coef * m.w(i, k);
    }
    g.b[i] += coef;
    g.bc[j] += coef;
  }
  return g;
}

inline GloveModel init_glove(std::size_t n, const GloveConfig& cfg) {
  Rng rng(stream_seed(cfg.seed, "glove.init"));
  const double scale = 1.0 / static_cast<double>(cfg.d);
  std::uniform_real_distribution<double> u(-0.5 * scale, 0.5 * scale);
  GloveModel m{Matrix(n, cfg.d), Matrix(n, cfg.d), std::vector<double>(n), std::vector<double>(n)};
  for (auto& v : m.w.data()) v = u(rng);
  for (auto& v : m.wc.data()) v = u(rng);
  for (auto& v : m.b) v = u(rng);
  for (auto& v : m.bc) v = u(rng);
  return m;
}

struct GloveResult {
  EmbeddingMatrix embedding;
  std::vector<double> loss_history;  // full-pass loss before training, then after each epoch
};

/// AdaGrad over shuffled nonzero entries, as in the reference GloVe trainer.
/// The emitted vectors are w + w̃.
inline GloveResult train_glove_detailed(const CooccurrenceMatrix& x, const Vocabulary& vocab,
                                        const GloveConfig& cfg) {
  cfg.validate();
  require(vocab.size() == x.dim(), "vocabulary size ", vocab.size(),
          " does not match co-occurrence dimension ", x.dim());
  auto entries = x.entries();
  require(!entries.empty(), "co-occurrence matrix is all zero; nothing to train");

  const std::size_t n = x.dim(), d = cfg.d;
  GloveModel m = init_glove(n, cfg);
  Matrix gsq_w(n, d, 1.0), gsq_wc(n, d, 1.0);
  std::vector<double> gsq_b(n, 1.0), gsq_bc(n, 1.0);
  Rng rng(stream_seed(cfg.seed, "glove.shuffle"));

  GloveResult result;
  result.loss_history.push_back(glove_loss(m, x, cfg));
  std::vector<double> gw(d), gwc(d);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(entries.begin(), entries.end(), rng);
    for (const auto& [i, j, v] : entries) {
      auto wi = m.w.row(i);
      auto wj = m.wc.row(j);
      const double diff = dot(wi, wj) + m.b[i] + m.bc[j] - std::log(v);
      const double coef = 2.0 * glove_weight(v, cfg) * diff;
      if (!std::isfinite(coef)) continue;
      for (std::size_t k = 0; k < d; ++k) {
        gw[k] = coef * wj[k];
        gwc[k] = coef * wi[k];
      }
      auto sw = gsq_w.row(i);
      auto swc = gsq_wc.row(j);
      for (std::size_t k = 0; k < d; ++k) {
        wi[k] -= cfg.learning_rate * gw[k] / std::sqrt(sw[k]);
        wj[k] -= cfg.learning_rate * gwc[k] / std::sqrt(swc[k]);
        sw[k] += gw[k] * gw[k];
        swc[k] += gwc[k] * gwc[k];
      }
      m.b[i] -= cfg.learning_rate * coef / std::sqrt(gsq_b[i]);
      m.bc[j] -= cfg.learning_rate * coef / std::sqrt(gsq_bc[j]);
      gsq_b[i] += coef * coef;
      gsq_bc[j] += coef * coef;
    }
    result.loss_history.push_back(glove_loss(m, x, cfg));
  }

  result.embedding.codes = vocab;
  result.embedding.rows = m.w + m.wc;
  return result;
}

inline EmbeddingMatrix train_glove(const CooccurrenceMatrix& x, const Vocabulary& vocab,
                                   const GloveConfig& cfg) {
  return train_glove_detailed(x, vocab, cfg).embedding;
}

}  // namespace automap
