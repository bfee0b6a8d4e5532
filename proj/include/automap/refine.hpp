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

// Code-level refinement of the mapping: an adversarial discriminator and a
// frozen task backbone jointly fine-tune W. Also hosts the backbones, their
// training loops and the direct-training / transfer-learning baselines.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "automap/common.hpp"
#include "automap/corpus.hpp"
#include "automap/metrics.hpp"
#include "automap/neural.hpp"
#include "automap/numerics.hpp"

namespace automap {

enum class Task { Mortality, LengthOfStay };
enum class BackboneKind { Mlp, Rnn };

inline std::size_t task_classes(Task t) { return t == Task::Mortality ? 2 : kLosClasses; }
inline std::string task_name(Task t) { return t == Task::Mortality ? "mortality" : "los"; }
inline std::string backbone_name(BackboneKind k) { return k == BackboneKind::Mlp ? "mlp" : "rnn"; }

inline Task parse_task(const std::string& s) {
  if (s == "mortality") return Task::Mortality;
  if (s == "los" || s == "length_of_stay") return Task::LengthOfStay;
  fail("unknown task '", s, "' (expected mortality or los)");
}

inline BackboneKind parse_backbone(const std::string& s) {
  if (s == "mlp") return BackboneKind::Mlp;
  if (s == "rnn") return BackboneKind::Rnn;
  fail("unknown backbone '", s, "' (expected mlp or rnn)");
}

/// Row labels a backbone is trained against: one per patient for mortality,
/// one per visit for length of stay.
inline std::vector<int> task_labels(const Patient& p, Task t) {
  return t == Task::Mortality ? std::vector<int>{p.mortality} : p.los_classes();
}

/// Visit-level sums of embedding rows: row v = Σ_{c in visit v} x[c].
inline Matrix visit_sums(const Patient& p, const Matrix& x) {
  Matrix out(p.visits.size(), x.cols());
  for (std::size_t v = 0; v < p.visits.size(); ++v)
    for (auto c : p.visits[v].codes) {
      require(c < x.rows(), "code index ", c, " outside the embedding table of ", x.rows(), " rows");
      for (std::size_t j = 0; j < x.cols(); ++j) out(v, j) += x(c, j);
    }
  return out;
}

struct Backbone {
  BackboneKind kind = BackboneKind::Mlp;
  Task task = Task::Mortality;
  std::size_t dim = 0;
  nn::Network net;
};

/// MLP: [sum-pool →] dense 128 → relu → dense(classes).
/// RNN: recurrent 128 [→ last step] → dense 128 → relu → dense(classes).
/// Mortality pools to one row per patient; length of stay keeps one row per visit.
inline Backbone make_backbone(BackboneKind kind, Task task, std::size_t dim, std::uint64_t seed,
                              std::size_t hidden = 128) {
  require(dim >= 1 && hidden >= 1, "backbone dimensions must be positive");
  Rng rng(stream_seed(seed, "backbone.init"));
  Backbone b{kind, task, dim, {}};
  const bool pooled = task == Task::Mortality;
  if (kind == BackboneKind::Mlp) {
    if (pooled) b.net.add<nn::SumPool>();
    b.net.add<nn::Dense>(dim, hidden, rng);
  } else {
    b.net.add<nn::Recurrent>(dim, hidden, rng);
    if (pooled) b.net.add<nn::LastStep>();
    b.net.add<nn::Dense>(hidden, hidden, rng);
  }
  b.net.add<nn::Relu>();
  b.net.add<nn::Dense>(hidden, task_classes(task), rng);
  return b;
}

/// The output layer, the only backbone part tuned when head tuning is enabled.
inline std::vector<nn::Param*> head_params(Backbone& b) {
  auto* d = dynamic_cast<nn::Dense*>(&b.net.layer(b.net.size() - 1));
  require(d != nullptr, "backbone does not end in a dense layer");
  return d->params();
}

// ---------------------------------------------------------------------------
// Task loss over a batch of patients

struct BatchGradient {
  double loss = 0.0;
  std::vector<Matrix> d_input;  // per patient, gradient w.r.t. its visit-sum input
};

/// Mean cross-entropy over every prediction row of the batch. With backprop,
/// backbone parameter gradients accumulate and per-patient input gradients are
/// returned.
inline BatchGradient batch_task_loss(Backbone& b, std::span<const Patient* const> batch, const Matrix& x,
                                     bool train, bool backprop) {
  require(!batch.empty(), "empty training batch");
  require(x.cols() == b.dim, "embedding dimension ", x.cols(), " does not match the backbone's ", b.dim);
  std::size_t rows = 0;
  for (const auto* p : batch) rows += task_labels(*p, b.task).size();
  BatchGradient out;
  for (const auto* p : batch) {
    const auto labels = task_labels(*p, b.task);
    Matrix logits = b.net.forward(visit_sums(*p, x), train);
    auto ce = nn::softmax_cross_entropy(logits, labels);
    const double share = static_cast<double>(labels.size()) / static_cast<double>(rows);
    out.loss += ce.loss * share;
    if (backprop) out.d_input.push_back(b.net.backward(ce.grad * share));
  }
  return out;
}

/// Σ_p visit_sums(p, e)ᵀ · d_input_p: the gradient w.r.t. W when the backbone
/// input is visit_sums(p, e·W).
inline Matrix mapping_gradient(std::span<const Patient* const> batch, const BatchGradient& g, const Matrix& e) {
  Matrix dw(e.cols(), g.d_input.empty() ? e.cols() : g.d_input.front().cols());
  for (std::size_t i = 0; i < batch.size(); ++i) dw += matmul_tn(visit_sums(*batch[i], e), g.d_input[i]);
  return dw;
}

/// Scatters per-patient input gradients onto embedding rows.
inline void accumulate_table_gradient(std::span<const Patient* const> batch, const BatchGradient& g, Matrix& dx) {
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t v = 0; v < batch[i]->visits.size(); ++v)
      for (auto c : batch[i]->visits[v].codes)
        for (std::size_t j = 0; j < dx.cols(); ++j) dx(c, j) += g.d_input[i](v, j);
}

/// Softmax cross-entropy of the backbone on embeddings e·W.
inline double classification_loss(Backbone& b, std::span<const Patient* const> batch, const Matrix& e,
                                   const Matrix& w, Matrix* dw = nullptr) {
  const Matrix x = matmul(e, w);
  auto g = batch_task_loss(b, batch, x, false, dw != nullptr);
  if (dw) *dw = mapping_gradient(batch, g, e);
  return g.loss;
}

// ---------------------------------------------------------------------------
// Predictions and task metrics

struct Predictions {
  Matrix probabilities;             // one row per prediction
  std::vector<int> labels;
  std::vector<std::size_t> patient;  // patient index of each row
  std::size_t patients = 0;
};

inline Predictions predict(Backbone& b, const Corpus& c, const Matrix& x) {
  require(!c.patients.empty(), "cannot predict on an empty corpus");
  Predictions out;
  out.patients = c.patients.size();
  std::vector<Matrix> probs;
  std::size_t rows = 0;
  for (std::size_t i = 0; i < c.patients.size(); ++i) {
    const auto& p = c.patients[i];
    probs.push_back(nn::softmax(b.net.forward(visit_sums(p, x), false)));
    require(probs.back().cols() == task_classes(b.task), "backbone emits ", probs.back().cols(),
            " logits but ", task_name(b.task), " has ", task_classes(b.task), " classes");
    for (int l : task_labels(p, b.task)) {
      out.labels.push_back(l);
      out.patient.push_back(i);
    }
    rows += probs.back().rows();
  }
  require(rows == out.labels.size(), "prediction rows do not match task labels");
  out.probabilities = Matrix(rows, task_classes(b.task));
  std::size_t r = 0;
  for (const auto& m : probs)
    for (std::size_t i = 0; i < m.rows(); ++i, ++r)
      std::copy(m.row(i).begin(), m.row(i).end(), out.probabilities.row(r).begin());
  return out;
}

namespace detail {

inline Predictions subset(const Predictions& p, std::span<const std::size_t> patients) {
  std::vector<std::vector<std::size_t>> rows_of(p.patients);
  for (std::size_t r = 0; r < p.patient.size(); ++r) rows_of[p.patient[r]].push_back(r);
  Predictions out;
  out.patients = patients.size();
  std::size_t total = 0;
  for (auto i : patients) total += rows_of[i].size();
  out.probabilities = Matrix(total, p.probabilities.cols());
  std::size_t k = 0;
  for (std::size_t u = 0; u < patients.size(); ++u)
    for (auto r : rows_of[patients[u]]) {
      std::copy(p.probabilities.row(r).begin(), p.probabilities.row(r).end(), out.probabilities.row(k++).begin());
      out.labels.push_back(p.labels[r]);
      out.patient.push_back(u);
    }
  return out;
}

inline std::vector<double> column(const Matrix& m, std::size_t j) {
  std::vector<double> v(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) v[i] = m(i, j);
  return v;
}

inline std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < m.cols(); ++j)
      if (m(i, j) > m(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace detail

/// Metric names per task, in report order.
inline std::vector<std::string> task_metric_names(Task t) {
  if (t == Task::Mortality) return {"auc_roc", "auc_pr"};
  return {"ovo_auc", "weighted_f1"};
}

inline double task_metric(const Predictions& p, const std::string& name) {
  if (name == "auc_roc") return auc_roc(detail::column(p.probabilities, 1), p.labels);
  if (name == "auc_pr") return auc_pr(detail::column(p.probabilities, 1), p.labels);
  if (name == "ovo_auc") return ovo_weighted_auc(p.probabilities, p.labels);
  if (name == "weighted_f1") return weighted_f1(detail::argmax_rows(p.probabilities), p.labels);
  fail("unknown task metric '", name, "'");
}

/// Early-stopping metric: AUC-PR for mortality, one-vs-one AUC for length of stay.
inline std::string monitored_metric(Task t) { return t == Task::Mortality ? "auc_pr" : "ovo_auc"; }

struct MetricSummary {
  std::string name;
  double value = 0.0;  // on the full evaluation set
  double mean = 0.0;   // bootstrap
  double std = 0.0;
  std::size_t redraws = 0;
};

struct TaskReport {
  Task task = Task::Mortality;
  std::vector<MetricSummary> metrics;

  const MetricSummary& get(const std::string& name) const {
    for (const auto& m : metrics)
      if (m.name == name) return m;
    fail("task report has no metric '", name, "'");
  }
};

/// Point estimates plus patient-level bootstrap mean and standard deviation.
inline TaskReport evaluate_predictions(const Predictions& p, Task task, int n_bootstrap, std::uint64_t seed) {
  TaskReport r{task, {}};
  for (const auto& name : task_metric_names(task)) {
    MetricSummary m{name, task_metric(p, name), 0.0, 0.0, 0};
    if (n_bootstrap > 0) {
      auto b = bootstrap([&](std::span<const std::size_t> s) { return task_metric(detail::subset(p, s), name); },
                         p.patients, n_bootstrap, stream_seed(seed, "bootstrap." + name));
      m.mean = b.mean;
      m.std = b.std;
      m.redraws = b.redraws;
    } else {
      m.mean = m.value;
    }
    r.metrics.push_back(m);
  }
  return r;
}

inline void save_task_report(const TaskReport& r, const std::string& path) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot open ", path, " for writing");
  os << "task,metric,value,bootstrap_mean,bootstrap_std,redraws\n" << std::setprecision(17);
  for (const auto& m : r.metrics)
    os << task_name(r.task) << ',' << m.name << ',' << m.value << ',' << m.mean << ',' << m.std << ','
       << m.redraws << '\n';
}

inline TaskReport load_task_report(const std::string& path) {
  const auto t = read_csv(path);
  TaskReport r;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    const Task task = parse_task(row[t.column("task")]);
    require(i == 0 || task == r.task, path, ": rows mix tasks");
    r.task = task;
    r.metrics.push_back({row[t.column("metric")], parse_double(row[t.column("value")]),
                         parse_double(row[t.column("bootstrap_mean")]), parse_double(row[t.column("bootstrap_std")]),
                         static_cast<std::size_t>(parse_double(row[t.column("redraws")]))});
  }
  require(!r.metrics.empty(), path, ": empty task report");
  return r;
}

// ---------------------------------------------------------------------------
// Supervised training (source backbone, direct training, transfer learning)

struct TrainConfig {
  nn::OptimizerConfig optimizer;
  int max_epochs = 100;
  int patience = 20;
  std::uint64_t seed = 1;

  void validate() const {
    optimizer.validate();
    require(max_epochs >= 0, "max_epochs must be >= 0");
    require(patience >= 1, "patience must be >= 1");
  }
};

struct TrainedModel {
  Backbone backbone;
  Matrix embeddings;  // the embedding table the backbone was trained with
  double best_valid = 0.0;
  int best_epoch = 0;
  int epochs_run = 0;
};

namespace detail {

inline std::vector<const Patient*> patient_pointers(const Corpus& c) {
  std::vector<const Patient*> out;
  for (const auto& p : c.patients) out.push_back(&p);
  return out;
}

}  // namespace detail

/// Mini-batch RMSprop on the task loss with early stopping on the validation
/// metric; returns the best-validation checkpoint (epoch 0 = the initial model).
inline TrainedModel train_backbone(Backbone b, Matrix embeddings, const Corpus& train, const Corpus& valid,
                                   const TrainConfig& cfg, bool train_embeddings) {
  cfg.validate();
  require(!train.patients.empty(), "training split is empty");
  require(!valid.patients.empty(), "validation split is empty");
  require(embeddings.cols() == b.dim, "embedding dimension ", embeddings.cols(),
          " does not match the backbone's ", b.dim);
  require(embeddings.rows() >= train.vocabulary.size(), "embedding table has ", embeddings.rows(),
          " rows for a vocabulary of ", train.vocabulary.size());
  const std::string metric = monitored_metric(b.task);
  nn::Param table(std::move(embeddings));
  auto score = [&]() { return task_metric(predict(b, valid, table.value), metric); };

  TrainedModel best{b, table.value, score(), 0, 0};
  Rng rng(stream_seed(cfg.seed, "train.shuffle"));
  auto order = detail::patient_pointers(train);
  int since_best = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.optimizer.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.optimizer.batch_size);
      std::span<const Patient* const> batch(order.data() + start, end - start);
      b.net.zero_grad();
      auto g = batch_task_loss(b, batch, table.value, true, true);
      auto params = b.net.params();
      if (train_embeddings) {
        table.zero_grad();
        accumulate_table_gradient(batch, g, table.grad);
        params.push_back(&table);
      }
      nn::rmsprop_step(params, cfg.optimizer);
    }
    best.epochs_run = epoch;
    const double s = score();
    if (s > best.best_valid) {
      best.backbone = b;
      best.embeddings = table.value;
      best.best_valid = s;
      best.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  return best;
}

/// Baseline: a fresh backbone trained end to end on labeled target data, its
/// embedding table initialised from `initial_embeddings` and trained jointly.
inline TrainedModel train_backbone_direct(const Corpus& train, const Corpus& valid, const Matrix& initial_embeddings,
                                          BackboneKind kind, Task task, const TrainConfig& cfg) {
  require(!train.patients.empty(), "direct training needs a non-empty labeled split");
  auto b = make_backbone(kind, task, initial_embeddings.cols(), stream_seed(cfg.seed, "direct"));
  return train_backbone(std::move(b), initial_embeddings, train, valid, cfg, true);
}

/// Baseline: keep the pretrained backbone, swap in the target embedding table and
/// fine-tune both on labeled target data.
inline TrainedModel transfer_learning(const Backbone& pretrained, const Matrix& target_embeddings,
                                      const Corpus& train, const Corpus& valid, const TrainConfig& cfg) {
  require(target_embeddings.cols() == pretrained.dim, "target embedding dimension ", target_embeddings.cols(),
          " does not match the pretrained backbone's ", pretrained.dim);
  return train_backbone(pretrained, target_embeddings, train, valid, cfg, true);
}

// ---------------------------------------------------------------------------
// Adversary

struct Discriminator {
  nn::Network net;
  std::size_t dim = 0;
};

/// dense(d,128) → leaky relu → dropout → dense(128,128) → leaky relu → dropout →
/// dense(128,1), read through a sigmoid.
inline Discriminator make_discriminator(std::size_t dim, std::uint64_t seed, std::size_t hidden = 128,
                                        double dropout = 0.1) {
  Rng rng(stream_seed(seed, "discriminator.init"));
  Discriminator d{{}, dim};
  d.net.add<nn::Dense>(dim, hidden, rng);
  d.net.add<nn::LeakyRelu>(0.2);
  d.net.add<nn::Dropout>(dropout, stream_seed(seed, "discriminator.dropout.1"));
  d.net.add<nn::Dense>(hidden, hidden, rng);
  d.net.add<nn::LeakyRelu>(0.2);
  d.net.add<nn::Dropout>(dropout, stream_seed(seed, "discriminator.dropout.2"));
  d.net.add<nn::Dense>(hidden, 1, rng);
  return d;
}

inline constexpr double kProbabilityClamp = 1e-7;

namespace detail {

// Probability of "source" per row, clamped away from 0 and 1, plus whether the
// clamp was active (the clamp has zero derivative there).
inline std::pair<std::vector<double>, std::vector<bool>> discriminate(Discriminator& d, const Matrix& x, bool train) {
  Matrix z = d.net.forward(x, train);
  std::vector<double> p(z.rows());
  std::vector<bool> clamped(z.rows());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const double s = nn::sigmoid(z(i, 0));
    p[i] = std::clamp(s, kProbabilityClamp, 1.0 - kProbabilityClamp);
    clamped[i] = p[i] != s;
  }
  return {p, clamped};
}

}  // namespace detail

/// mean −log D(e_S) − log(1 − D(e_T·W)). With `backprop`, discriminator
/// gradients accumulate in its parameters and, when `dw` is given, the gradient
/// w.r.t. W is written there.
inline double discriminator_loss(Discriminator& d, const Matrix& e_s, const Matrix& e_t, const Matrix& w,
                                 bool train = true, bool backprop = false, Matrix* dw = nullptr) {
  require(e_s.rows() > 0 && e_t.rows() > 0, "discriminator loss needs non-empty batches");
  require(e_s.cols() == d.dim && w.cols() == d.dim && e_t.cols() == w.rows(),
          "discriminator loss: dimension mismatch");
  double loss = 0.0;
  {
    auto [p, clamped] = detail::discriminate(d, e_s, train);
    const double n = static_cast<double>(p.size());
    Matrix dz(p.size(), 1);
    for (std::size_t i = 0; i < p.size(); ++i) {
      loss -= std::log(p[i]) / n;
      dz(i, 0) = clamped[i] ? 0.0 : -(1.0 - p[i]) / n;
    }
    if (backprop) d.net.backward(dz);
  }
  {
    const Matrix mapped = matmul(e_t, w);
    auto [p, clamped] = detail::discriminate(d, mapped, train);
    const double n = static_cast<double>(p.size());
    Matrix dz(p.size(), 1);
    for (std::size_t i = 0; i < p.size(); ++i) {
      loss -= std::log(1.0 - p[i]) / n;
      dz(i, 0) = clamped[i] ? 0.0 : p[i] / n;
    }
    if (backprop) {
      Matrix dx = d.net.backward(dz);
      if (dw) *dw = matmul_tn(e_t, dx);
    }
  }
  return loss;
}

/// mean −log D(e_T·W); with `dw`, the gradient w.r.t. W (the discriminator's
/// own gradient buffers are touched but never applied).
inline double generator_loss(Discriminator& d, const Matrix& e_t, const Matrix& w, bool train = true,
                             Matrix* dw = nullptr) {
  require(e_t.rows() > 0, "generator loss needs a non-empty batch");
  require(e_t.cols() == w.rows() && w.cols() == d.dim, "generator loss: dimension mismatch");
  auto [p, clamped] = detail::discriminate(d, matmul(e_t, w), train);
  const double n = static_cast<double>(p.size());
  double loss = 0.0;
  Matrix dz(p.size(), 1);
  for (std::size_t i = 0; i < p.size(); ++i) {
    loss -= std::log(p[i]) / n;
    dz(i, 0) = clamped[i] ? 0.0 : -(1.0 - p[i]) / n;
  }
  if (dw) *dw = matmul_tn(e_t, d.net.backward(dz));
  return loss;
}

/// Fraction of rows the discriminator labels correctly (source ≥ 0.5, mapped target < 0.5).
inline double discriminator_accuracy(Discriminator& d, const Matrix& e_s, const Matrix& e_t, const Matrix& w) {
  auto [ps, cs] = detail::discriminate(d, e_s, false);
  auto [pt, ct] = detail::discriminate(d, matmul(e_t, w), false);
  double correct = 0.0;
  for (double p : ps) correct += p >= 0.5 ? 1.0 : 0.0;
  for (double p : pt) correct += p < 0.5 ? 1.0 : 0.0;
  return correct / static_cast<double>(ps.size() + pt.size());
}

/// Jensen-Shannon divergence in nats; 0·log(0/x) counts as 0.
inline double jsd(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size() && !p.empty(), "jsd: distributions must have the same non-empty support");
  auto check = [](std::span<const double> d, const char* name) {
    double s = 0.0;
    for (double v : d) {
      require(std::isfinite(v) && v >= 0.0, "jsd: ", name, " has a negative or non-finite entry");
      s += v;
    }
    require(std::abs(s - 1.0) <= 1e-9, "jsd: ", name, " sums to ", s, ", not 1");
  };
  check(p, "P");
  check(q, "Q");
  double out = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    const double a = p[i] > 0.0 ? p[i] * std::log(p[i] / m) : 0.0;
    const double b = q[i] > 0.0 ? q[i] * std::log(q[i] / m) : 0.0;
    out += 0.5 * (a + b);  // a + b == b + a, so swapping P and Q is exact
  }
  return std::clamp(out, 0.0, std::log(2.0));
}

// ---------------------------------------------------------------------------
// Mapping refinement

struct RefineConfig {
  double alpha = 0.1;            // weight of the generator loss
  int d_steps_per_w_step = 5;
  int max_epochs = 100;
  int patience = 20;
  nn::OptimizerConfig optimizer;  // shared by W and the discriminator
  bool tune_head = false;         // also fine-tune the backbone's output layer
  bool keep_trajectory = false;   // record W after every epoch
  std::uint64_t seed = 1;

  void validate() const {
    optimizer.validate();
    require(alpha >= 0.0, "alpha must be >= 0");
    require(d_steps_per_w_step >= 0, "d_steps_per_w_step must be >= 0");
    require(max_epochs >= 0, "max_epochs must be >= 0");
    require(patience >= 1, "patience must be >= 1");
  }
};

struct RefineLogRow {
  int epoch = 0;
  double loss_d = 0.0;    // mean discriminator loss over the epoch
  double loss_g = 0.0;    // mean generator loss
  double loss_cls = 0.0;  // mean classification loss
  double loss_w = 0.0;    // mean L_cls + α·L_G
  double valid = 0.0;     // monitored validation metric after the epoch
  double jsd_estimate = 0.0;  // ln 2 − L_D/2, the divergence implied by the discriminator loss
};

struct RefineResult {
  Matrix w;
  int best_epoch = 0;
  double best_valid = 0.0;
  std::vector<RefineLogRow> log;
  std::vector<Matrix> head;  // tuned head parameters (empty unless tune_head)
  std::vector<Matrix> trajectory;  // W0, then W after each epoch (keep_trajectory only)
};

namespace detail {

inline Matrix sample_rows(const Matrix& e, std::size_t n, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, e.rows() - 1);
  Matrix out(n, e.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = pick(rng);
    std::copy(e.row(r).begin(), e.row(r).end(), out.row(i).begin());
  }
  return out;
}

}  // namespace detail

/// Teacher-student refinement of W. Per task batch: d_steps_per_w_step
/// discriminator updates on fresh embedding batches, then one update of W on
/// L_cls + α·L_G. The backbone stays frozen (apart from its head when
/// tune_head is set). Early-stops on the validation metric and returns the
/// best W, with W0 itself as the epoch-0 candidate.
inline RefineResult refine_mapping(const Matrix& w0, const Matrix& e_t, const Matrix& e_s, Backbone backbone,
                                   const Corpus& labeled, const Corpus& valid, const RefineConfig& cfg,
                                   std::ostream* warnings = &std::cerr) {
  cfg.validate();
  require(w0.rows() == e_t.cols() && w0.cols() == e_s.cols(), "W0 is ", w0.rows(), "x", w0.cols(),
          " but embeddings have dimensions ", e_t.cols(), " and ", e_s.cols());
  require(w0.all_finite(), "W0 has non-finite entries");
  require(backbone.dim == e_s.cols(), "backbone dimension does not match the source embeddings");
  require(!valid.patients.empty(), "refinement needs a validation split");
  const bool has_labels = !labeled.patients.empty();
  if (!has_labels && warnings)
    *warnings << "warning: no labeled target patients; refinement is adversarial only\n";

  const std::string metric = monitored_metric(backbone.task);
  const std::size_t bs = cfg.optimizer.batch_size;
  nn::Param w(w0);
  Discriminator disc = make_discriminator(e_s.cols(), stream_seed(cfg.seed, "refine.discriminator"));
  auto head = head_params(backbone);
  auto score = [&]() { return task_metric(predict(backbone, valid, matmul(e_t, w.value)), metric); };

  RefineResult out;
  out.w = w.value;
  out.best_valid = score();
  if (cfg.tune_head)
    for (auto* p : head) out.head.push_back(p->value);
  out.log.push_back({0, 0, 0, 0, 0, out.best_valid, 0});
  if (cfg.keep_trajectory) out.trajectory.push_back(w.value);

  Rng task_rng(stream_seed(cfg.seed, "refine.task"));
  Rng adv_rng(stream_seed(cfg.seed, "refine.adversary"));
  auto order = detail::patient_pointers(labeled);
  // without labels an epoch is as many adversarial rounds as a 100-patient budget would give
  const std::size_t rounds = has_labels ? (order.size() + bs - 1) / bs : (100 + bs - 1) / bs;
  int since_best = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), task_rng);
    RefineLogRow row{epoch, 0, 0, 0, 0, 0, 0};
    std::size_t d_count = 0;
    for (std::size_t r = 0; r < rounds; ++r) {
      for (int k = 0; k < cfg.d_steps_per_w_step; ++k) {
        const Matrix bs_src = detail::sample_rows(e_s, bs, adv_rng);
        const Matrix bs_tgt = detail::sample_rows(e_t, bs, adv_rng);
        disc.net.zero_grad();
        row.loss_d += discriminator_loss(disc, bs_src, bs_tgt, w.value, true, true);
        nn::rmsprop_step(disc.net.params(), cfg.optimizer);
        ++d_count;
      }
      w.zero_grad();
      const Matrix gen_batch = detail::sample_rows(e_t, bs, adv_rng);
      Matrix dw_g;
      const double lg = generator_loss(disc, gen_batch, w.value, true, &dw_g);
      double lc = 0.0;
      if (has_labels) {
        const std::size_t start = r * bs, end = std::min(order.size(), start + bs);
        std::span<const Patient* const> batch(order.data() + start, end - start);
        backbone.net.zero_grad();
        const Matrix x = matmul(e_t, w.value);
        auto g = batch_task_loss(backbone, batch, x, false, true);
        lc = g.loss;
        w.grad = mapping_gradient(batch, g, e_t);
      }
      if (cfg.alpha != 0.0) w.grad += dw_g * cfg.alpha;
      std::vector<nn::Param*> step{&w};
      if (cfg.tune_head && has_labels) step.insert(step.end(), head.begin(), head.end());
      nn::rmsprop_step(step, cfg.optimizer);
      row.loss_g += lg;
      row.loss_cls += lc;
      row.loss_w += lc + cfg.alpha * lg;
    }
    const double n = static_cast<double>(rounds);
    row.loss_d = d_count ? row.loss_d / static_cast<double>(d_count) : 0.0;
    row.loss_g /= n;
    row.loss_cls /= n;
    row.loss_w /= n;
    row.jsd_estimate = d_count ? std::log(2.0) - 0.5 * row.loss_d : 0.0;
    row.valid = score();
    out.log.push_back(row);
    if (cfg.keep_trajectory) out.trajectory.push_back(w.value);
    if (row.valid > out.best_valid) {
      out.best_valid = row.valid;
      out.best_epoch = epoch;
      out.w = w.value;
      if (cfg.tune_head) {
        out.head.clear();
        for (auto* p : head) out.head.push_back(p->value);
      }
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  return out;
}

/// Pure task fine-tuning of W (no adversary); reference trajectory for α = 0.
inline RefineResult finetune_mapping(const Matrix& w0, const Matrix& e_t, Backbone backbone, const Corpus& labeled,
                                     const Corpus& valid, const RefineConfig& cfg) {
  cfg.validate();
  require(!labeled.patients.empty(), "task fine-tuning needs labeled patients");
  const std::string metric = monitored_metric(backbone.task);
  const std::size_t bs = cfg.optimizer.batch_size;
  nn::Param w(w0);
  auto head = head_params(backbone);
  auto score = [&]() { return task_metric(predict(backbone, valid, matmul(e_t, w.value)), metric); };
  RefineResult out;
  out.w = w.value;
  out.best_valid = score();
  out.log.push_back({0, 0, 0, 0, 0, out.best_valid, 0});
  Rng task_rng(stream_seed(cfg.seed, "refine.task"));
  auto order = detail::patient_pointers(labeled);
  const std::size_t rounds = (order.size() + bs - 1) / bs;
  int since_best = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), task_rng);
    RefineLogRow row{epoch, 0, 0, 0, 0, 0, 0};
    for (std::size_t r = 0; r < rounds; ++r) {
      const std::size_t start = r * bs, end = std::min(order.size(), start + bs);
      std::span<const Patient* const> batch(order.data() + start, end - start);
      w.zero_grad();
      backbone.net.zero_grad();
      auto g = batch_task_loss(backbone, batch, matmul(e_t, w.value), false, true);
      w.grad = mapping_gradient(batch, g, e_t);
      std::vector<nn::Param*> step{&w};
      if (cfg.tune_head) step.insert(step.end(), head.begin(), head.end());
      nn::rmsprop_step(step, cfg.optimizer);
      row.loss_cls += g.loss;
    }
    row.loss_cls /= static_cast<double>(rounds);
    row.loss_w = row.loss_cls;
    row.valid = score();
    out.log.push_back(row);
    if (row.valid > out.best_valid) {
      out.best_valid = row.valid;
      out.best_epoch = epoch;
      out.w = w.value;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  return out;
}

/// Divergence between mapped target and source embeddings as seen by a fresh
/// discriminator trained to convergence on the frozen W: ln 2 − L_D/2 on
/// held-out samples, floored at 0.
inline double estimate_jsd(const Matrix& e_t, const Matrix& e_s, const Matrix& w, std::uint64_t seed,
                           int steps = 300, std::size_t batch = 32, double learning_rate = 1e-3) {
  require(steps >= 1 && batch >= 1, "estimate_jsd needs positive steps and batch size");
  Discriminator d = make_discriminator(e_s.cols(), stream_seed(seed, "jsd.discriminator"), 64, 0.0);
  nn::OptimizerConfig opt;
  opt.learning_rate = learning_rate;
  Rng rng(stream_seed(seed, "jsd.samples"));
  for (int s = 0; s < steps; ++s) {
    const Matrix src = detail::sample_rows(e_s, batch, rng);
    const Matrix tgt = detail::sample_rows(e_t, batch, rng);
    d.net.zero_grad();
    discriminator_loss(d, src, tgt, w, true, true);
    nn::rmsprop_step(d.net.params(), opt);
  }
  const std::size_t held_out = 8 * batch;
  const double l = discriminator_loss(d, detail::sample_rows(e_s, held_out, rng), detail::sample_rows(e_t, held_out, rng),
                                      w, false);
  return std::max(0.0, std::log(2.0) - 0.5 * l);
}

inline void save_refine_log(const std::vector<RefineLogRow>& log, const std::string& path) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot open ", path, " for writing");
  os << "epoch,L_D,L_G,L_cls,L_W,val_metric,jsd_estimate\n" << std::setprecision(17);
  for (const auto& r : log)
    os << r.epoch << ',' << r.loss_d << ',' << r.loss_g << ',' << r.loss_cls << ',' << r.loss_w << ','
       << r.valid << ',' << r.jsd_estimate << '\n';
}

inline std::vector<RefineLogRow> load_refine_log(const std::string& path) {
  const auto t = read_csv(path);
  std::vector<RefineLogRow> out;
  for (const auto& row : t.rows) {
    auto f = [&](const char* c) { return parse_double(row[t.column(c)], c); };
    out.push_back({static_cast<int>(f("epoch")), f("L_D"), f("L_G"), f("L_cls"), f("L_W"), f("val_metric"),
                   f("jsd_estimate")});
  }
  return out;
}

/// A uniformly random orthogonal matrix (QR of a Gaussian matrix via SVD polar factor).
inline Matrix random_orthogonal(std::size_t d, std::uint64_t seed) {
  Rng rng(stream_seed(seed, "random-orthogonal"));
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix g(d, d);
  for (double& v : g.data()) v = n01(rng);
  auto s = svd(g);
  return matmul_nt(s.u, s.v);
}

}  // namespace automap
