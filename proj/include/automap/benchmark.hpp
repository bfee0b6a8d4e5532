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

// Desk-scale comparison of the mapping pipeline against its ablations and the
// label-hungry baselines, on the synthetic benchmark.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "automap/align.hpp"
#include "automap/embedding.hpp"
#include "automap/generator.hpp"
#include "automap/metrics.hpp"
#include "automap/refine.hpp"

namespace automap {

inline const std::vector<std::string>& benchmark_methods() {
  static const std::vector<std::string> m = {
      "full_label", "direct",      "transfer",   "code_level_only", "step2_only",
      "step1_only", "step1_random_ontology", "full_pipeline"};
  return m;
}

struct BenchmarkConfig {
  GeneratorConfig generator;
  GloveConfig glove;
  AlignConfig align;
  RefineConfig refine;
  TrainConfig train;
  BackboneKind backbone = BackboneKind::Mlp;
  std::vector<Task> tasks = {Task::Mortality, Task::LengthOfStay};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::size_t label_budget = 100;
  std::array<double, 3> split = {0.7, 0.15, 0.15};
  int n_bootstrap = 1000;

  BenchmarkConfig() { glove.d = 32; }

  void validate() const {
    generator.validate();
    glove.validate();
    align.validate();
    refine.validate();
    train.validate();
    require(!tasks.empty(), "benchmark needs at least one task");
    require(!seeds.empty(), "benchmark needs at least one seed");
    require(label_budget >= 1, "label budget must be >= 1");
    require(split[0] > 0 && split[1] > 0 && split[2] > 0 && std::abs(split[0] + split[1] + split[2] - 1.0) < 1e-9,
            "split ratios must be positive and sum to 1");
    require(n_bootstrap >= 0, "n_bootstrap must be >= 0");
  }
};

struct MethodScore {
  std::string method;
  Task task = Task::Mortality;
  std::string metric;
  double value = 0.0;  // point estimate on the target test split
  double std = 0.0;    // bootstrap standard deviation
};

/// Everything measured for one seed.
struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<MethodScore> scores;
  // leaf-level hit@10 of the step-1 style mappings
  double step1_hit10 = 0.0, random_ontology_hit10 = 0.0, code_level_hit10 = 0.0, kmeans_hit10 = 0.0;
  double random_baseline_hit10 = 0.0;  // 10 / |C_S|
  double max_orthogonality_error = 0.0;  // max ‖WᵀW − I‖_F over the step-1 mappings

  double value(const std::string& method, Task task, const std::string& metric) const {
    for (const auto& s : scores)
      if (s.method == method && s.task == task && s.metric == metric) return s.value;
    fail("no score for ", method, "/", task_name(task), "/", metric);
  }
};

struct BenchmarkRow {
  std::string method;
  Task task = Task::Mortality;
  std::string metric;
  double mean = 0.0;  // over seeds
  double std = 0.0;   // mean bootstrap std over seeds
  std::size_t seed_count = 0;
};

struct BenchmarkResult {
  std::vector<SeedRun> runs;
  std::vector<BenchmarkRow> table;

  double mean(const std::string& method, Task task, const std::string& metric) const {
    for (const auto& r : table)
      if (r.method == method && r.task == task && r.metric == metric) return r.mean;
    fail("no benchmark row for ", method, "/", task_name(task), "/", metric);
  }
};

/// One seed of the benchmark: generate, embed, align three ways, then train and
/// score every method on every task.
inline SeedRun run_benchmark_seed(const BenchmarkConfig& cfg, std::uint64_t seed, std::ostream* progress = nullptr) {
  auto note = [&](const std::string& s) {
    if (progress) *progress << "[seed " << seed << "] " << s << '\n' << std::flush;
  };
  SeedRun run;
  run.seed = seed;

  GeneratorConfig gc = cfg.generator;
  gc.seed = stream_seed(seed, "benchmark.generator");
  const auto bm = generate_synthetic(gc);
  GloveConfig glove = cfg.glove;
  glove.seed = stream_seed(seed, "benchmark.glove");
  const auto raw_s = train_glove(build_cooccurrence(bm.source), bm.source.vocabulary, glove);
  const auto raw_t = train_glove(build_cooccurrence(bm.target), bm.target.vocabulary, glove);
  note("embeddings trained");

  AlignConfig ac = cfg.align;
  ac.seed = stream_seed(seed, "benchmark.align");
  const Matrix w1 = ontology_align(raw_t, raw_s, &bm.target_ontology, &bm.source_ontology, ac).w;
  const Ontology ro_t = randomize_ontology(bm.target_ontology, stream_seed(seed, "benchmark.random-ontology.target"));
  const Ontology ro_s = randomize_ontology(bm.source_ontology, stream_seed(seed, "benchmark.random-ontology.source"));
  const Matrix w_ro = ontology_align(raw_t, raw_s, &ro_t, &ro_s, ac).w;
  AlignConfig code_only = ac;
  code_only.code_level_only = true;
  const Matrix w_code = ontology_align(raw_t, raw_s, nullptr, nullptr, code_only).w;
  AlignConfig kmeans = ac;
  kmeans.grouping = Grouping::KMeans;
  const Matrix w_km = ontology_align(raw_t, raw_s, nullptr, nullptr, kmeans).w;
  // models consume the space the mappings were fitted in
  const auto e_s = prepare_embedding(raw_s, ac.center);
  const auto e_t = prepare_embedding(raw_t, ac.center);
  const Matrix w_rand = random_orthogonal(e_t.dim(), stream_seed(seed, "benchmark.step2-init"));
  run.step1_hit10 = hit_at_k(w1, e_t, e_s, bm.truth, 10);
  run.random_ontology_hit10 = hit_at_k(w_ro, e_t, e_s, bm.truth, 10);
  run.code_level_hit10 = hit_at_k(w_code, e_t, e_s, bm.truth, 10);
  run.kmeans_hit10 = hit_at_k(w_km, e_t, e_s, bm.truth, 10);
  run.random_baseline_hit10 = 10.0 / static_cast<double>(e_s.size());
  for (const auto* w : {&w1, &w_ro, &w_code, &w_km})
    run.max_orthogonality_error = std::max(run.max_orthogonality_error, orthogonality_error(*w));
  note("mappings aligned (hit@10 " + std::to_string(run.step1_hit10) + ")");

  const auto src = split_corpus(bm.source, cfg.split, stream_seed(seed, "benchmark.split.source"));
  const auto tgt = split_corpus(bm.target, cfg.split, stream_seed(seed, "benchmark.split.target"));
  const Corpus labeled = head(tgt.train, cfg.label_budget);

  for (Task task : cfg.tasks) {
    const std::string tname = task_name(task);
    auto score = [&](const std::string& method, Backbone& b, const Matrix& x) {
      auto rep = evaluate_predictions(predict(b, tgt.test, x), task, cfg.n_bootstrap,
                                      stream_seed(seed, "benchmark.bootstrap." + method + "." + tname));
      for (const auto& m : rep.metrics) run.scores.push_back({method, task, m.name, m.value, m.std});
    };
    TrainConfig tc = cfg.train;
    tc.seed = stream_seed(seed, "benchmark.train.source." + tname);
    auto source_model = train_backbone(make_backbone(cfg.backbone, task, e_s.dim(), tc.seed), e_s.rows,
                                       src.train, src.valid, tc, false);
    note(tname + ": source backbone trained");

    tc.seed = stream_seed(seed, "benchmark.train.full-label." + tname);
    auto full = train_backbone_direct(tgt.train, tgt.valid, e_t.rows, cfg.backbone, task, tc);
    score("full_label", full.backbone, full.embeddings);
    tc.seed = stream_seed(seed, "benchmark.train.direct." + tname);
    auto direct = train_backbone_direct(labeled, tgt.valid, e_t.rows, cfg.backbone, task, tc);
    score("direct", direct.backbone, direct.embeddings);
    tc.seed = stream_seed(seed, "benchmark.train.transfer." + tname);
    auto transfer = transfer_learning(source_model.backbone, e_t.rows, labeled, tgt.valid, tc);
    score("transfer", transfer.backbone, transfer.embeddings);
    note(tname + ": baselines trained");

    Backbone frozen = source_model.backbone;
    score("code_level_only", frozen, matmul(e_t.rows, w_code));
    score("step1_only", frozen, matmul(e_t.rows, w1));
    score("step1_random_ontology", frozen, matmul(e_t.rows, w_ro));

    RefineConfig rc = cfg.refine;
    rc.seed = stream_seed(seed, "benchmark.refine.step2-only." + tname);
    auto step2 = refine_mapping(w_rand, e_t.rows, e_s.rows, source_model.backbone, labeled, tgt.valid, rc, nullptr);
    score("step2_only", frozen, matmul(e_t.rows, step2.w));
    rc.seed = stream_seed(seed, "benchmark.refine.full." + tname);
    auto refined = refine_mapping(w1, e_t.rows, e_s.rows, source_model.backbone, labeled, tgt.valid, rc, nullptr);
    if (rc.tune_head) {
      auto head = head_params(frozen);
      for (std::size_t i = 0; i < head.size(); ++i) head[i]->value = refined.head[i];
    }
    score("full_pipeline", frozen, matmul(e_t.rows, refined.w));
    note(tname + ": refinement done");
  }
  return run;
}

/// Aggregates seeds: mean of the per-seed point estimates, mean of the
/// per-seed bootstrap standard deviations.
inline std::vector<BenchmarkRow> aggregate_runs(const std::vector<SeedRun>& runs) {
  std::vector<BenchmarkRow> out;
  if (runs.empty()) return out;
  for (const auto& s : runs.front().scores) {
    BenchmarkRow r{s.method, s.task, s.metric, 0.0, 0.0, runs.size()};
    for (const auto& run : runs) {
      r.mean += run.value(s.method, s.task, s.metric);
      for (const auto& t : run.scores)
        if (t.method == s.method && t.task == s.task && t.metric == s.metric) r.std += t.std;
    }
    r.mean /= static_cast<double>(runs.size());
    r.std /= static_cast<double>(runs.size());
    out.push_back(r);
  }
  return out;
}

inline BenchmarkResult run_benchmark(const BenchmarkConfig& cfg, std::ostream* progress = nullptr) {
  cfg.validate();
  BenchmarkResult out;
  for (auto seed : cfg.seeds) out.runs.push_back(run_benchmark_seed(cfg, seed, progress));
  out.table = aggregate_runs(out.runs);
  return out;
}

inline void write_benchmark_table(std::ostream& os, const std::vector<BenchmarkRow>& rows) {
  os << "method,task,metric,mean,std,seed_count\n" << std::setprecision(17);
  for (const auto& r : rows)
    os << r.method << ',' << task_name(r.task) << ',' << r.metric << ',' << r.mean << ',' << r.std << ','
       << r.seed_count << '\n';
}

inline std::vector<BenchmarkRow> load_benchmark_table(const std::string& path) {
  const auto t = read_csv(path);
  std::vector<BenchmarkRow> out;
  for (const auto& row : t.rows)
    out.push_back({row[t.column("method")], parse_task(row[t.column("task")]), row[t.column("metric")],
                   parse_double(row[t.column("mean")]), parse_double(row[t.column("std")]),
                   static_cast<std::size_t>(parse_double(row[t.column("seed_count")]))});
  return out;
}

inline void save_benchmark_table(const std::vector<BenchmarkRow>& rows, const std::string& path) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot open ", path, " for writing");
  write_benchmark_table(os, rows);
}

}  // namespace automap
