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

// Pipeline configuration: every knob is a "section.key" entry that can come
// from defaults, a `key = value` file with [section] headers, or a flag.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "automap/benchmark.hpp"

namespace automap {

inline constexpr const char* kConfigEnv = "AUTOMAP_CONFIG";

/// Default file names of every artifact, relative to the work directory.
inline const std::map<std::string, std::string>& default_artifacts() {
  static const std::map<std::string, std::string> m = {
      {"source_corpus", "source.jsonl"},
      {"target_corpus", "target.jsonl"},
      {"source_ontology", "source_ontology.tsv"},
      {"target_ontology", "target_ontology.tsv"},
      {"truth", "truth.tsv"},
      {"source_embedding", "source_embedding.txt"},
      {"target_embedding", "target_embedding.txt"},
      {"mapping_step1", "mapping_step1.txt"},
      {"anchors", "anchors.tsv"},
      {"align_report", "align_report.csv"},
      {"backbone", "backbone.net"},
      {"mapping", "mapping.txt"},
      {"refine_log", "refine_log.csv"},
      {"mapping_report", "mapping_report.csv"},
      {"mapping_pairs", "mapping_pairs.csv"},
      {"task_report", "task_report.csv"},
      {"benchmark", "benchmark.csv"},
  };
  return m;
}

struct PipelineConfig {
  std::uint64_t seed = 1;
  std::string workdir = "automap-out";
  Task task = Task::Mortality;
  BackboneKind backbone = BackboneKind::Mlp;
  std::size_t label_budget = 100;
  std::array<double, 3> split = {0.7, 0.15, 0.15};
  int n_bootstrap = 1000;
  bool skip_step2 = false;       // black-box backbone: ship the step-1 mapping
  bool random_ontology = false;  // ablation: shuffle both ontologies before aligning
  GeneratorConfig generator;
  GloveConfig glove;
  AlignConfig align;
  TrainConfig train;
  RefineConfig refine;
  std::vector<std::uint64_t> benchmark_seeds = {1, 2, 3};
  std::vector<Task> benchmark_tasks = {Task::Mortality, Task::LengthOfStay};
  std::map<std::string, std::string> paths;  // explicit artifact paths

  PipelineConfig() { glove.d = 32; }

  /// Explicit path if configured, else the default name inside the work directory.
  std::string path(const std::string& artifact) const {
    auto it = paths.find(artifact);
    if (it != paths.end() && !it->second.empty()) return it->second;
    auto d = default_artifacts().find(artifact);
    require(d != default_artifacts().end(), "unknown artifact '", artifact, "'");
    return (std::filesystem::path(workdir) / d->second).string();
  }

  void validate() const {
    generator.validate();
    glove.validate();
    align.validate();
    train.validate();
    refine.validate();
    require(label_budget >= 1, "run.label_budget must be >= 1");
    require(split[0] > 0 && split[1] > 0 && split[2] > 0 && std::abs(split[0] + split[1] + split[2] - 1.0) < 1e-9,
            "split ratios must be positive and sum to 1");
    require(n_bootstrap >= 0, "run.n_bootstrap must be >= 0");
    require(!benchmark_seeds.empty(), "benchmark.seeds is empty");
    require(!benchmark_tasks.empty(), "benchmark.tasks is empty");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  fail("invalid boolean '", s, "'");
}

template <typename T>
T parse_integer(const std::string& s) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    fail("invalid integer '", s, "'");
  }
  require(used == s.size(), "invalid integer '", s, "'");
  if constexpr (std::is_unsigned_v<T>) require(v >= 0, "expected a non-negative integer, got '", s, "'");
  return static_cast<T>(v);
}

// shortest text that reads back to the same double
inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

template <typename T, typename F>
std::string join(const std::vector<T>& v, F f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

}  // namespace detail

struct ConfigKey {
  std::string name;  // "section.key"
  std::string help;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

/// Every configurable key, bound to the fields of `c`.
inline std::vector<ConfigKey> config_keys(PipelineConfig& c) {
  std::vector<ConfigKey> keys;
  auto num = [&](std::string name, std::string help, double& field) {
    keys.push_back({std::move(name), std::move(help), [&field](const std::string& s) { field = parse_double(s); },
                    [&field] { return detail::format_double(field); }});
  };
  auto integer = [&](std::string name, std::string help, auto& field) {
    using T = std::remove_reference_t<decltype(field)>;
    keys.push_back({std::move(name), std::move(help),
                    [&field](const std::string& s) { field = detail::parse_integer<T>(s); },
                    [&field] { return std::to_string(field); }});
  };
  auto flag = [&](std::string name, std::string help, bool& field) {
    keys.push_back({std::move(name), std::move(help), [&field](const std::string& s) { field = detail::parse_bool(s); },
                    [&field] { return std::string(field ? "true" : "false"); }});
  };
  auto text = [&](std::string name, std::string help, std::string& field) {
    keys.push_back({std::move(name), std::move(help), [&field](const std::string& s) { field = s; },
                    [&field] { return field; }});
  };

  integer("run.seed", "global seed; every stage derives a named substream", c.seed);
  text("run.workdir", "directory holding every artifact", c.workdir);
  keys.push_back({"run.task", "mortality | los", [&c](const std::string& s) { c.task = parse_task(s); },
                  [&c] { return task_name(c.task); }});
  keys.push_back({"run.backbone", "mlp | rnn", [&c](const std::string& s) { c.backbone = parse_backbone(s); },
                  [&c] { return backbone_name(c.backbone); }});
  integer("run.label_budget", "labeled target patients available for refinement", c.label_budget);
  num("run.split_train", "train share of each corpus", c.split[0]);
  num("run.split_valid", "validation share", c.split[1]);
  num("run.split_test", "test share", c.split[2]);
  integer("run.n_bootstrap", "bootstrap replicates for task reports", c.n_bootstrap);
  flag("run.skip_step2", "skip code-level refinement (black-box backbone)", c.skip_step2);
  flag("run.random_ontology", "ablation: align with shuffled ontologies", c.random_ontology);

  auto& g = c.generator;
  integer("generator.depth", "concept tree depth", g.concept_tree_depth);
  integer("generator.branching", "children per concept node", g.branching);
  integer("generator.split_max", "maximum target codes per concept", g.split_max);
  integer("generator.n_patients", "patients per corpus", g.n_patients);
  num("generator.visits_mean", "mean visits per patient", g.visits_mean);
  num("generator.codes_per_visit_mean", "mean codes per visit", g.codes_per_visit_mean);
  num("generator.topic_concentration", "Dirichlet concentration of patient topic mixtures", g.topic_concentration);
  num("generator.risk_concept_fraction", "fraction of concepts carrying mortality risk", g.risk_concept_fraction);
  num("generator.noise", "probability a code is drawn uniformly at random", g.noise);
  num("generator.mortality_rate", "approximate mortality prevalence", g.mortality_rate);
  num("generator.split_concentration", "Dirichlet concentration of target split usage", g.split_concentration);
  num("generator.prevalence_skew", "Zipf exponent of topic prevalence", g.prevalence_skew);
  num("generator.comorbidity_mass", "share of a fine topic spent on other categories", g.comorbidity_mass);
  num("generator.comorbidity_concentration", "sparsity of comorbidity links", g.comorbidity_concentration);

  integer("glove.d", "embedding dimension", c.glove.d);
  integer("glove.epochs", "GloVe epochs", c.glove.epochs);
  num("glove.learning_rate", "AdaGrad learning rate", c.glove.learning_rate);
  num("glove.x_max", "weighting cutoff", c.glove.x_max);
  num("glove.alpha", "weighting exponent", c.glove.alpha);

  auto& a = c.align;
  keys.push_back({"align.grouping", "ontology | kmeans",
                  [&a](const std::string& s) {
                    if (s == "ontology") a.grouping = Grouping::Ontology;
                    else if (s == "kmeans") a.grouping = Grouping::KMeans;
                    else fail("unknown grouping '", s, "' (expected ontology or kmeans)");
                  },
                  [&a] { return std::string(a.grouping == Grouping::Ontology ? "ontology" : "kmeans"); }});
  integer("align.k", "groups kept per level", a.k);
  integer("align.max_level", "deepest category level aligned (0: all)", a.max_level);
  integer("align.first_level", "coarsest level aligned", a.first_level);
  integer("align.procrustes_iters", "Procrustes rounds per level", a.procrustes_iters);
  integer("align.kmeans_levels", "levels when grouping by k-means", a.kmeans_levels);
  keys.push_back({"align.kmeans_k", "comma-separated clusters per k-means level (empty: automatic)",
                  [&a](const std::string& s) {
                    a.kmeans_k.clear();
                    if (!s.empty())
                      for (const auto& f : split_fields(s)) a.kmeans_k.push_back(detail::parse_integer<std::size_t>(f));
                  },
                  [&a] { return detail::join(a.kmeans_k, [](std::size_t v) { return std::to_string(v); }); }});
  integer("align.kmeans_restarts", "Lloyd runs per clustering", a.kmeans_restarts);
  integer("align.kmeans_draws", "clusterings offered per level", a.kmeans_draws);
  integer("align.leaf_k", "codes in the leaf pass (0: all)", a.leaf_k);
  flag("align.leaf_pass", "finish with a code-level pass", a.leaf_pass);
  flag("align.code_level_only", "skip category levels", a.code_level_only);
  flag("align.center", "mean-center embeddings", a.center);
  integer("align.polish_restarts", "random restarts when polishing seed matchings", a.polish_restarts);
  integer("align.beam", "candidate matchings carried per level", a.beam);

  auto optimizer = [&](const std::string& sec, nn::OptimizerConfig& o) {
    num(sec + ".learning_rate", "RMSprop learning rate", o.learning_rate);
    num(sec + ".decay", "RMSprop decay", o.decay);
    num(sec + ".epsilon", "RMSprop epsilon", o.epsilon);
    integer(sec + ".batch_size", "mini-batch size", o.batch_size);
  };
  optimizer("train", c.train.optimizer);
  integer("train.max_epochs", "backbone training epochs", c.train.max_epochs);
  integer("train.patience", "early-stopping patience", c.train.patience);
  optimizer("refine", c.refine.optimizer);
  num("refine.alpha", "weight of the generator loss", c.refine.alpha);
  integer("refine.d_steps_per_w_step", "discriminator updates per mapping update", c.refine.d_steps_per_w_step);
  integer("refine.max_epochs", "refinement epochs", c.refine.max_epochs);
  integer("refine.patience", "early-stopping patience", c.refine.patience);
  flag("refine.tune_head", "also fine-tune the backbone output layer", c.refine.tune_head);

  keys.push_back({"benchmark.seeds", "comma-separated seeds",
                  [&c](const std::string& s) {
                    c.benchmark_seeds.clear();
                    for (const auto& f : split_fields(s)) c.benchmark_seeds.push_back(detail::parse_integer<std::uint64_t>(f));
                  },
                  [&c] { return detail::join(c.benchmark_seeds, [](std::uint64_t v) { return std::to_string(v); }); }});
  keys.push_back({"benchmark.tasks", "comma-separated tasks",
                  [&c](const std::string& s) {
                    c.benchmark_tasks.clear();
                    for (const auto& f : split_fields(s)) c.benchmark_tasks.push_back(parse_task(f));
                  },
                  [&c] { return detail::join(c.benchmark_tasks, [](Task t) { return task_name(t); }); }});

  for (const auto& [name, file] : default_artifacts()) {
    keys.push_back({"paths." + name, "artifact path (default <workdir>/" + file + ")",
                    [&c, name](const std::string& s) { c.paths[name] = s; },
                    [&c, name] {
                      auto it = c.paths.find(name);
                      return it == c.paths.end() ? std::string() : it->second;
                    }});
  }
  return keys;
}

inline void set_config_value(PipelineConfig& c, const std::string& key, const std::string& value) {
  for (auto& k : config_keys(c))
    if (k.name == key) {
      try {
        k.set(value);
      } catch (const Error& e) {
        fail(key, ": ", e.what());
      }
      return;
    }
  fail("unknown configuration key '", key, "'");
}

/// Applies a `key = value` file with optional [section] headers on top of `c`.
/// '#' and ';' start comments.
inline void load_config_file(PipelineConfig& c, const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot open config file ", path);
  std::string line, section;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      require(line.back() == ']', path, ":", n, ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    require(eq != std::string::npos, path, ":", n, ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    require(!key.empty(), path, ":", n, ": empty key");
    try {
      set_config_value(c, section.empty() || key.find('.') != std::string::npos ? key : section + "." + key, value);
    } catch (const Error& e) {
      fail(path, ":", n, ": ", e.what());
    }
  }
}

/// The full configuration as a loadable file.
inline std::string dump_config(PipelineConfig c) {
  std::ostringstream os;
  std::string section;
  for (const auto& k : config_keys(c)) {
    const auto dot = k.name.find('.');
    const std::string sec = k.name.substr(0, dot);
    if (sec != section) {
      os << (section.empty() ? "" : "\n") << '[' << sec << "]\n";
      section = sec;
    }
    os << k.name.substr(dot + 1) << " = " << k.get() << '\n';
  }
  return os.str();
}

inline BenchmarkConfig benchmark_config(const PipelineConfig& c) {
  BenchmarkConfig b;
  b.generator = c.generator;
  b.glove = c.glove;
  b.align = c.align;
  b.refine = c.refine;
  b.train = c.train;
  b.backbone = c.backbone;
  b.tasks = c.benchmark_tasks;
  b.seeds = c.benchmark_seeds;
  b.label_budget = c.label_budget;
  b.split = c.split;
  b.n_bootstrap = c.n_bootstrap;
  return b;
}

}  // namespace automap
