// automap: command-line driver for the mapping pipeline.
//
//   automap generate|embed|align|refine|evaluate|benchmark|pipeline [--config FILE] [--section.key VALUE ...]
//
// Exit status: 0 on success, 2 on a usage error, 1 when a stage fails. Errors are
// a single line on stderr ("error: usage: ..." or "error: stage=<name>: ...").

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "automap/config.hpp"

namespace fs = std::filesystem;
using namespace automap;

namespace {

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

EmbeddingMatrix load_prepared(const PipelineConfig& c, const std::string& artifact) {
  return prepare_embedding(load_embedding(c.path(artifact)), c.align.center);
}

struct Splits {
  CorpusSplit source, target;
};

Splits load_splits(const PipelineConfig& c, const Vocabulary& source_codes, const Vocabulary& target_codes) {
  const auto source = load_corpus(c.path("source_corpus"), Role::Source, source_codes);
  const auto target = load_corpus(c.path("target_corpus"), Role::Target, target_codes);
  return {split_corpus(source, c.split, stream_seed(c.seed, "split.source")),
          split_corpus(target, c.split, stream_seed(c.seed, "split.target"))};
}

void stage_generate(const PipelineConfig& c) {
  GeneratorConfig g = c.generator;
  g.seed = stream_seed(c.seed, "generate");
  const auto bm = generate_synthetic(g);
  for (const char* a : {"source_corpus", "target_corpus", "source_ontology", "target_ontology", "truth"})
    ensure_parent(c.path(a));
  save_corpus(bm.source, c.path("source_corpus"));
  save_corpus(bm.target, c.path("target_corpus"));
  save_ontology(bm.source_ontology, c.path("source_ontology"));
  save_ontology(bm.target_ontology, c.path("target_ontology"));
  save_truth(bm.truth, c.path("truth"));
  std::cout << "generate: " << bm.source.patients.size() << " source / " << bm.target.patients.size()
            << " target patients, " << bm.source.vocabulary.size() << " source / " << bm.target.vocabulary.size()
            << " target codes\n";
}

void stage_embed(const PipelineConfig& c) {
  for (const auto& [side, role] : {std::pair{std::string("source"), Role::Source}, {"target", Role::Target}}) {
    const auto corpus = load_corpus(c.path(side + "_corpus"), role);
    GloveConfig g = c.glove;
    g.seed = stream_seed(c.seed, "embed." + side);
    const auto r = train_glove_detailed(build_cooccurrence(corpus), corpus.vocabulary, g);
    ensure_parent(c.path(side + "_embedding"));
    save_embedding(r.embedding, c.path(side + "_embedding"));
    std::cout << "embed: " << side << " " << r.embedding.size() << " codes, loss " << r.loss_history.front()
              << " -> " << r.loss_history.back() << '\n';
  }
}

void stage_align(const PipelineConfig& c) {
  const auto es = load_embedding(c.path("source_embedding"));
  const auto et = load_embedding(c.path("target_embedding"));
  AlignConfig a = c.align;
  a.seed = stream_seed(c.seed, "align");
  std::optional<Ontology> ot, os;
  if (a.grouping == Grouping::Ontology && !a.code_level_only) {
    ot = load_ontology(c.path("target_ontology"));
    os = load_ontology(c.path("source_ontology"));
    if (c.random_ontology) {
      ot = randomize_ontology(*ot, stream_seed(c.seed, "align.random-ontology.target"));
      os = randomize_ontology(*os, stream_seed(c.seed, "align.random-ontology.source"));
    }
  }
  const auto r = ontology_align(et, es, ot ? &*ot : nullptr, os ? &*os : nullptr, a);
  ensure_parent(c.path("mapping_step1"));
  save_matrix(c.path("mapping_step1"), r.w);
  save_anchors(r.anchors, c.path("anchors"));
  std::cout << "align: " << r.levels.size() << " passes, fit " << r.score << ", orthogonality error "
            << orthogonality_error(r.w) << '\n';
  if (fs::exists(c.path("truth"))) {
    const auto ps = prepare_embedding(es, a.center), pt = prepare_embedding(et, a.center);
    const auto truth = load_truth(c.path("truth"), &pt.codes, &ps.codes);
    const auto rep = mapping_report(r.w, pt, ps, truth);
    save_mapping_report(rep, c.path("align_report"));
    std::cout << "align: hit@10 " << rep.hit_at_10 << ", similarity " << rep.similarity << '\n';
  }
}

void stage_refine(const PipelineConfig& c) {
  const auto es = load_prepared(c, "source_embedding");
  const auto et = load_prepared(c, "target_embedding");
  const Matrix w1 = load_matrix(c.path("mapping_step1"));
  const auto s = load_splits(c, es.codes, et.codes);

  TrainConfig t = c.train;
  t.seed = stream_seed(c.seed, "refine.backbone");
  auto source_model = train_backbone(make_backbone(c.backbone, c.task, es.dim(), t.seed), es.rows, s.source.train,
                                     s.source.valid, t, false);
  std::cout << "refine: source " << backbone_name(c.backbone) << " backbone, validation "
            << monitored_metric(c.task) << " " << source_model.best_valid << " at epoch " << source_model.best_epoch
            << '\n';

  RefineResult r;
  if (c.skip_step2) {
    r.w = w1;
    std::cout << "refine: step 2 skipped, shipping the step-1 mapping\n";
  } else {
    RefineConfig rc = c.refine;
    rc.seed = stream_seed(c.seed, "refine.mapping");
    r = refine_mapping(w1, et.rows, es.rows, source_model.backbone, head(s.target.train, c.label_budget),
                       s.target.valid, rc);
    if (rc.tune_head) {
      auto params = head_params(source_model.backbone);
      for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = r.head[i];
    }
    std::cout << "refine: best validation " << monitored_metric(c.task) << " " << r.best_valid << " at epoch "
              << r.best_epoch << " of " << r.log.back().epoch << '\n';
  }
  ensure_parent(c.path("mapping"));
  nn::save_network(source_model.backbone.net, c.path("backbone"));
  save_matrix(c.path("mapping"), r.w);
  save_refine_log(r.log, c.path("refine_log"));
}

void stage_evaluate(const PipelineConfig& c) {
  const auto es = load_prepared(c, "source_embedding");
  const auto et = load_prepared(c, "target_embedding");
  const Matrix w = load_matrix(c.path("mapping"));
  Backbone b{c.backbone, c.task, es.dim(), nn::load_network(c.path("backbone"))};
  const auto target = load_corpus(c.path("target_corpus"), Role::Target, et.codes);
  const auto test = split_corpus(target, c.split, stream_seed(c.seed, "split.target")).test;
  const auto rep = evaluate_predictions(predict(b, test, matmul(et.rows, w)), c.task, c.n_bootstrap,
                                        stream_seed(c.seed, "evaluate.bootstrap"));
  ensure_parent(c.path("task_report"));
  save_task_report(rep, c.path("task_report"));
  for (const auto& m : rep.metrics)
    std::cout << "evaluate: " << task_name(c.task) << " " << m.name << " " << m.value << " (bootstrap " << m.mean
              << " +- " << m.std << ")\n";
  if (fs::exists(c.path("truth"))) {
    const auto truth = load_truth(c.path("truth"), &et.codes, &es.codes);
    const auto mr = mapping_report(w, et, es, truth);
    save_mapping_report(mr, c.path("mapping_report"), c.path("mapping_pairs"));
    std::cout << "evaluate: hit@10 " << mr.hit_at_10 << ", similarity " << mr.similarity << '\n';
  }
}

void stage_benchmark(const PipelineConfig& c) {
  const auto r = run_benchmark(benchmark_config(c), &std::cerr);
  ensure_parent(c.path("benchmark"));
  save_benchmark_table(r.table, c.path("benchmark"));
  write_benchmark_table(std::cout, r.table);
}

using Stage = void (*)(const PipelineConfig&);

int run_stage(const std::string& name, Stage stage, const PipelineConfig& c) {
  try {
    stage(c);
  } catch (const std::exception& e) {
    std::cerr << "error: stage=" << name << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised mapping of a target coding system onto a source model's codes.", "automap"};
  app.set_version_flag("--version", std::string("automap ") + kVersion);
  app.require_subcommand(0, 1);
  app.fallthrough();

  std::string config_path;
  bool dump = false;
  app.add_option("--config", config_path, std::string("configuration file (default: $") + kConfigEnv + ")");
  app.add_flag("--dump-config", dump, "print the effective configuration and exit");

  // One flag per configuration key; keys whose short name is unique also get it as an alias.
  PipelineConfig defaults;
  const auto keys = config_keys(defaults);
  std::map<std::string, int> short_count;
  for (const auto& k : keys) ++short_count[k.name.substr(k.name.find('.') + 1)];
  std::map<std::string, std::string> flag_values;
  std::vector<std::pair<std::string, CLI::Option*>> flag_options;
  for (const auto& k : keys) {
    const std::string short_name = k.name.substr(k.name.find('.') + 1);
    std::string names = "--" + k.name;
    if (short_count[short_name] == 1) names += ",--" + short_name;
    auto* opt = app.add_option(names, flag_values[k.name], k.help)->group("Configuration");
    flag_options.emplace_back(k.name, opt);
  }

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"generate", "write a synthetic benchmark (corpora, ontologies, truth)"},
      {"embed", "train GloVe embeddings for both corpora"},
      {"align", "ontology-guided step-1 mapping"},
      {"refine", "train the source backbone and refine the mapping"},
      {"evaluate", "score the mapped target on the task and against the truth"},
      {"benchmark", "compare the pipeline with its ablations and baselines"},
      {"pipeline", "generate, embed, align, refine and evaluate in sequence"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << " (see --help)\n";
    return 2;
  }

  PipelineConfig cfg;
  try {
    if (config_path.empty())
      if (const char* env = std::getenv(kConfigEnv)) config_path = env;
    if (!config_path.empty()) load_config_file(cfg, config_path);
    for (const auto& [name, opt] : flag_options)
      if (opt->count() > 0) set_config_value(cfg, name, flag_values[name]);
    cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "error: stage=config: " << e.what() << '\n';
    return 1;
  }
  if (dump) {
    std::cout << dump_config(cfg);
    return 0;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << "error: usage: a subcommand is required (see --help)\n";
    return 2;
  }

  const std::map<std::string, Stage> stages = {
      {"generate", stage_generate}, {"embed", stage_embed},         {"align", stage_align},
      {"refine", stage_refine},     {"evaluate", stage_evaluate},   {"benchmark", stage_benchmark},
  };
  const std::string command = app.get_subcommands().front()->get_name();
  if (command == "pipeline") {
    for (const char* s : {"generate", "embed", "align", "refine", "evaluate"})
      if (int rc = run_stage(s, stages.at(s), cfg)) return rc;
    return 0;
  }
  return run_stage(command, stages.at(command), cfg);
}
