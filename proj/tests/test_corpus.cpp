#include <cmath>
#include <fstream>
#include <set>

#include "automap/corpus.hpp"
#include "automap/embedding.hpp"
#include "automap/generator.hpp"
#include "support.hpp"

using namespace automap;
namespace t = automap::testing;

namespace {

Ontology hand_tree() {
  Ontology o;
  o.add_edge("ROOT", "A");
  o.add_edge("ROOT", "B");
  o.add_edge("A", "A1");
  o.add_edge("A", "A2");
  o.add_edge("A1", "leafX");
  o.add_edge("A2", "leafY");
  o.add_edge("B", "leafZ");  // a shallower leaf
  return o;
}

GeneratorConfig small_config(int depth, int branching, int split_max, std::uint64_t seed, int n = 200) {
  GeneratorConfig c;
  c.concept_tree_depth = depth;
  c.branching = branching;
  c.split_max = split_max;
  c.n_patients = n;
  c.seed = seed;
  return c;
}

Corpus ten_patients() {
  Corpus c{Role::Source, {}, t::numbered_vocabulary(4)};
  for (int i = 0; i < 10; ++i)
    c.patients.push_back(t::make_patient("p" + std::to_string(i), i % 2, {{0, 1}, {2, 3, 3}}, 0.5 + i));
  return c;
}

std::set<std::string> ids(const Corpus& c) {
  std::set<std::string> out;
  for (const auto& p : c.patients) out.insert(p.id);
  return out;
}

// Co-occurrence of source concepts, with the target side folded onto its truth partners.
Matrix concept_cooccurrence(const Corpus& c, const GroundTruthMap& truth, const Vocabulary& source) {
  Matrix x(source.size(), source.size());
  const auto by_target = truth.by_target();
  auto concept_of = [&](std::size_t code) {
    const auto& id = c.vocabulary.id(code);
    return c.role == Role::Source ? source.index(id) : source.index(by_target.at(id).front());
  };
  for (const auto& p : c.patients)
    for (const auto& v : p.visits)
      for (std::size_t a = 0; a < v.codes.size(); ++a)
        for (std::size_t b = a + 1; b < v.codes.size(); ++b) {
          const auto i = concept_of(v.codes[a]), j = concept_of(v.codes[b]);
          if (i == j) continue;
          x(i, j) += 1;
          x(j, i) += 1;
        }
  return x * (1.0 / frobenius_norm(x));
}

}  // namespace

TEST(LosClass, BinsAreHalfOpen) {
  EXPECT_EQ(derive_los_class(0.5), 0);
  EXPECT_EQ(derive_los_class(0.0), 0);
  EXPECT_EQ(derive_los_class(1.0), 1);
  EXPECT_EQ(derive_los_class(6.999), 1);
  EXPECT_EQ(derive_los_class(7.0), 2);
  EXPECT_EQ(derive_los_class(14.0), 3);
  EXPECT_EQ(derive_los_class(20.0), 3);
  EXPECT_THROW(derive_los_class(-0.1), Error);
}

TEST(Ontology, AncestorWalksTheRootToLeafPath) {
  const Ontology o = hand_tree();
  EXPECT_EQ(o.ancestor("leafX", 0), "ROOT");
  EXPECT_EQ(o.ancestor("leafX", 1), "A");
  EXPECT_EQ(o.ancestor("leafX", 2), "A1");
  EXPECT_EQ(o.ancestor("leafX", 3), "leafX");
  EXPECT_EQ(o.ancestor("leafX", 2), o.ancestor("leafX", 2));
  EXPECT_EQ(o.ancestor("leafZ", 2), "leafZ");
  EXPECT_THROW(o.ancestor("leafX", 4), Error);
  EXPECT_THROW(o.ancestor("leafZ", 3), Error);
  EXPECT_THROW(o.ancestor("A", 1), Error);
}

TEST(Ontology, RejectsUndeclaredParentsAndCycles) {
  Ontology o = hand_tree();
  EXPECT_THROW(o.add_edge("nowhere", "x"), Error);
  EXPECT_THROW(o.add_edge("A1", "A"), Error);
  EXPECT_THROW(o.add_edge("A", "ROOT"), Error);
}

TEST(Split, SizesFollowRatios) {
  const auto s = split_corpus(ten_patients(), {0.7, 0.1, 0.2}, 3);
  EXPECT_EQ(s.train.patients.size(), 7u);
  EXPECT_EQ(s.valid.patients.size(), 1u);
  EXPECT_EQ(s.test.patients.size(), 2u);
}

TEST(Split, PartitionsPatientsDeterministically) {
  const Corpus c = ten_patients();
  const auto s = split_corpus(c, {0.5, 0.25, 0.25}, 9);
  auto a = ids(s.train), b = ids(s.valid), d = ids(s.test);
  std::set<std::string> all;
  for (const auto* part : {&a, &b, &d}) {
    for (const auto& id : *part) EXPECT_TRUE(all.insert(id).second) << id << " appears twice";
  }
  EXPECT_EQ(all, ids(c));
  const auto again = split_corpus(c, {0.5, 0.25, 0.25}, 9);
  EXPECT_EQ(again.train, s.train);
  EXPECT_EQ(again.test, s.test);
}

TEST(Split, RejectsBadInput) {
  Corpus tiny = head(ten_patients(), 2);
  EXPECT_THROW(split_corpus(tiny, {0.7, 0.1, 0.2}, 1), Error);
  EXPECT_THROW(split_corpus(ten_patients(), {0.7, 0.1, 0.3}, 1), Error);
  EXPECT_THROW(split_corpus(ten_patients(), {0.9, 0.0, 0.1}, 1), Error);
}

TEST(Split, LabelRatesStayNearGlobal) {
  const auto bm = generate_synthetic(small_config(3, 4, 3, 5, 1000));
  auto rate = [](const Corpus& c) {
    double n = 0;
    for (const auto& p : c.patients) n += p.mortality;
    return n / static_cast<double>(c.patients.size());
  };
  const double global = rate(bm.target);
  const auto s = split_corpus(bm.target, {0.7, 0.15, 0.15}, 2);
  for (const auto* part : {&s.train, &s.valid, &s.test}) EXPECT_LT(std::abs(rate(*part) - global), 0.15);
}

TEST(Generator, OneToOneSplitGivesBijection) {
  const auto bm = generate_synthetic(small_config(3, 3, 1, 7));
  EXPECT_EQ(bm.source.vocabulary.size(), 27u);
  EXPECT_EQ(bm.target.vocabulary.size(), 27u);
  std::set<std::string> targets, sources;
  for (const auto& [tt, s] : bm.truth.pairs) {
    EXPECT_TRUE(targets.insert(tt).second);
    EXPECT_TRUE(sources.insert(s).second);
  }
  EXPECT_EQ(targets.size(), 27u);
  EXPECT_EQ(sources.size(), 27u);
}

TEST(Generator, GranularitySplitKeepsTruthComplete) {
  const auto bm = generate_synthetic(small_config(3, 3, 3, 7));
  const std::size_t nt = bm.target.vocabulary.size();
  EXPECT_GE(nt, 27u);
  EXPECT_LE(nt, 81u);
  const auto by_target = bm.truth.by_target();
  EXPECT_EQ(by_target.size(), nt);
  for (std::size_t i = 0; i < nt; ++i) {
    const auto it = by_target.find(bm.target.vocabulary.id(i));
    ASSERT_NE(it, by_target.end());
    ASSERT_EQ(it->second.size(), 1u);
    EXPECT_TRUE(bm.source.vocabulary.find(it->second.front()).has_value());
  }
  bm.source.validate();
  bm.target.validate();
}

TEST(Generator, OntologiesCoverTheVocabularies) {
  const auto bm = generate_synthetic(small_config(3, 4, 3, 2));
  EXPECT_EQ(leaf_vocabulary(bm.source_ontology), bm.source.vocabulary);
  EXPECT_EQ(leaf_vocabulary(bm.target_ontology), bm.target.vocabulary);
  EXPECT_EQ(bm.source_ontology.depth(), 3);
  for (auto leaf : bm.target_ontology.leaves())
    EXPECT_EQ(bm.target_ontology.ancestor(leaf, 3), leaf);
}

TEST(Generator, IsDeterministicPerSeed) {
  const auto dir = t::scratch_dir("generator-determinism");
  const auto a = generate_synthetic(small_config(3, 3, 3, 7));
  const auto b = generate_synthetic(small_config(3, 3, 3, 7));
  save_corpus(a.target, dir + "/a.jsonl");
  save_corpus(b.target, dir + "/b.jsonl");
  EXPECT_EQ(t::slurp(dir + "/a.jsonl"), t::slurp(dir + "/b.jsonl"));
  EXPECT_EQ(a.truth, b.truth);
  const auto c = generate_synthetic(small_config(3, 3, 3, 8));
  EXPECT_FALSE(c.target == a.target);
}

TEST(Generator, RejectsDegenerateConfigs) {
  EXPECT_THROW(generate_synthetic(small_config(3, 1, 1, 1)), Error);
  EXPECT_THROW(generate_synthetic(small_config(1, 3, 1, 1)), Error);
  EXPECT_THROW(generate_synthetic(small_config(3, 3, 0, 1)), Error);
  EXPECT_THROW(generate_synthetic(small_config(3, 3, 1, 1, 0)), Error);
}

TEST(Generator, CooccurrenceGapShrinksWithMorePatients) {
  auto gap = [](int n) {
    const auto bm = generate_synthetic(small_config(3, 3, 1, 11, n));
    return frobenius_distance(concept_cooccurrence(bm.source, bm.truth, bm.source.vocabulary),
                              concept_cooccurrence(bm.target, bm.truth, bm.source.vocabulary));
  };
  EXPECT_LT(gap(2000), gap(200));
}

TEST(CorpusIo, RoundTrip) {
  const auto dir = t::scratch_dir("corpus-io");
  const auto bm = generate_synthetic(small_config(3, 3, 2, 4, 30));
  save_corpus(bm.target, dir + "/t.jsonl");
  save_ontology(bm.target_ontology, dir + "/t.tsv");
  save_truth(bm.truth, dir + "/truth.tsv");
  EXPECT_EQ(load_corpus(dir + "/t.jsonl", Role::Target, bm.target.vocabulary), bm.target);
  EXPECT_EQ(load_ontology(dir + "/t.tsv"), bm.target_ontology);
  EXPECT_EQ(load_truth(dir + "/truth.tsv", &bm.target.vocabulary, &bm.source.vocabulary), bm.truth);
}

TEST(CorpusIo, EmptyVisitIsRejectedWithLineNumber) {
  const auto dir = t::scratch_dir("corpus-bad");
  std::ofstream(dir + "/c.jsonl")
      << R"({"id": "a", "mortality": 0, "visits": [{"codes": ["x"], "los_days": 1.0}]})" << '\n'
      << R"({"id": "b", "mortality": 1, "visits": [{"codes": [], "los_days": 2.0}]})" << '\n';
  try {
    load_corpus(dir + "/c.jsonl", Role::Source);
    FAIL() << "empty visit accepted";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
}

TEST(CorpusIo, UnknownCodeIsNamed) {
  const auto dir = t::scratch_dir("corpus-unknown");
  std::ofstream(dir + "/c.jsonl") << R"({"id": "a", "mortality": 0, "visits": [{"codes": ["zz9"], "los_days": 1.0}]})"
                                  << '\n';
  try {
    load_corpus(dir + "/c.jsonl", Role::Source, t::numbered_vocabulary(3));
    FAIL() << "unknown code accepted";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("zz9"), std::string::npos) << e.what();
  }
}

TEST(CorpusIo, OntologyEdgeToUndeclaredNodeIsRejected) {
  const auto dir = t::scratch_dir("ontology-bad");
  std::ofstream(dir + "/o.tsv") << "ROOT\tA\nB\tleaf\n";
  EXPECT_THROW(load_ontology(dir + "/o.tsv"), Error);
}

TEST(CorpusIo, TruthWithUnknownIdIsRejected) {
  const auto dir = t::scratch_dir("truth-bad");
  std::ofstream(dir + "/t.tsv") << "c0\tc1\nc7\tc0\n";
  const auto v = t::numbered_vocabulary(3);
  EXPECT_THROW(load_truth(dir + "/t.tsv", &v, &v), Error);
}
