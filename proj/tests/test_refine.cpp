#include <cmath>
#include <numeric>
#include <sstream>

#include "automap/refine.hpp"
#include "support.hpp"

using namespace automap;
namespace t = automap::testing;

namespace {

double logit(double p) { return std::log(p / (1 - p)); }

// D(x) = sigmoid(x) on one-dimensional inputs.
Discriminator identity_discriminator() {
  Discriminator d{{}, 1};
  d.net.add<nn::Dense>(Matrix::from_rows({{1.0}}), Matrix(1, 1));
  return d;
}

Discriminator constant_discriminator(std::size_t dim) {
  Discriminator d = make_discriminator(dim, 1);
  auto* last = dynamic_cast<nn::Dense*>(&d.net.layer(d.net.size() - 1));
  last->weight().value = Matrix(last->in(), 1);
  return d;
}

// Two topics over ten codes: codes 0-4 mark mortality 1, codes 5-9 mortality 0.
Corpus topic_corpus(int n, std::uint64_t seed, Role role = Role::Target) {
  Corpus c{role, {}, t::numbered_vocabulary(10)};
  std::mt19937_64 rng(seed);
  for (int i = 0; i < n; ++i) {
    const int y = i % 2;
    std::vector<std::size_t> codes;
    for (int k = 0; k < 4; ++k) codes.push_back((y ? 0 : 5) + rng() % 5);
    std::vector<std::size_t> second;
    for (int k = 0; k < 3; ++k) second.push_back((y ? 0 : 5) + rng() % 5);
    c.patients.push_back(t::make_patient("p" + std::to_string(i), y, {codes, second}, 0.5 + (rng() % 200) / 10.0));
  }
  return c;
}

struct Fixture {
  Matrix e_s = t::random_matrix(10, 4, 1);
  Matrix e_t = matmul(e_s, random_orthogonal(4, 9).transpose());
  Corpus source = topic_corpus(60, 1, Role::Source), valid = topic_corpus(20, 2), labeled = topic_corpus(40, 3);
  TrainedModel source_model;

  Fixture() {
    TrainConfig tc;
    tc.optimizer.learning_rate = 1e-2;
    tc.max_epochs = 50;
    source_model = train_backbone(make_backbone(BackboneKind::Mlp, Task::Mortality, 4, 5, 16), e_s, source, valid,
                                  tc, false);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

std::vector<const Patient*> pointers(const Corpus& c) {
  std::vector<const Patient*> out;
  for (const auto& p : c.patients) out.push_back(&p);
  return out;
}

}  // namespace

TEST(DiscriminatorLoss, UninformedDiscriminator) {
  Discriminator d = constant_discriminator(3);
  const double l = discriminator_loss(d, t::random_matrix(5, 3, 1), t::random_matrix(4, 3, 2), Matrix::identity(3), false);
  EXPECT_NEAR(l, 2 * std::log(2.0), 1e-12);
}

TEST(DiscriminatorLoss, PerfectDiscriminatorIsNearZero) {
  Discriminator d = identity_discriminator();
  const double l = discriminator_loss(d, Matrix::from_rows({{40.0}}), Matrix::from_rows({{-40.0}}), Matrix::identity(1));
  EXPECT_NEAR(l, 0.0, 1e-6);
}

TEST(DiscriminatorLoss, SinglePair) {
  Discriminator d = identity_discriminator();
  const double l = discriminator_loss(d, Matrix::from_rows({{logit(0.8)}}), Matrix::from_rows({{logit(0.3)}}),
                                      Matrix::identity(1));
  EXPECT_NEAR(l, -std::log(0.8) - std::log(0.7), 1e-12);
  EXPECT_NEAR(l, 0.5798, 1e-4);
}

TEST(DiscriminatorLoss, SaturatedOutputsAreClamped) {
  Discriminator d = identity_discriminator();
  const double l = discriminator_loss(d, Matrix::from_rows({{-800.0}}), Matrix::from_rows({{800.0}}), Matrix::identity(1));
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, -2 * std::log(kProbabilityClamp), 1e-6);
}

TEST(GeneratorLoss, KnownValues) {
  Discriminator d = identity_discriminator();
  const Matrix i = Matrix::identity(1);
  EXPECT_NEAR(generator_loss(d, Matrix::from_rows({{0.0}}), i), std::log(2.0), 1e-12);
  EXPECT_NEAR(generator_loss(d, Matrix::from_rows({{logit(0.25)}}), i), std::log(4.0), 1e-12);
  EXPECT_NEAR(generator_loss(d, Matrix::from_rows({{60.0}}), i), 0.0, 1e-6);
}

TEST(ClassificationLoss, KnownValues) {
  const Matrix e = Matrix::from_rows({{1.0}});
  const Corpus c{Role::Target, {t::make_patient("a", 0, {{0}})}, t::numbered_vocabulary(1)};
  const auto batch = pointers(c);
  Backbone b{BackboneKind::Mlp, Task::Mortality, 1, {}};
  b.net.add<nn::SumPool>();
  b.net.add<nn::Dense>(Matrix::from_rows({{2.0, 0.0}}), Matrix(1, 2));
  EXPECT_NEAR(classification_loss(b, batch, e, Matrix::identity(1)), 0.1269, 1e-4);

  Backbone uniform{BackboneKind::Mlp, Task::Mortality, 1, {}};
  uniform.net.add<nn::SumPool>();
  uniform.net.add<nn::Dense>(Matrix(1, 2), Matrix(1, 2));
  EXPECT_NEAR(classification_loss(uniform, batch, e, Matrix::identity(1)), std::log(2.0), 1e-12);

  Backbone los{BackboneKind::Mlp, Task::LengthOfStay, 1, {}};
  los.net.add<nn::Dense>(Matrix(1, 4), Matrix(1, 4));
  EXPECT_NEAR(classification_loss(los, batch, e, Matrix::identity(1)), std::log(4.0), 1e-12);
}

TEST(ClassificationLoss, LabelOutsideClassRangeIsAnError) {
  const Corpus c{Role::Target, {t::make_patient("a", 2, {{0}})}, t::numbered_vocabulary(1)};
  Backbone b = make_backbone(BackboneKind::Mlp, Task::Mortality, 1, 1, 4);
  EXPECT_THROW(classification_loss(b, pointers(c), Matrix::from_rows({{1.0}}), Matrix::identity(1)), Error);
}

TEST(GradientCheck, DiscriminatorLossInWAndParameters) {
  Discriminator d = make_discriminator(4, 3, 16);
  const Matrix es = t::random_matrix(6, 4, 4), et = t::random_matrix(5, 4, 5);
  Matrix w = t::random_matrix(4, 4, 6);
  Matrix dw;
  d.net.zero_grad();
  discriminator_loss(d, es, et, w, false, true, &dw);
  auto loss = [&] { return discriminator_loss(d, es, et, w, false); };
  EXPECT_LT(t::max_fd_error(w, dw, loss), 1e-4);
  for (auto* p : d.net.params()) EXPECT_LT(t::max_fd_error(p->value, p->grad, loss), 1e-4);
}

TEST(GradientCheck, DiscriminatorLossWithTrainModeDropout) {
  Discriminator d = make_discriminator(3, 7, 16, 0.3);
  d.net.set_dropout_reuse(true);
  const Matrix es = t::random_matrix(4, 3, 1), et = t::random_matrix(4, 3, 2);
  Matrix w = t::random_matrix(3, 3, 3);
  Matrix dw;
  d.net.zero_grad();
  discriminator_loss(d, es, et, w, true, true, &dw);
  // same masks for both passes because both batches share a shape
  auto loss = [&] { return discriminator_loss(d, es, et, w, true); };
  EXPECT_LT(t::max_fd_error(w, dw, loss), 1e-4);
}

TEST(GradientCheck, GeneratorLossInW) {
  Discriminator d = make_discriminator(4, 8, 16);
  const Matrix et = t::random_matrix(7, 4, 9);
  Matrix w = t::random_matrix(4, 4, 10);
  Matrix dw;
  generator_loss(d, et, w, false, &dw);
  EXPECT_LT(t::max_fd_error(w, dw, [&] { return generator_loss(d, et, w, false); }), 1e-4);
}

TEST(GradientCheck, ClassificationLossInW) {
  const Corpus c = topic_corpus(6, 4);
  const auto batch = pointers(c);
  const Matrix e = t::random_matrix(10, 4, 11);
  for (auto kind : {BackboneKind::Mlp, BackboneKind::Rnn})
    for (auto task : {Task::Mortality, Task::LengthOfStay}) {
      Backbone b = make_backbone(kind, task, 4, 12, 8);
      Matrix w = t::random_matrix(4, 4, 13);
      Matrix dw;
      classification_loss(b, batch, e, w, &dw);
      EXPECT_LT(t::max_fd_error(w, dw, [&] { return classification_loss(b, batch, e, w); }), 1e-4)
          << backbone_name(kind) << "/" << task_name(task);
    }
}

TEST(GradientCheck, CombinedObjectiveIsTheWeightedSum) {
  const Corpus c = topic_corpus(5, 6);
  const auto batch = pointers(c);
  const Matrix e = t::random_matrix(10, 4, 14), gen_batch = t::random_matrix(8, 4, 15);
  Backbone b = make_backbone(BackboneKind::Mlp, Task::Mortality, 4, 16, 8);
  Discriminator d = make_discriminator(4, 17, 16);
  const double alpha = 0.1;
  Matrix w = t::random_matrix(4, 4, 18);
  Matrix dw_cls, dw_g;
  classification_loss(b, batch, e, w, &dw_cls);
  generator_loss(d, gen_batch, w, false, &dw_g);
  const Matrix dw = dw_cls + dw_g * alpha;
  auto combined = [&] { return classification_loss(b, batch, e, w) + alpha * generator_loss(d, gen_batch, w, false); };
  EXPECT_LT(t::max_fd_error(w, dw, combined), 1e-4);
}

TEST(Updates, PlayersOnlyMoveTheirOwnParameters) {
  Discriminator d = make_discriminator(4, 19, 16);
  const Matrix es = t::random_matrix(8, 4, 20), et = t::random_matrix(8, 4, 21);
  nn::Param w(t::random_matrix(4, 4, 22));
  const Matrix w_before = w.value;
  nn::OptimizerConfig opt;
  d.net.zero_grad();
  discriminator_loss(d, es, et, w.value, true, true);
  nn::rmsprop_step(d.net.params(), opt);
  EXPECT_EQ(w.value, w_before);

  const auto d_before = d.net.snapshot();
  w.zero_grad();
  generator_loss(d, et, w.value, true, &w.grad);
  nn::rmsprop_step(std::vector<nn::Param*>{&w}, opt);
  EXPECT_NE(w.value, w_before);
  EXPECT_EQ(d.net.snapshot(), d_before);
}

TEST(Discriminator, CannotSeparateIdenticalDistributions) {
  const Matrix e = t::random_matrix(64, 4, 23);
  Discriminator d = make_discriminator(4, 24);
  nn::OptimizerConfig opt;
  opt.learning_rate = 1e-3;
  Rng rng(25);
  for (int step = 0; step < 200; ++step) {
    d.net.zero_grad();
    discriminator_loss(d, detail::sample_rows(e, 8, rng), detail::sample_rows(e, 8, rng), Matrix::identity(4), true,
                       true);
    nn::rmsprop_step(d.net.params(), opt);
    if (step % 20 == 0) EXPECT_NEAR(discriminator_accuracy(d, e, e, Matrix::identity(4)), 0.5, 0.1);
  }
}

TEST(Jsd, KnownValues) {
  const std::vector<double> p = {0.5, 0.5}, q = {0.9, 0.1}, a = {1, 0}, b = {0, 1};
  EXPECT_EQ(jsd(p, p), 0.0);
  EXPECT_NEAR(jsd(a, b), std::log(2.0), 1e-15);
  // M = (0.7, 0.3): ½(0.0872) + ½(0.1163)
  EXPECT_NEAR(jsd(p, q), 0.1017, 1e-4);
  const std::vector<double> bad = {0.7, 0.7};
  EXPECT_THROW(jsd(bad, p), Error);
  EXPECT_THROW(jsd(p, std::vector<double>{1.0}), Error);
}

TEST(Jsd, RandomPairsAreSymmetricAndBounded) {
  std::mt19937_64 rng(5);
  std::gamma_distribution<double> g(0.5, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng() % 8;
    std::vector<double> p(n), q(n);
    for (auto* v : {&p, &q}) {
      for (double& x : *v) x = g(rng);
      const double s = std::accumulate(v->begin(), v->end(), 0.0);
      for (double& x : *v) x /= s;
    }
    EXPECT_NEAR(jsd(p, p), 0.0, 1e-15);
    EXPECT_EQ(jsd(p, q), jsd(q, p));
    EXPECT_LE(jsd(p, q), std::log(2.0) + 1e-15);
    EXPECT_GE(jsd(p, q), 0.0);
  }
}

TEST(RefineMapping, ZeroAlphaMatchesPureTaskFineTuning) {
  const auto& f = fixture();
  RefineConfig rc;
  rc.alpha = 0.0;
  rc.max_epochs = 15;
  rc.optimizer.learning_rate = 1e-2;
  rc.seed = 3;
  const Matrix w0 = random_orthogonal(4, 11);
  const auto a = refine_mapping(w0, f.e_t, f.e_s, f.source_model.backbone, f.labeled, f.valid, rc, nullptr);
  const auto b = finetune_mapping(w0, f.e_t, f.source_model.backbone, f.labeled, f.valid, rc);
  EXPECT_EQ(a.w, b.w);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].loss_cls, b.log[i].loss_cls);
    EXPECT_EQ(a.log[i].valid, b.log[i].valid);
  }
}

TEST(RefineMapping, SeparableTaskIsSolved) {
  const auto& f = fixture();
  RefineConfig rc;
  rc.alpha = 0.0;
  rc.max_epochs = 30;
  rc.patience = 30;
  rc.keep_trajectory = true;
  rc.optimizer.learning_rate = 1e-2;
  const auto r = refine_mapping(random_orthogonal(4, 11), f.e_t, f.e_s, f.source_model.backbone, f.labeled, f.valid,
                                rc, nullptr);
  EXPECT_LT(r.log.back().loss_cls, 0.05);
  Backbone b = f.source_model.backbone;
  const auto p = predict(b, f.valid, matmul(f.e_t, r.trajectory.back()));
  int correct = 0;
  for (std::size_t i = 0; i < p.labels.size(); ++i) correct += (p.probabilities(i, 1) > 0.5) == (p.labels[i] == 1);
  EXPECT_EQ(correct, static_cast<int>(p.labels.size()));
}

TEST(RefineMapping, ReturnsTheBestValidationCheckpoint) {
  const auto& f = fixture();
  RefineConfig rc;
  rc.max_epochs = 40;
  rc.patience = 4;
  rc.keep_trajectory = true;
  rc.optimizer.learning_rate = 5e-2;
  const auto r = refine_mapping(random_orthogonal(4, 12), f.e_t, f.e_s, f.source_model.backbone,
                                head(f.labeled, 6), topic_corpus(12, 9), rc, nullptr);
  double best = -1;
  for (const auto& row : r.log) best = std::max(best, row.valid);
  EXPECT_EQ(r.best_valid, best);
  EXPECT_EQ(r.w, r.trajectory.at(static_cast<std::size_t>(r.best_epoch)));
  EXPECT_LE(r.log.back().epoch, r.best_epoch + rc.patience);
}

TEST(RefineMapping, DeterministicPerSeed) {
  const auto& f = fixture();
  RefineConfig rc;
  rc.max_epochs = 5;
  const Matrix w0 = random_orthogonal(4, 13);
  const auto a = refine_mapping(w0, f.e_t, f.e_s, f.source_model.backbone, f.labeled, f.valid, rc, nullptr);
  const auto b = refine_mapping(w0, f.e_t, f.e_s, f.source_model.backbone, f.labeled, f.valid, rc, nullptr);
  EXPECT_EQ(a.w, b.w);
  EXPECT_EQ(a.log.back().loss_d, b.log.back().loss_d);
}

TEST(RefineMapping, WarnsWithoutLabels) {
  const auto& f = fixture();
  RefineConfig rc;
  rc.max_epochs = 2;
  std::ostringstream warnings;
  const Corpus none{Role::Target, {}, f.valid.vocabulary};
  const auto r = refine_mapping(Matrix::identity(4), f.e_t, f.e_s, f.source_model.backbone, none, f.valid, rc, &warnings);
  EXPECT_NE(warnings.str().find("warning"), std::string::npos);
  EXPECT_GT(r.log.back().loss_d, 0.0);
  EXPECT_EQ(r.log.back().loss_cls, 0.0);
}

TEST(RefineMapping, RejectsMismatchedDimensions) {
  const auto& f = fixture();
  RefineConfig rc;
  EXPECT_THROW(refine_mapping(Matrix::identity(3), f.e_t, f.e_s, f.source_model.backbone, f.labeled, f.valid, rc),
               Error);
  EXPECT_THROW(transfer_learning(f.source_model.backbone, t::random_matrix(10, 5, 1), f.labeled, f.valid, TrainConfig{}),
               Error);
}

TEST(RefineMapping, DivergenceEstimateFallsOverEpochs) {
  // the mapped target starts three times too wide; the generator has to shrink it
  const Matrix es = t::random_matrix(300, 8, 1);
  const Matrix et = t::random_matrix(300, 8, 2) * 3.0;
  Corpus valid{Role::Target, {}, t::numbered_vocabulary(300)};
  for (std::size_t i = 0; i < 20; ++i)
    valid.patients.push_back(t::make_patient("v" + std::to_string(i), static_cast<int>(i % 2), {{i, i + 20}}));
  const Corpus none{Role::Target, {}, valid.vocabulary};
  RefineConfig rc;
  rc.alpha = 1.0;
  rc.max_epochs = 20;
  rc.patience = 1000;
  rc.keep_trajectory = true;
  rc.optimizer.learning_rate = 3e-3;
  const auto r = refine_mapping(Matrix::identity(8), et, es, make_backbone(BackboneKind::Mlp, Task::Mortality, 8, 3),
                                none, valid, rc, nullptr);
  ASSERT_EQ(r.trajectory.size(), 21u);
  std::vector<double> windows;
  for (std::size_t start = 1; start + 5 <= r.trajectory.size(); start += 5) {
    double s = 0;
    for (std::size_t e = start; e < start + 5; ++e) s += estimate_jsd(et, es, r.trajectory[e], 7);
    windows.push_back(s / 5);
  }
  const double initial = estimate_jsd(et, es, r.trajectory.front(), 7);
  EXPECT_LT(windows.front(), initial);
  // window means may only rise within the estimator's sampling noise
  for (std::size_t i = 1; i < windows.size(); ++i) EXPECT_LE(windows[i], windows[i - 1] + 0.02) << "window " << i;
  EXPECT_LT(windows.back(), 0.5 * initial);
}

TEST(Baselines, TransferWithoutEpochsKeepsThePretrainedHead) {
  const auto& f = fixture();
  TrainConfig tc;
  tc.max_epochs = 0;
  const Matrix fresh = t::random_matrix(10, 4, 30);
  auto m = transfer_learning(f.source_model.backbone, fresh, f.labeled, f.valid, tc);
  Backbone pre = f.source_model.backbone;
  const auto a = predict(m.backbone, f.valid, m.embeddings);
  const auto b = predict(pre, f.valid, fresh);
  EXPECT_EQ(a.probabilities, b.probabilities);
}

TEST(Baselines, DirectTrainingIsDeterministicAndNeedsData) {
  const auto& f = fixture();
  TrainConfig tc;
  tc.max_epochs = 5;
  const auto a = train_backbone_direct(f.labeled, f.valid, f.e_t, BackboneKind::Rnn, Task::LengthOfStay, tc);
  const auto b = train_backbone_direct(f.labeled, f.valid, f.e_t, BackboneKind::Rnn, Task::LengthOfStay, tc);
  EXPECT_EQ(a.embeddings, b.embeddings);
  EXPECT_EQ(a.best_valid, b.best_valid);
  const Corpus none{Role::Target, {}, f.valid.vocabulary};
  EXPECT_THROW(train_backbone_direct(none, f.valid, f.e_t, BackboneKind::Mlp, Task::Mortality, tc), Error);
}

TEST(Backbone, LogitWidthFollowsTheTask) {
  const auto& f = fixture();
  for (auto kind : {BackboneKind::Mlp, BackboneKind::Rnn}) {
    Backbone m = make_backbone(kind, Task::Mortality, 4, 1, 8);
    Backbone l = make_backbone(kind, Task::LengthOfStay, 4, 1, 8);
    EXPECT_EQ(predict(m, f.valid, f.e_t).probabilities.cols(), 2u);
    const auto p = predict(l, f.valid, f.e_t);
    EXPECT_EQ(p.probabilities.cols(), 4u);
    EXPECT_EQ(p.labels.size(), f.valid.visit_count());
    Backbone wrong{kind, Task::LengthOfStay, 4, m.net};
    EXPECT_THROW(predict(wrong, f.valid, f.e_t), Error);
  }
}

TEST(Reports, TaskReportRoundTripAndRanges) {
  const auto& f = fixture();
  Backbone b = f.source_model.backbone;
  const auto rep = evaluate_predictions(predict(b, f.valid, f.e_s), Task::Mortality, 200, 4);
  for (const auto& m : rep.metrics) {
    EXPECT_GE(m.value, 0.0);
    EXPECT_LE(m.value, 1.0);
    EXPECT_GE(m.std, 0.0);
  }
  const auto dir = t::scratch_dir("task-report");
  save_task_report(rep, dir + "/r.csv");
  const auto back = load_task_report(dir + "/r.csv");
  ASSERT_EQ(back.metrics.size(), rep.metrics.size());
  for (std::size_t i = 0; i < rep.metrics.size(); ++i) {
    EXPECT_EQ(back.metrics[i].name, rep.metrics[i].name);
    EXPECT_EQ(back.metrics[i].value, rep.metrics[i].value);
    EXPECT_EQ(back.metrics[i].std, rep.metrics[i].std);
  }
}

TEST(Reports, RefineLogRoundTrip) {
  const auto& f = fixture();
  RefineConfig rc;
  rc.max_epochs = 3;
  const auto r = refine_mapping(Matrix::identity(4), f.e_t, f.e_s, f.source_model.backbone, f.labeled, f.valid, rc, nullptr);
  const auto dir = t::scratch_dir("refine-log");
  save_refine_log(r.log, dir + "/log.csv");
  const auto back = load_refine_log(dir + "/log.csv");
  ASSERT_EQ(back.size(), r.log.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].epoch, r.log[i].epoch);
    EXPECT_EQ(back[i].loss_d, r.log[i].loss_d);
    EXPECT_EQ(back[i].loss_w, r.log[i].loss_w);
    EXPECT_EQ(back[i].valid, r.log[i].valid);
  }
}

TEST(RandomOrthogonal, IsOrthogonalAndSeeded) {
  const Matrix a = random_orthogonal(16, 3);
  EXPECT_LT(orthogonality_error(a), 1e-10);
  EXPECT_EQ(a, random_orthogonal(16, 3));
  EXPECT_NE(a, random_orthogonal(16, 4));
}
