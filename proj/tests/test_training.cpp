#include <gtest/gtest.h>

#include <set>

#include "ltkd/training.hpp"
#include "test_util.hpp"

using namespace ltkd;

namespace {

BackboneSpec spec_for(const DatasetSplit& data, std::vector<int> widths = {16, 16, 8}) {
  BackboneSpec spec;
  spec.input_dim = static_cast<int>(data.input_dim());
  spec.num_classes = data.num_classes();
  spec.widths = std::move(widths);
  return spec;
}

ScheduleConfig short_schedule(int epochs, std::uint64_t seed = 5) {
  ScheduleConfig s;
  s.epochs = epochs;
  s.batch_size = 16;
  s.learning_rate = 0.05;
  s.seed = seed;
  return s;
}

std::vector<const MetricsRecord*> train_records(const TrainResult& r) {
  std::vector<const MetricsRecord*> out;
  for (const auto& rec : r.history)
    if (rec.split == "train") out.push_back(&rec);
  return out;
}

void expect_same_trajectory(const TrainResult& a, const TrainResult& b) {
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].loss, b.history[i].loss) << "record " << i;
    EXPECT_EQ(a.history[i].overall_accuracy, b.history[i].overall_accuracy) << "record " << i;
    EXPECT_EQ(a.history[i].per_class_accuracy, b.history[i].per_class_accuracy) << "record " << i;
  }
}

struct Fixture : ::testing::Test {
  TrainTestSplits data = test::small_mixture();
  BackboneSpec spec = spec_for(data.train);
  LossSpec ce;

  ModelState teacher(std::uint64_t seed = 1, int epochs = 8) {
    return train_teacher(data.train, init_model(spec, test::sites({3}), {}, seed), ce, short_schedule(epochs)).model;
  }
};

}  // namespace

TEST(Schedule, GnEpochs) {
  std::vector<int> gn;
  for (int e = 0; e < 20; ++e)
    if (is_gn_epoch(e, 7)) gn.push_back(e);
  EXPECT_EQ(gn, (std::vector<int>{0, 7, 14}));
  for (int e = 0; e < 5; ++e) EXPECT_TRUE(is_gn_epoch(e, 1));
}

TEST(Schedule, ValidationAndLearningRate) {
  ScheduleConfig s;
  EXPECT_NO_THROW(s.validate());
  s.period = 0;
  EXPECT_THROW(s.validate(), ValidationError);
  ASSERT_FALSE(s.problems().empty());
  EXPECT_EQ(s.problems().front().field, "period");
  EXPECT_NE(s.problems().front().message.find("ScheduleConfig.period"), std::string::npos);
  s = {};
  s.lr_milestones = {5, 10};
  s.lr_decay = 0.5;
  EXPECT_DOUBLE_EQ(s.learning_rate_at(4), 0.05);
  EXPECT_DOUBLE_EQ(s.learning_rate_at(5), 0.025);
  EXPECT_DOUBLE_EQ(s.learning_rate_at(12), 0.0125);
  DistillConfig d;
  EXPECT_EQ(d.top_k, 10);
  EXPECT_EQ(d.alpha, 1.0);
  d.alpha = -1;
  EXPECT_THROW(d.validate(), ValidationError);
}

TEST_F(Fixture, TeacherLogsGnPathOnScheduledEpochs) {
  for (int period : {7, 1, 3}) {
    auto sched = short_schedule(20);
    sched.period = period;
    const auto result = train_teacher(data.train, init_model(spec, test::sites({3}), {}, 2), ce, sched);
    std::set<int> gn;
    for (const auto* rec : train_records(result))
      if (rec->path == "gn") gn.insert(rec->epoch);
    std::set<int> expected;
    for (int e = 0; e < 20; ++e)
      if (e % period == 0) expected.insert(e);
    EXPECT_EQ(gn, expected) << "period " << period;
  }
}

TEST_F(Fixture, TeacherKeepsResidualsFeasibleAfterEveryEpoch) {
  auto sched = short_schedule(12);
  sched.period = 1;
  sched.learning_rate = 0.5;
  auto init = init_model(spec, test::sites({1, 3}), {}, 3);
  const auto result = train_teacher(data.train, init, ce, sched);
  for (const auto* rec : train_records(result)) {
    ASSERT_TRUE(rec->residual_min_scale.has_value());
    EXPECT_GE(*rec->residual_min_scale, 0.0);
    EXPECT_GE(*rec->residual_min_shift, 0.0);
    EXPECT_LE(*rec->residual_max_shift, 1.0);
  }
  for (const auto& [_, p] : result.model.params.residuals) EXPECT_TRUE(p.feasible());
}

TEST_F(Fixture, TeacherNeedsResidualLayer) {
  EXPECT_THROW(train_teacher(data.train, init_model(spec, {}, {}, 1), ce, short_schedule(1)), ValidationError);
}

TEST_F(Fixture, PinnedZeroResidualMatchesPlainTraining) {
  auto sched = short_schedule(9);
  sched.period = 2;
  auto pinned = init_model(spec, test::sites({2, 3}), {}, 4);
  for (auto& [_, p] : pinned.params.residuals) {
    p.scale.setZero();
    p.shift.setZero();
  }
  TrainOptions frozen;
  frozen.freeze_residuals = true;
  frozen.eval_split = &data.test;
  const auto teacher_run = train_teacher(data.train, pinned, ce, sched, frozen);
  TrainOptions plain;
  plain.eval_split = &data.test;
  const auto baseline_run = train_baseline(data.train, init_model(spec, {}, {}, 4), ce, sched, plain);
  expect_same_trajectory(teacher_run, baseline_run);
}

TEST_F(Fixture, ScratchStudentWithZeroAlphaIsTheBaseline) {
  const auto t = teacher();
  DistillConfig cfg;
  cfg.alpha = 0.0;
  cfg.seed = 9;
  const auto sched = short_schedule(6, 11);
  TrainOptions opts;
  opts.eval_split = &data.test;
  const auto student = train_student_scratch(t, data.train, ce, cfg, sched, opts);
  const auto baseline = train_baseline(data.train, init_model(spec, {}, {}, 9), ce, sched, opts);
  expect_same_trajectory(student, baseline);
  EXPECT_EQ(parameter_digest(student.model), parameter_digest(baseline.model));
}

TEST_F(Fixture, TeacherIsNeverModified) {
  const auto t = teacher();
  const auto digest = parameter_digest(t);
  for (auto method : {TransferMethod::from_scratch, TransferMethod::decouple, TransferMethod::high_conf_kernels}) {
    for (bool resample : {true, false}) {
      DistillConfig cfg;
      cfg.method = method;
      cfg.fine_tune_epochs = 2;
      cfg.top_k = 4;
      cfg.resample_teacher_noise = resample;
      train_student(t, data.train, ce, cfg, short_schedule(2));
      EXPECT_EQ(parameter_digest(t), digest) << to_string(method);
    }
  }
}

TEST_F(Fixture, FrozenTeacherNoiseIsDeterministicAndDiffersFromResampling) {
  const auto t = teacher();
  DistillConfig frozen;
  frozen.resample_teacher_noise = false;
  const auto a = train_student_scratch(t, data.train, ce, frozen, short_schedule(3));
  const auto b = train_student_scratch(t, data.train, ce, frozen, short_schedule(3));
  expect_same_trajectory(a, b);
  DistillConfig fresh;
  const auto c = train_student_scratch(t, data.train, ce, fresh, short_schedule(3));
  EXPECT_NE(a.history.back().loss, c.history.back().loss);
}

TEST_F(Fixture, StudentFeatureWidthMustMatchTeacher) {
  const auto t = teacher();
  DistillConfig cfg;
  cfg.student_backbone = spec_for(data.train, {16, 16, 4});
  EXPECT_THROW(train_student_scratch(t, data.train, ce, cfg, short_schedule(1)), ValidationError);
  cfg.student_backbone = spec_for(data.train, {12, 8});
  EXPECT_NO_THROW(train_student_scratch(t, data.train, ce, cfg, short_schedule(1)));
}

TEST_F(Fixture, DecoupleWithoutFineTuningIsTheTeacher) {
  const auto t = teacher();
  DistillConfig cfg;
  cfg.method = TransferMethod::decouple;
  cfg.fine_tune_epochs = 0;
  const auto student = train_student(t, data.train, ce, cfg, short_schedule(5));
  EXPECT_TRUE(student.history.empty());
  EXPECT_EQ(forward_std(student.model, data.test.inputs()).logits, forward_std(t, data.test.inputs()).logits);
  EXPECT_EQ(evaluate(student.model, data.test).overall_accuracy, evaluate(t, data.test).overall_accuracy);
}

TEST_F(Fixture, DecoupleWithZeroRateAndAlphaLeavesMetricsUnchanged) {
  const auto t = teacher();
  DistillConfig cfg;
  cfg.method = TransferMethod::decouple;
  cfg.alpha = 0.0;
  cfg.fine_tune_epochs = 3;
  auto sched = short_schedule(3);
  sched.learning_rate = 0.0;
  const auto student = train_student(t, data.train, ce, cfg, sched);
  const auto before = evaluate(t, data.test);
  const auto after = evaluate(student.model, data.test);
  EXPECT_EQ(before.overall_accuracy, after.overall_accuracy);
  EXPECT_EQ(before.per_class_accuracy, after.per_class_accuracy);
  EXPECT_EQ(before.loss, after.loss);
}

TEST_F(Fixture, FullMaskKernelsEqualsDecouple) {
  const auto t = teacher();
  DistillConfig cfg;
  cfg.fine_tune_epochs = 3;
  const auto sched = short_schedule(3);
  const auto masked = train_student_kernels(t, KernelMask::all(spec.num_classes, spec.feature_dim()), data.train,
                                            ce, cfg, sched);
  const auto decoupled = train_student_decouple(t, data.train, ce, cfg, sched);
  expect_same_trajectory(masked, decoupled);
  EXPECT_EQ(parameter_digest(masked.model), parameter_digest(decoupled.model));
}

TEST_F(Fixture, EmptyMaskMakesTeacherTargetNoiseFree) {
  const auto t = teacher();
  Rng rng(3);
  const KernelMask empty{std::vector<std::vector<int>>(spec.num_classes)};
  const auto gn = forward_gn(t, data.train.inputs(), data.train.labels(), rng, &empty);
  EXPECT_EQ(gn.features, forward_std(t, data.train.inputs()).features);
}

TEST_F(Fixture, KernelsNeedFinalSiteResidual) {
  const auto t = train_teacher(data.train, init_model(spec, test::sites({1}), {}, 1), ce, short_schedule(2)).model;
  DistillConfig cfg;
  EXPECT_THROW(train_student_kernels(t, KernelMask::all(spec.num_classes, spec.feature_dim()), data.train, ce,
                                     cfg, short_schedule(1)),
               ValidationError);
}

TEST(KernelSelection, FindsClassSpecificChannel) {
  // Channel i + 3 fires only for class i; channels 0-2 are dead.
  const int classes = 3;
  Rng rng(1);
  Matrix x = Matrix::Zero(30, classes);
  std::vector<int> labels(30);
  for (int j = 0; j < 30; ++j) {
    labels[j] = j % classes;
    x(j, labels[j]) = 1.0 + 0.1 * std::abs(test::random_matrix(1, 1, rng)(0, 0));
  }
  DatasetSplit data(x, labels, classes);
  BackboneSpec spec;
  spec.input_dim = classes;
  spec.num_classes = classes;
  spec.widths = {6};
  auto model = init_model(spec, test::sites({1}), {}, 0);
  model.params.blocks[0].weight.setZero();
  model.params.blocks[0].bias.setZero();
  model.params.classifier.weight.setZero();
  model.params.classifier.bias.setZero();
  for (int i = 0; i < classes; ++i) {
    model.params.blocks[0].weight(i + 3, i) = 5.0;
    model.params.classifier.weight(i, i + 3) = 1.0;
  }
  const auto sel = select_high_conf_kernels(model, data, 1, 4);
  EXPECT_TRUE(sel.warnings.empty());
  for (int i = 0; i < classes; ++i) EXPECT_EQ(sel.mask.channels[i], std::vector<int>{i + 3});

  const auto all = select_high_conf_kernels(model, data, 6, 4);
  for (int i = 0; i < classes; ++i) EXPECT_EQ(all.mask.channels[i], (std::vector<int>{0, 1, 2, 3, 4, 5}));

  const auto whole = select_high_conf_kernels(model, data, 2, 50);
  EXPECT_EQ(whole.warnings.size(), 3u);
  EXPECT_THROW(select_high_conf_kernels(model, data, 7, 4), ValidationError);
}

TEST(SingleBatch, OverfitsEightSamples) {
  const auto data = test::small_mixture(4, 8, {2, 2, 2, 2}, 8);
  auto spec = spec_for(data.train, {32, 32});
  ScheduleConfig sched;
  sched.epochs = 200;
  sched.batch_size = 8;
  sched.learning_rate = 0.1;
  sched.momentum = 0.9;
  const auto result = train_baseline(data.train, init_model(spec, {}, {}, 0), LossSpec{}, sched);
  EXPECT_LT(result.history.back().loss, 0.01);
  EXPECT_EQ(result.history.back().overall_accuracy, 1.0);
}

TEST(SingleBatch, LargeAlphaDistillLossDecreases) {
  const auto data = test::small_mixture(4, 8, {2, 2, 2, 2}, 8);
  auto spec = spec_for(data.train, {16, 8});
  ScheduleConfig tsched;
  tsched.epochs = 5;
  tsched.batch_size = 8;
  tsched.period = 1;
  const auto teacher = train_teacher(data.train, init_model(spec, test::sites({2}), {}, 1), LossSpec{}, tsched).model;
  DistillConfig cfg;
  cfg.alpha = 1000.0;
  cfg.fine_tune_epochs = 15;
  cfg.resample_teacher_noise = false;
  ScheduleConfig sched = tsched;
  sched.learning_rate = 1e-4;
  const auto result = train_student_decouple(teacher, data.train, LossSpec{}, cfg, sched);
  ASSERT_EQ(result.history.size(), 15u);
  for (std::size_t e = 1; e < result.history.size(); ++e)
    EXPECT_LT(result.history[e].loss, result.history[e - 1].loss) << "epoch " << e;
}

TEST(Divergence, ReportsStageAndEpoch) {
  const auto data = test::small_mixture();
  auto spec = spec_for(data.train);
  ScheduleConfig sched = short_schedule(50);
  sched.learning_rate = 1e200;
  TrainOptions opts;
  opts.stage = "baseline";
  try {
    train_baseline(data.train, init_model(spec, {}, {}, 0), LossSpec{}, sched, opts);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("baseline"), std::string::npos) << e.what();
    EXPECT_GE(e.epoch(), 0);
  }
}

TEST(Evaluate, MajorityPredictorAndGroupAverages) {
  const auto data = test::small_mixture();
  BackboneSpec spec = spec_for(data.train);
  auto model = init_model(spec, {}, {}, 0);
  model.params.classifier.weight.setZero();
  model.params.classifier.bias.setZero();
  model.params.classifier.bias(0, 0) = 1.0;
  const auto rec = evaluate(model, data.test, data.train.per_class_counts(), GroupThresholds{40, 10});
  EXPECT_DOUBLE_EQ(rec.overall_accuracy, 0.25);
  EXPECT_EQ(rec.per_class_accuracy, (std::vector<double>{1.0, 0.0, 0.0, 0.0}));
  EXPECT_DOUBLE_EQ(*rec.many_accuracy, 1.0);
  EXPECT_DOUBLE_EQ(*rec.medium_accuracy, 0.0);
  EXPECT_DOUBLE_EQ(*rec.few_accuracy, 0.0);
  const auto back = metrics_from_json(to_json(rec));
  EXPECT_EQ(back.per_class_accuracy, rec.per_class_accuracy);
  EXPECT_EQ(back.few_accuracy, rec.few_accuracy);
}

TEST(Evaluate, SeparableDataIsLearned) {
  SynthMixtureSpec s;
  s.num_classes = 3;
  s.input_dim = 4;
  s.class_separation = 12.0;
  s.counts = {80, 40, 20};
  s.test_per_class = 100;
  const auto data = make_synthetic_mixture(s, 2);
  ScheduleConfig sched = short_schedule(15);
  const auto result = train_baseline(data.train, init_model(spec_for(data.train, {16}), {}, {}, 1), LossSpec{}, sched);
  const auto rec = evaluate(result.model, data.test);
  EXPECT_GE(rec.overall_accuracy, 0.99);
  double mean = 0.0;
  for (double a : rec.per_class_accuracy) mean += a / 3.0;
  EXPECT_NEAR(mean, rec.overall_accuracy, 1e-12);
}
