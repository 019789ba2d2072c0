#include <gtest/gtest.h>

#include <cmath>

#include "ltkd/residual_layer.hpp"
#include "test_util.hpp"

using namespace ltkd;

namespace {

ResidualParams constant_params(int classes, double scale, double shift, int width = 1) {
  return {Matrix::Constant(classes, width, scale), Matrix::Constant(classes, width, shift)};
}

}  // namespace

TEST(ResidualInit, EntriesInUnitIntervalAndSeeded) {
  const auto p = init_params(10, 5);
  EXPECT_EQ(p.scale.rows(), 10);
  EXPECT_EQ(p.width(), 1);
  EXPECT_GE(p.scale.minCoeff(), 0.0);
  EXPECT_LE(p.scale.maxCoeff(), 1.0);
  EXPECT_GE(p.shift.minCoeff(), 0.0);
  EXPECT_LE(p.shift.maxCoeff(), 1.0);
  const auto q = init_params(10, 5);
  EXPECT_EQ(p.scale, q.scale);
  EXPECT_EQ(p.shift, q.shift);
  const auto r = init_params(10, 6);
  EXPECT_TRUE(p.scale != r.scale || p.shift != r.shift);
  EXPECT_EQ(init_params(3, 1, 8).width(), 8);
}

TEST(SampleResidual, ZeroParamsGiveZeros) {
  Rng rng(1);
  const auto r = sample_residual(constant_params(3, 0.0, 0.0), std::vector<int>{0, 2, 1}, 5, rng);
  EXPECT_TRUE(r.isZero(0.0));
}

TEST(SampleResidual, PureShift) {
  Rng rng(1);
  const auto r = sample_residual(constant_params(2, 0.0, 0.7), std::vector<int>{1, 0, 1}, 4, rng);
  for (Eigen::Index i = 0; i < r.size(); ++i) EXPECT_EQ(r.data()[i], 0.7);
}

TEST(SampleResidual, MonteCarloMoments) {
  Rng rng(2024);
  const std::vector<int> labels(1000, 0);
  const auto r = sample_residual(constant_params(1, 2.0, 0.5), labels, 100, rng);
  ASSERT_EQ(r.size(), 100000);
  const double mean = r.mean();
  const double var = (r.array() - mean).square().sum() / (r.size() - 1);
  EXPECT_NEAR(mean, 0.5, 0.02);
  EXPECT_NEAR(std::sqrt(var), 2.0, 0.02);
}

TEST(SampleResidual, RejectsInfeasibleAndUnknownLabels) {
  Rng rng(0);
  EXPECT_THROW(sample_residual(constant_params(2, -0.1, 0.5), std::vector<int>{0}, 3, rng), ValidationError);
  EXPECT_THROW(sample_residual(constant_params(2, 0.1, 1.5), std::vector<int>{0}, 3, rng), ValidationError);
  EXPECT_THROW(sample_residual(constant_params(2, 0.1, 0.5), std::vector<int>{2}, 3, rng), ValidationError);
}

TEST(SampleResidual, PerClassParamsFollowLabels) {
  ResidualParams p{Matrix::Zero(2, 1), Matrix(2, 1)};
  p.shift << 0.25, 0.75;
  Rng rng(0);
  const auto r = sample_residual(p, std::vector<int>{1, 0}, 3, rng);
  EXPECT_TRUE((r.row(0).array() == 0.75).all());
  EXPECT_TRUE((r.row(1).array() == 0.25).all());
}

TEST(ResidualFromNoise, PerChannelUsesChannelColumn) {
  ResidualParams p{Matrix(1, 2), Matrix(1, 2)};
  p.scale << 1.0, 3.0;
  p.shift << 0.0, 0.5;
  Matrix noise = Matrix::Ones(1, 4);
  // Two channels of two positions each.
  const auto r = residual_from_noise(p, std::vector<int>{0}, noise, 2);
  EXPECT_DOUBLE_EQ(r(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(r(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(r(0, 2), 3.5);
  EXPECT_DOUBLE_EQ(r(0, 3), 3.5);
}

TEST(ApplyGn, AdditiveIdentities) {
  Rng rng(3);
  FeatureBatch f{test::random_matrix(4, 5, rng), {0, 1, 0, 1}};
  const Matrix zero = Matrix::Zero(4, 5);
  EXPECT_EQ(apply_gn(f, zero).values, f.values);
  const Matrix r1 = test::random_matrix(4, 5, rng), r2 = test::random_matrix(4, 5, rng);
  FeatureBatch zeros{Matrix::Zero(4, 5), f.labels};
  EXPECT_EQ(apply_gn(zeros, r1).values, r1);
  const auto twice = apply_gn(apply_gn(f, r1), r2).values;
  const auto once = apply_gn(f, r1 + r2).values;
  EXPECT_LT((twice - once).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(apply_gn(f, r1).labels, f.labels);
  EXPECT_THROW(apply_gn(f, Matrix::Zero(4, 4)), ValidationError);
}

TEST(ApplyGnMasked, FullMaskEmptyMaskAndSingleChannel) {
  Rng rng(4);
  FeatureBatch f{test::random_matrix(3, 4, rng), {0, 1, 1}};
  const Matrix r = test::random_matrix(3, 4, rng);
  EXPECT_EQ(apply_gn_masked(f, r, KernelMask::all(2, 4)).values, apply_gn(f, r).values);
  EXPECT_EQ(apply_gn_masked(f, r, KernelMask{{{}, {}}}).values, f.values);

  const double c = 0.3;
  const Matrix constant = Matrix::Constant(3, 4, c);
  const auto out = apply_gn_masked(f, constant, KernelMask{{{0}, {0}}}).values;
  for (Eigen::Index j = 0; j < 3; ++j) {
    EXPECT_DOUBLE_EQ(out(j, 0), f.values(j, 0) + c);
    for (Eigen::Index d = 1; d < 4; ++d) EXPECT_EQ(out(j, d), f.values(j, d));
  }
}

TEST(ApplyGnMasked, PositionsFollowChannels) {
  FeatureBatch f{Matrix::Zero(1, 6), {0}};
  const auto out = apply_gn_masked(f, Matrix::Ones(1, 6), KernelMask{{{1}}}, 2).values;
  Matrix expected(1, 6);
  expected << 0, 0, 1, 1, 0, 0;
  EXPECT_EQ(out, expected);
}

TEST(KernelMask, Validation) {
  EXPECT_NO_THROW((KernelMask{{{0, 2}, {1, 3}}}.validate(2, 4)));
  EXPECT_THROW((KernelMask{{{2, 0}, {1, 3}}}.validate(2, 4)), ValidationError);
  EXPECT_THROW((KernelMask{{{0, 0}, {1, 3}}}.validate(2, 4)), ValidationError);
  EXPECT_THROW((KernelMask{{{0, 4}, {1, 3}}}.validate(2, 4)), ValidationError);
  EXPECT_THROW((KernelMask{{{0, 2}}}.validate(2, 4)), ValidationError);
  EXPECT_THROW((KernelMask{{{0, 2}, {1}}}.validate(2, 4)), ValidationError);
}

TEST(ProjectParams, ClampsAndIsIdempotent) {
  ResidualParams p{Matrix::Constant(1, 1, -0.3), Matrix::Constant(1, 1, 1.7)};
  const auto q = project_params(p);
  EXPECT_EQ(q.scale(0, 0), 0.0);
  EXPECT_EQ(q.shift(0, 0), 1.0);
  EXPECT_TRUE(q.feasible());
  EXPECT_FALSE(p.feasible());

  const auto feasible = init_params(5, 2);
  const auto same = project_params(feasible);
  EXPECT_EQ(same.scale, feasible.scale);
  EXPECT_EQ(same.shift, feasible.shift);

  Rng rng(9);
  ResidualParams wild{test::random_matrix(4, 3, rng, 2.0), test::random_matrix(4, 3, rng, 2.0)};
  const auto once = project_params(wild);
  const auto twice = project_params(once);
  EXPECT_EQ(once.scale, twice.scale);
  EXPECT_EQ(once.shift, twice.shift);
  project_in_place(wild);
  EXPECT_EQ(wild.scale, once.scale);
}

TEST(ResidualGrad, MatchesFiniteDifferences) {
  Rng rng(12);
  const std::vector<int> labels = {0, 2, 1, 2, 2};
  for (int width : {1, 3}) {
    const int positions = 2;
    const int cols = width == 1 ? 6 : width * positions;
    ResidualParams p = init_params(3, 4, width);
    const Matrix noise = test::random_matrix(5, cols, rng);
    const Matrix weights = test::random_matrix(5, cols, rng);
    auto loss = [&](const ResidualParams& q) {
      return (residual_from_noise(q, labels, noise, width == 1 ? 1 : positions).array() * weights.array()).sum();
    };
    const auto g = residual_grad(p, labels, noise, weights, width == 1 ? 1 : positions);
    for (Matrix* m : {&p.scale, &p.shift}) {
      const Matrix& gm = m == &p.scale ? g.scale : g.shift;
      for (Eigen::Index i = 0; i < m->size(); ++i) {
        const double saved = m->data()[i];
        m->data()[i] = saved + 1e-6;
        const double up = loss(p);
        m->data()[i] = saved - 1e-6;
        const double down = loss(p);
        m->data()[i] = saved;
        EXPECT_LT(test::relative_error(gm.data()[i], (up - down) / 2e-6), 1e-6);
      }
    }
  }
}
