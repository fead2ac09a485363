/*
 * Copyright 2026 The dbgp Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include <gtest/gtest.h>

#include <cmath>

#include "dbgp/bayes.hpp"
#include "test_util.hpp"

using namespace dbgp;
using dbgp::testing::matrix_grad_error;

namespace {

MeanFieldTensor random_tensor(Rng& rng, int rows, int cols) {
  MeanFieldTensor mf;
  mf.mu = rng.normal_matrix(rows, cols);
  mf.rho = rng.normal_matrix(rows, cols);
  mf.prior_std = 0.3 + rng.uniform();
  return mf;
}

// Monte Carlo oracle for E_q[ln q(w) - ln p(w)]; returns (mean, standard error).
std::pair<double, double> mc_kl(const MeanFieldTensor& mf, int draws, Rng& rng) {
  const Matrix s = mf.scale();
  double sum = 0, sumsq = 0;
  for (int d = 0; d < draws; ++d) {
    double v = 0;
    for (Eigen::Index i = 0; i < mf.mu.size(); ++i) {
      const double e = rng.normal();
      const double w = mf.mu.data()[i] + s.data()[i] * e;
      const double lq = -0.5 * e * e - std::log(s.data()[i]);
      const double lp = -0.5 * (w / mf.prior_std) * (w / mf.prior_std) - std::log(mf.prior_std);
      v += lq - lp;
    }
    sum += v;
    sumsq += v * v;
  }
  const double mean = sum / draws;
  const double var = (sumsq - draws * mean * mean) / (draws - 1);
  return {mean, std::sqrt(var / draws)};
}

}  // namespace

TEST(SampleMeanField, ZeroNoiseAndDegenerateScale) {
  Rng rng(1);
  auto mf = random_tensor(rng, 3, 4);
  EXPECT_EQ(sample_mean_field(mf, Matrix::Zero(3, 4)), mf.mu);
  mf.rho.setConstant(-800.0);
  EXPECT_EQ(sample_mean_field(mf, rng.normal_matrix(3, 4)), mf.mu);
}

TEST(SampleMeanField, SoftplusOfZero) {
  MeanFieldTensor mf{Matrix::Zero(1, 1), Matrix::Zero(1, 1), 1.0};
  EXPECT_NEAR(sample_mean_field(mf, Matrix::Ones(1, 1))(0, 0), 0.6931, 1e-4);
  EXPECT_DOUBLE_EQ(sample_mean_field(mf, Matrix::Ones(1, 1))(0, 0), std::log(2.0));
}

TEST(SampleMeanField, ShapeMismatch) {
  MeanFieldTensor mf{Matrix::Zero(2, 2), Matrix::Zero(2, 2), 1.0};
  EXPECT_THROW(sample_mean_field(mf, Matrix::Zero(2, 3)), DimensionError);
}

TEST(SampleMeanField, LinearInNoise) {
  Rng rng(2);
  const auto mf = random_tensor(rng, 4, 3);
  const Matrix e1 = rng.normal_matrix(4, 3), e2 = rng.normal_matrix(4, 3);
  const double a = 1.7;
  const Matrix lhs = sample_mean_field(mf, a * e1 + e2) - sample_mean_field(mf, e2);
  const Matrix rhs = a * (sample_mean_field(mf, e1) - mf.mu);
  EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(KlMeanField, ClosedFormCases) {
  const double p = 0.374;
  MeanFieldTensor q_eq_p{Matrix::Zero(2, 3), Matrix::Constant(2, 3, inverse_softplus(p)), p};
  EXPECT_NEAR(kl_mean_field(q_eq_p), 0.0, 1e-14);
  MeanFieldTensor one{Matrix::Ones(1, 1), Matrix::Constant(1, 1, inverse_softplus(1.0)), 1.0};
  EXPECT_NEAR(kl_mean_field(one), 0.5, 1e-14);
}

TEST(KlMeanField, MatchesMonteCarlo) {
  Rng rng(3);
  for (int t = 0; t < 5; ++t) {
    const auto mf = random_tensor(rng, 2, 5);
    const auto [mean, se] = mc_kl(mf, 100000, rng);
    EXPECT_LT(std::abs(kl_mean_field(mf) - mean), 3 * se);
  }
}

TEST(KlMeanField, NonNegativeAndZeroOnlyAtPrior) {
  Rng rng(4);
  for (int t = 0; t < 10000; ++t) {
    MeanFieldTensor mf{3.0 * rng.normal_matrix(1, 3), 3.0 * rng.normal_matrix(1, 3), 0.05 + 3 * rng.uniform()};
    EXPECT_GE(kl_mean_field(mf), 0.0);
  }
  MeanFieldTensor near{Matrix::Constant(1, 1, 1e-3), Matrix::Constant(1, 1, inverse_softplus(1.0)), 1.0};
  EXPECT_GT(kl_mean_field(near), 0.0);
}

TEST(KlMeanField, NonFiniteIsNumericError) {
  MeanFieldTensor mf{Matrix::Constant(1, 1, std::nan("")), Matrix::Zero(1, 1), 1.0};
  EXPECT_THROW(kl_mean_field(mf), NumericError);
  mf.mu.setZero();
  mf.prior_std = 0.0;
  EXPECT_THROW(kl_mean_field(mf), ConfigError);
}

TEST(KlMeanField, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  const auto mf = random_tensor(rng, 3, 3);
  const auto g = kl_mean_field_gradient(mf);
  EXPECT_LT(matrix_grad_error(mf.mu, g.mu,
                              [&](const Matrix& m) { return kl_mean_field({m, mf.rho, mf.prior_std}); }),
            1e-6);
  EXPECT_LT(matrix_grad_error(mf.rho, g.rho,
                              [&](const Matrix& r) { return kl_mean_field({mf.mu, r, mf.prior_std}); }),
            1e-6);
}

TEST(KlMeanField, LargerPriorLowersKlWhenScaleBelowPrior) {
  Rng rng(6);
  for (int t = 0; t < 1000; ++t) {
    const double s = 0.01 + rng.uniform();
    const double mu = rng.normal();
    const double p1 = s + rng.uniform(), p2 = p1 + 0.5 * rng.uniform();
    // Closed form is decreasing in prior_std while prior_std^2 < s^2 + mu^2.
    if (p2 * p2 <= s * s + mu * mu) {
      EXPECT_LE(kl_gaussian_element(mu, s, p2), kl_gaussian_element(mu, s, p1));
    }
  }
}

TEST(BayesianDense, DegenerateScaleAndZeroInput) {
  Rng rng(7);
  auto w = MeanFieldTensor::from_mean(rng.normal_matrix(3, 2), 1.0);
  auto b = MeanFieldTensor::from_mean(rng.normal_matrix(1, 2), 1.0);
  const Matrix x = rng.normal_matrix(4, 3);
  w.rho.setConstant(-800);
  b.rho.setConstant(-800);
  Matrix expected = x * w.mu;
  expected.rowwise() += b.mu.row(0);
  EXPECT_LT((bayesian_dense_forward(x, w, b, rng) - expected).cwiseAbs().maxCoeff(), 1e-14);

  b.rho.setConstant(0.0);
  Rng a(9), c(9);
  const Matrix out = bayesian_dense_forward(Matrix::Zero(2, 3), w, b, a);
  c.normal_matrix(3, 2);
  const Matrix realized_bias = sample_mean_field(b, c.normal_matrix(1, 2));
  EXPECT_LT((out.row(0) - realized_bias.row(0)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_EQ(out.row(0), out.row(1));
}

TEST(BayesianDense, OutputVarianceMatchesPropagation) {
  Rng rng(8);
  MeanFieldTensor w{rng.normal_matrix(3, 2), rng.normal_matrix(3, 2), 1.0};
  MeanFieldTensor b{rng.normal_matrix(1, 2), rng.normal_matrix(1, 2), 1.0};
  Matrix x(1, 3);
  x << 0.5, -1.0, 2.0;
  const int draws = 10000;
  Matrix outs(draws, 2);
  for (int d = 0; d < draws; ++d) outs.row(d) = bayesian_dense_forward(x, w, b, rng);
  const Matrix sw = w.scale(), sb = b.scale();
  for (int j = 0; j < 2; ++j) {
    const double mean = outs.col(j).mean();
    const double var = (outs.col(j).array() - mean).square().sum() / (draws - 1);
    const double expected = (sw.col(j).array().square() * x.row(0).transpose().array().square()).sum() +
                            sb(0, j) * sb(0, j);
    EXPECT_NEAR(var / expected, 1.0, 0.1);
  }
}

TEST(BayesianDense, InitialScaleIsTenthOfPrior) {
  const auto mf = MeanFieldTensor::from_mean(Matrix::Ones(2, 2), 0.374);
  EXPECT_NEAR(mf.scale()(0, 0), 0.0374, 1e-15);
}
