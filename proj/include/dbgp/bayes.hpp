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
#pragma once

// Mean-field Gaussian weight blocks: q(w) = N(mu, diag(softplus(rho)^2)) with
// an isotropic zero-mean Gaussian prior.

#include <cmath>
#include <string>

#include "dbgp/autodiff.hpp"
#include "dbgp/error.hpp"
#include "dbgp/linalg.hpp"
#include "dbgp/rng.hpp"

namespace dbgp {

struct MeanFieldTensor {
  Matrix mu;
  Matrix rho;
  double prior_std = 1.0;

  Matrix scale() const { return softplus(rho); }

  /// Means copied from `mean`; scales set to prior_std / 10.
  static MeanFieldTensor from_mean(Matrix mean, double prior_std) {
    MeanFieldTensor mf;
    mf.rho = Matrix::Constant(mean.rows(), mean.cols(), inverse_softplus(prior_std / 10.0));
    mf.mu = std::move(mean);
    mf.prior_std = prior_std;
    return mf;
  }
};

inline double kl_gaussian_element(double mu, double s, double prior_std) {
  return std::log(prior_std / s) + (s * s + mu * mu) / (2.0 * prior_std * prior_std) - 0.5;
}

/// mu + softplus(rho) * eps.
inline Matrix sample_mean_field(const MeanFieldTensor& mf, const Matrix& eps) {
  if (eps.rows() != mf.mu.rows() || eps.cols() != mf.mu.cols() || mf.rho.rows() != mf.mu.rows() ||
      mf.rho.cols() != mf.mu.cols())
    throw DimensionError("sample_mean_field: eps shape differs from mu");
  return mf.mu + mf.scale().cwiseProduct(eps);
}

/// Closed-form sum over elements of KL(q || p). Always >= 0.
inline double kl_mean_field(const MeanFieldTensor& mf) {
  if (!(mf.prior_std > 0.0)) throw ConfigError("prior_std", "must be positive");
  require_finite(mf.mu, "variational mean");
  require_finite(mf.rho, "variational rho");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < mf.mu.size(); ++i)
    kl += kl_gaussian_element(mf.mu.data()[i], softplus(mf.rho.data()[i]), mf.prior_std);
  return kl;
}

struct MeanFieldGradient {
  Matrix mu;
  Matrix rho;
};

inline MeanFieldGradient kl_mean_field_gradient(const MeanFieldTensor& mf) {
  const double p2 = mf.prior_std * mf.prior_std;
  MeanFieldGradient g{mf.mu / p2, Matrix(mf.rho.rows(), mf.rho.cols())};
  for (Eigen::Index i = 0; i < mf.rho.size(); ++i) {
    const double r = mf.rho.data()[i];
    const double s = softplus(r);
    g.rho.data()[i] = (-1.0 / s + s / p2) * sigmoid(r);
  }
  return g;
}

/// One realization of (W, b) per call, shared by every row of `input`.
inline Matrix bayesian_dense_forward(const Matrix& input, const MeanFieldTensor& weight,
                                     const MeanFieldTensor& bias, Rng& rng) {
  if (input.cols() != weight.mu.rows()) throw DimensionError("bayesian_dense_forward: input width");
  if (bias.mu.rows() != 1 || bias.mu.cols() != weight.mu.cols())
    throw DimensionError("bayesian_dense_forward: bias must be 1 x out");
  const Matrix w = sample_mean_field(weight, rng.normal_matrix(weight.mu.rows(), weight.mu.cols()));
  const Matrix b = sample_mean_field(bias, rng.normal_matrix(1, bias.mu.cols()));
  Matrix out = input * w;
  out.rowwise() += b.row(0);
  return out;
}

namespace ad {

/// Reparameterized draw mu + softplus(rho) * eps on the tape.
inline Var reparameterize(Var mu, Var rho, const Matrix& eps) {
  detail::check_same_tape(mu, rho);
  detail::check_shape(mu.value(), rho.value(), "reparameterize");
  detail::check_shape(mu.value(), eps, "reparameterize eps");
  Tape& t = *mu.tape;
  Matrix out = mu.value() + softplus(rho.value()).cwiseProduct(eps);
  Matrix dscale = rho.value().unaryExpr([](double r) { return sigmoid(r); }).cwiseProduct(eps);
  return t.push(std::move(out), t.needs_grad({mu, rho}), [mu, rho, dscale](Tape& t, const Matrix& g) {
    t.accumulate(mu.id, g);
    if (t.needs_grad(rho.id)) t.accumulate(rho.id, g.cwiseProduct(dscale));
  });
}

inline Var kl_mean_field(Var mu, Var rho, double prior_std) {
  detail::check_same_tape(mu, rho);
  MeanFieldTensor mf{mu.value(), rho.value(), prior_std};
  const double kl = dbgp::kl_mean_field(mf);
  auto grad = kl_mean_field_gradient(mf);
  Tape& t = *mu.tape;
  return t.push(Matrix::Constant(1, 1, kl), t.needs_grad({mu, rho}),
                [mu, rho, grad](Tape& t, const Matrix& g) {
                  t.accumulate(mu.id, g(0, 0) * grad.mu);
                  t.accumulate(rho.id, g(0, 0) * grad.rho);
                });
}

}  // namespace ad
}  // namespace dbgp
