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

#include <cmath>
#include <string>

#include "dbgp/error.hpp"
#include "dbgp/linalg.hpp"

namespace dbgp::gp {

/// Squared-exponential kernel hyperparameters, stored as logs so that
/// unconstrained optimization keeps them positive.
struct RbfKernelParams {
  Vector log_lengthscale;
  double log_outputscale = 0.0;
  double log_noise_var = std::log(1e-2);

  static RbfKernelParams from_values(const Vector& lengthscale, double outputscale, double noise_var) {
    if (lengthscale.size() == 0) throw ConfigError("gp.lengthscale", "needs at least one dimension");
    if ((lengthscale.array() <= 0.0).any() || !lengthscale.allFinite())
      throw ConfigError("gp.lengthscale", "must be positive");
    if (!(outputscale > 0.0) || !std::isfinite(outputscale))
      throw ConfigError("gp.outputscale", "must be positive");
    if (!(noise_var >= 0.0) || !std::isfinite(noise_var))
      throw ConfigError("gp.noise_var", "must be non-negative");
    RbfKernelParams p;
    p.log_lengthscale = lengthscale.array().log().matrix();
    p.log_outputscale = std::log(outputscale);
    p.log_noise_var = std::log(noise_var);  // -inf encodes a noiseless likelihood
    return p;
  }
  static RbfKernelParams isotropic(int dims, double lengthscale, double outputscale, double noise_var) {
    return from_values(Vector::Constant(dims, lengthscale), outputscale, noise_var);
  }

  int dims() const { return static_cast<int>(log_lengthscale.size()); }
  Vector lengthscale() const { return log_lengthscale.array().exp().matrix(); }
  double lengthscale(int d) const { return std::exp(log_lengthscale(d)); }
  double outputscale() const { return std::exp(log_outputscale); }
  double noise_var() const { return std::exp(log_noise_var); }
};

/// exp(-sum_d (x1_d - x2_d)^2 / (2 l_d^2)) without the output scale.
inline Matrix rbf_correlation(const Matrix& x1, const Matrix& x2, const Vector& lengthscale) {
  if (x1.cols() != x2.cols() || x1.cols() != lengthscale.size())
    throw DimensionError("rbf kernel: input dimension " + std::to_string(x1.cols()) + " vs " +
                         std::to_string(x2.cols()) + " vs lengthscale " + std::to_string(lengthscale.size()));
  Matrix out(x1.rows(), x2.rows());
  const RowVector inv_l = lengthscale.cwiseInverse().transpose();
  for (Eigen::Index i = 0; i < x1.rows(); ++i) {
    const RowVector xi = x1.row(i).cwiseProduct(inv_l);
    for (Eigen::Index j = 0; j < x2.rows(); ++j) {
      out(i, j) = std::exp(-0.5 * (xi - x2.row(j).cwiseProduct(inv_l)).squaredNorm());
    }
  }
  return out;
}

/// K[i,j] = outputscale * exp(-sum_d (x1_id - x2_jd)^2 / (2 l_d^2)).
inline Matrix rbf_kernel_matrix(const Matrix& x1, const Matrix& x2, const RbfKernelParams& params) {
  if (!std::isfinite(params.log_outputscale) || !params.log_lengthscale.allFinite())
    throw ConfigError("gp.kernel", "non-positive or non-finite hyperparameters");
  return params.outputscale() * rbf_correlation(x1, x2, params.lengthscale());
}

/// Gradients of a scalar objective with respect to the log-hyperparameters.
struct KernelGradient {
  Vector log_lengthscale;
  double log_outputscale = 0.0;
  double log_noise_var = 0.0;
};

/// Contracts a gradient G with respect to K = rbf(x1, x2) into
/// log-lengthscale gradients.
inline Vector rbf_log_lengthscale_grad(const Matrix& g, const Matrix& k, const Matrix& x1,
                                       const Matrix& x2, const Vector& lengthscale) {
  Vector out = Vector::Zero(lengthscale.size());
  for (Eigen::Index d = 0; d < lengthscale.size(); ++d) {
    const double inv_l2 = 1.0 / (lengthscale(d) * lengthscale(d));
    double acc = 0.0;
    for (Eigen::Index i = 0; i < x1.rows(); ++i)
      for (Eigen::Index j = 0; j < x2.rows(); ++j) {
        const double diff = x1(i, d) - x2(j, d);
        acc += g(i, j) * k(i, j) * diff * diff * inv_l2;
      }
    out(d) = acc;
  }
  return out;
}

namespace detail {
inline void check_regression_inputs(const Vector& y, const Matrix& x) {
  if (y.size() != x.rows())
    throw DimensionError("targets (" + std::to_string(y.size()) + ") and inputs (" +
                         std::to_string(x.rows()) + ") differ in length");
  if (y.size() == 0) throw DimensionError("empty regression problem");
}
}  // namespace detail

inline constexpr Eigen::Index kDefaultDenseLimit = 2048;

/// Exact GP log marginal likelihood,
///   -1/2 y^T K_n^{-1} y - 1/2 ln|K_n| - N/2 ln 2 pi,  K_n = K_ff + noise I,
/// via Cholesky. Jitter is only added if the plain factorization fails.
inline double exact_log_marginal(const Vector& y, const Matrix& x, const RbfKernelParams& params,
                                 Eigen::Index dense_limit = kDefaultDenseLimit) {
  detail::check_regression_inputs(y, x);
  if (y.size() > dense_limit)
    throw ConfigError("gp.dense_limit", "N=" + std::to_string(y.size()) + " exceeds the dense limit");
  Matrix kn = rbf_kernel_matrix(x, x, params);
  kn.diagonal().array() += params.noise_var();
  const auto chol = jittered_cholesky(kn, JitterPolicy{1e-8, 1e-4, false});
  const Vector alpha = chol.lower.triangularView<Eigen::Lower>().solve(y);
  const double logdet = 2.0 * chol.lower.diagonal().array().log().sum();
  return -0.5 * alpha.squaredNorm() - 0.5 * logdet - 0.5 * static_cast<double>(y.size()) * kLog2Pi;
}

inline KernelGradient exact_log_marginal_gradient(const Vector& y, const Matrix& x,
                                                  const RbfKernelParams& params) {
  detail::check_regression_inputs(y, x);
  const Matrix kff = rbf_kernel_matrix(x, x, params);
  Matrix kn = kff;
  kn.diagonal().array() += params.noise_var();
  const auto chol = jittered_cholesky(kn, JitterPolicy{1e-8, 1e-4, false});
  Eigen::LLT<Matrix> llt;
  llt.compute(chol.lower * chol.lower.transpose());
  const Vector alpha = llt.solve(y);
  const Matrix kinv = llt.solve(Matrix::Identity(y.size(), y.size()));
  const Matrix g = 0.5 * (alpha * alpha.transpose() - kinv);
  KernelGradient out;
  out.log_lengthscale = rbf_log_lengthscale_grad(g, kff, x, x, params.lengthscale());
  out.log_outputscale = g.cwiseProduct(kff).sum();
  out.log_noise_var = params.noise_var() * g.trace();
  return out;
}

}  // namespace dbgp::gp
