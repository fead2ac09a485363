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

// Collapsed variational free energy bound for sparse GP regression.

#include <cmath>

#include "dbgp/error.hpp"
#include "dbgp/gp/kernel.hpp"
#include "dbgp/gp/svgp.hpp"
#include "dbgp/linalg.hpp"

namespace dbgp::gp {

namespace detail {

/// A with A^T A = K_fu K_uu^+ K_uf for a point inducing set. Directions of
/// K_uu with eigenvalue below rel_floor * max are dropped instead of
/// jittered, which keeps Q_ff = K_ff exact when Z = X.
inline Matrix projected_cross_features(const Matrix& z, const Matrix& x, const RbfKernelParams& params,
                                       double rel_floor = 1e-13) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(rbf_kernel_matrix(z, z, params));
  if (eig.info() != Eigen::Success) throw NumericError("vfe: eigendecomposition of K_uu failed");
  const Vector& lam = eig.eigenvalues();  // ascending
  const double floor = rel_floor * lam(lam.size() - 1);
  Eigen::Index keep = 0;
  while (keep < lam.size() && lam(lam.size() - 1 - keep) > floor) ++keep;
  const Matrix u = eig.eigenvectors().rightCols(keep);
  const Vector inv_sqrt = lam.tail(keep).array().rsqrt();
  return inv_sqrt.asDiagonal() * (u.transpose() * rbf_kernel_matrix(z, x, params));
}

}  // namespace detail

struct VfeTerms {
  double elbo = 0.0;
  double trace = 0.0;  // Tr(K_ff - Q_ff)
};

/// -1/2 y^T Q_n^{-1} y - 1/2 ln|Q_n| - N/2 ln 2 pi - t / (2 noise), with
/// Q_n = Q_ff + noise I. Uses Woodbury and the determinant lemma on the
/// M x M matrix B = I + A A^T / noise, A = K_uu^{-1/2} K_uf, so no N x N matrix
/// is formed. Point sets use projected_cross_features unless the policy asks
/// for jitter always; otherwise jitter is added only if factorization fails.
inline VfeTerms vfe_terms(const Vector& y, const Matrix& x, const Inducing& inducing, const RbfKernelParams& params,
                          const JitterPolicy& jitter = JitterPolicy{1e-8, 1e-4, false}) {
  detail::check_regression_inputs(y, x);
  const double noise = params.noise_var();
  if (!(noise > 0.0)) throw ConfigError("gp.noise_var", "sparse bound needs positive noise");
  if (inducing_dims(inducing) != x.cols()) throw DimensionError("inducing inputs and data differ in dimension");
  Matrix a;
  const auto* pts = std::get_if<InducingPoints>(&inducing);
  if (pts && !jitter.always) {
    a = detail::projected_cross_features(pts->z, x, params);
  } else {
    Features features(inducing, params.lengthscale(), jitter);
    a = std::sqrt(params.outputscale()) * features.forward(x);
  }
  const auto m = a.rows();
  const auto n = static_cast<double>(y.size());

  Matrix b = Matrix::Identity(m, m);
  b.selfadjointView<Eigen::Lower>().rankUpdate(a, 1.0 / noise);
  b = b.selfadjointView<Eigen::Lower>();
  Eigen::LLT<Matrix> llt(b);
  if (llt.info() != Eigen::Success) throw NumericError("vfe: I + A A^T / noise not positive definite");
  const Vector c = llt.matrixL().solve(a * y) / noise;
  const double quad = y.squaredNorm() / noise - c.squaredNorm();
  const double logdet = n * std::log(noise) + 2.0 * llt.matrixLLT().diagonal().array().log().sum();

  VfeTerms out;
  out.trace = n * params.outputscale() - a.squaredNorm();
  out.elbo = -0.5 * quad - 0.5 * logdet - 0.5 * n * kLog2Pi - out.trace / (2.0 * noise);
  return out;
}

inline double vfe_elbo(const Vector& y, const Matrix& x, const Inducing& inducing, const RbfKernelParams& params,
                       const JitterPolicy& jitter = JitterPolicy{1e-8, 1e-4, false}) {
  return vfe_terms(y, x, inducing, params, jitter).elbo;
}

}  // namespace dbgp::gp
