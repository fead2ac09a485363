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
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dbgp/error.hpp"

namespace dbgp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

inline constexpr double kLog2Pi = 1.8378770664093454836;  // ln(2*pi)

inline double softplus(double x) {
  return x > 30.0 ? x : (x < -30.0 ? std::exp(x) : std::log1p(std::exp(x)));
}
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
/// ln sigmoid(x), stable for large |x|.
inline double log_sigmoid(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}
/// Inverse of softplus, for initializing rho from a target scale.
inline double inverse_softplus(double y) {
  return y > 30.0 ? y : std::log(std::expm1(y));
}

inline Matrix softplus(const Matrix& x) {
  return x.unaryExpr([](double v) { return softplus(v); });
}

inline void require_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) throw NumericError("non-finite value in " + what);
}

/// Jitter schedule for factorizing covariance matrices: relative jitter
/// 1e-8 * mean(diag), escalated x10 up to 1e-4.
struct JitterPolicy {
  double initial = 1e-8;
  double maximum = 1e-4;
  bool always = true;  // add the initial jitter even if the plain factorization works
};

struct CholeskyResult {
  Matrix lower;
  double jitter = 0.0;  // absolute jitter added to the diagonal
};

inline CholeskyResult jittered_cholesky(const Matrix& k, const JitterPolicy& policy = {}) {
  if (k.rows() != k.cols()) throw DimensionError("cholesky of non-square matrix");
  require_finite(k, "covariance matrix");
  const double scale = k.rows() > 0 ? k.diagonal().mean() : 1.0;
  double rel = policy.always ? policy.initial : 0.0;
  while (true) {
    Matrix kj = k;
    kj.diagonal().array() += rel * scale;
    Eigen::LLT<Matrix> llt(kj);
    if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().diagonal().minCoeff() > 0.0)
      return {llt.matrixL().toDenseMatrix(), rel * scale};
    if (rel == 0.0) {
      rel = policy.initial;
    } else if (rel * 10.0 <= policy.maximum * (1.0 + 1e-12)) {
      rel *= 10.0;
    } else {
      throw NumericError("cholesky failed after jitter escalation to " + std::to_string(rel));
    }
  }
}

/// Reverse-mode derivative of the Cholesky factorization K = L L^T.
/// Given the gradient with respect to the lower factor, returns the symmetric
/// gradient with respect to K (to be contracted against the full dK).
inline Matrix cholesky_backward(const Matrix& lower, const Matrix& grad_lower) {
  Matrix p = (lower.transpose() * grad_lower.triangularView<Eigen::Lower>().toDenseMatrix())
                 .triangularView<Eigen::Lower>();
  Matrix sym = 0.5 * p;
  sym.triangularView<Eigen::StrictlyUpper>() =
      0.5 * p.triangularView<Eigen::StrictlyLower>().toDenseMatrix().transpose();
  // L^{-T} sym L^{-1}
  Matrix out = lower.transpose().triangularView<Eigen::Upper>().solve(sym);
  out = lower.transpose().triangularView<Eigen::Upper>().solve(out.transpose()).transpose();
  return out;
}

/// Gauss-Hermite rule for integrals of the form  int exp(-t^2) g(t) dt.
struct GaussHermite {
  Vector nodes;
  Vector weights;
};

inline GaussHermite gauss_hermite(int n) {
  // Golub-Welsch on the symmetric Jacobi matrix of the physicists' Hermite polynomials.
  Matrix jacobi = Matrix::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    jacobi(i, i - 1) = jacobi(i - 1, i) = std::sqrt(i / 2.0);
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(jacobi);
  GaussHermite gh;
  gh.nodes = es.eigenvalues();
  gh.weights = std::sqrt(std::numbers::pi) * es.eigenvectors().row(0).array().square().transpose();
  return gh;
}

}  // namespace dbgp
