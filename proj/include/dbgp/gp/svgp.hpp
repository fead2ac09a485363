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

// Whitened sparse variational GP: inducing features, latent predictive
// moments, expected log-likelihoods, and the variational objective with its
// gradients.
//
// Both inducing representations reduce to per-point feature vectors phi_i
// (length M) such that, with s^2 the output scale,
//   a_i = s * phi_i = K_uu^{-1/2} k_u(x_i)
// for free inducing points, and a_i = s * (kron_d L_d^T) w_i for a grid, where
// K_uu = s^2 kron_d (L_d L_d^T) and w_i are the interpolation weights.

#include <cmath>
#include <variant>
#include <vector>

#include "dbgp/error.hpp"
#include "dbgp/gp/grid.hpp"
#include "dbgp/gp/kernel.hpp"
#include "dbgp/linalg.hpp"
#include "dbgp/rng.hpp"

namespace dbgp::gp {

/// Free inducing locations, M x D.
struct InducingPoints {
  Matrix z;
  bool operator==(const InducingPoints& o) const { return z == o.z; }
};

using Inducing = std::variant<InducingPoints, InducingGrid>;

inline Eigen::Index inducing_size(const Inducing& u) {
  return std::visit([](const auto& v) -> Eigen::Index {
    if constexpr (std::is_same_v<std::decay_t<decltype(v)>, InducingPoints>)
      return v.z.rows();
    else
      return v.size();
  }, u);
}

inline int inducing_dims(const Inducing& u) {
  return std::visit([](const auto& v) -> int {
    if constexpr (std::is_same_v<std::decay_t<decltype(v)>, InducingPoints>)
      return static_cast<int>(v.z.cols());
    else
      return v.dims();
  }, u);
}

/// q(v) = N(m, L L^T) over whitened inducing values v = K_uu^{-1/2} u, whose
/// prior is N(0, I).
struct WhitenedVariationalState {
  Vector m;
  Matrix L;

  static WhitenedVariationalState prior(Eigen::Index size) {
    return {Vector::Zero(size), Matrix::Identity(size, size)};
  }
  Eigen::Index size() const { return m.size(); }
  void validate() const {
    if (L.rows() != m.size() || L.cols() != m.size()) throw DimensionError("variational state shape");
    if ((L.diagonal().array() <= 0.0).any()) throw NumericError("variational factor needs a positive diagonal");
  }
};

/// Unconstrained storage for L: strictly-lower entries as-is, diagonal as logs.
inline Matrix lower_from_raw(const Matrix& raw) {
  Matrix l = raw.triangularView<Eigen::StrictlyLower>();
  l.diagonal() = raw.diagonal().array().exp().matrix();
  return l;
}
inline Matrix raw_from_lower(const Matrix& l) {
  Matrix raw = l.triangularView<Eigen::StrictlyLower>();
  raw.diagonal() = l.diagonal().array().log().matrix();
  return raw;
}
/// Chain rule from d/dL to d/d(raw).
inline Matrix raw_gradient(const Matrix& l, const Matrix& grad_l) {
  Matrix g = grad_l.triangularView<Eigen::StrictlyLower>();
  g.diagonal() = grad_l.diagonal().cwiseProduct(l.diagonal());
  return g;
}

struct FeatureGradient {
  Matrix x;                 // B x D
  Vector log_lengthscale;   // D
  Matrix z;                 // M x D, empty for grids
};

/// phi_i = Lc^{-1} c_u(x_i) with Lc the jittered Cholesky factor of the unit
/// scale correlation among inducing points.
class PointFeatures {
 public:
  PointFeatures(const InducingPoints& u, const Vector& lengthscale, const JitterPolicy& jitter = {})
      : z_(u.z), ls_(lengthscale) {
    cuu_ = rbf_correlation(z_, z_, ls_);
    chol_ = jittered_cholesky(cuu_, jitter).lower;
  }

  Matrix forward(const Matrix& x) {
    x_ = x;
    cux_ = rbf_correlation(z_, x, ls_);
    phi_ = chol_.triangularView<Eigen::Lower>().solve(cux_);
    return phi_;
  }

  FeatureGradient backward(const Matrix& gphi) const {
    FeatureGradient out;
    const Matrix g_cux = chol_.transpose().triangularView<Eigen::Upper>().solve(gphi);
    Matrix g_chol = -(g_cux * phi_.transpose());
    g_chol = g_chol.triangularView<Eigen::Lower>();
    const Matrix g_cuu = cholesky_backward(chol_, g_chol);

    out.log_lengthscale = rbf_log_lengthscale_grad(g_cux, cux_, z_, x_, ls_) +
                          rbf_log_lengthscale_grad(g_cuu, cuu_, z_, z_, ls_);
    const auto d_count = ls_.size();
    out.x = Matrix::Zero(x_.rows(), d_count);
    out.z = Matrix::Zero(z_.rows(), d_count);
    for (Eigen::Index d = 0; d < d_count; ++d) {
      const double inv_l2 = 1.0 / (ls_(d) * ls_(d));
      for (Eigen::Index m = 0; m < z_.rows(); ++m) {
        for (Eigen::Index i = 0; i < x_.rows(); ++i) {
          const double c = g_cux(m, i) * cux_(m, i) * (z_(m, d) - x_(i, d)) * inv_l2;
          out.x(i, d) += c;
          out.z(m, d) -= c;
        }
        for (Eigen::Index j = 0; j < z_.rows(); ++j)
          out.z(m, d) += 2.0 * g_cuu(m, j) * cuu_(m, j) * (z_(j, d) - z_(m, d)) * inv_l2;
      }
    }
    return out;
  }

 private:
  Matrix z_;
  Vector ls_;
  Matrix cuu_;
  Matrix chol_;
  Matrix x_;
  Matrix cux_;
  Matrix phi_;
};

/// phi_i = kron_d (Lc_d^T w_{d,i}) with per-dimension jittered Cholesky
/// factors Lc_d of the unit-scale Toeplitz correlation on the grid.
class GridFeatures {
 public:
  GridFeatures(const InducingGrid& grid, const Vector& lengthscale, const JitterPolicy& jitter = {})
      : grid_(grid), ls_(lengthscale) {
    if (lengthscale.size() != grid.dims()) throw DimensionError("grid/lengthscale dimension mismatch");
    for (int d = 0; d < grid.dims(); ++d) {
      corr_.push_back(toeplitz_dense(grid.correlation_first_column(d, ls_(d))));
      chol_.push_back(jittered_cholesky(corr_.back(), jitter).lower);
    }
  }

  Matrix forward(const Matrix& x) {
    interp_ = interpolation_weights(x, grid_);
    const int dims = grid_.dims();
    const auto n = x.rows();
    b_.assign(static_cast<std::size_t>(dims), Matrix());
    for (int d = 0; d < dims; ++d) {
      const auto& l = chol_[static_cast<std::size_t>(d)];
      Matrix bd(grid_.count(d), n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const int a = interp_.lower_index(i, d);
        const double t = interp_.fraction(i, d);
        bd.col(i) = ((1.0 - t) * l.row(a) + t * l.row(a + 1)).transpose();
      }
      b_[static_cast<std::size_t>(d)] = std::move(bd);
    }
    phi_ = Matrix(grid_.size(), n);
    for (Eigen::Index i = 0; i < n; ++i) phi_.col(i) = kron_column(i);
    return phi_;
  }

  FeatureGradient backward(const Matrix& gphi) const {
    const int dims = grid_.dims();
    const auto n = gphi.cols();
    FeatureGradient out;
    out.x = Matrix::Zero(n, dims);
    out.log_lengthscale = Vector::Zero(dims);
    std::vector<Matrix> g_chol;
    for (int d = 0; d < dims; ++d) g_chol.push_back(Matrix::Zero(grid_.count(d), grid_.count(d)));

    for (Eigen::Index i = 0; i < n; ++i) {
      for (int d = 0; d < dims; ++d) {
        const Vector gb = contract_except(gphi.col(i), i, d);
        const auto& l = chol_[static_cast<std::size_t>(d)];
        const int a = interp_.lower_index(i, d);
        const double t = interp_.fraction(i, d);
        auto& gl = g_chol[static_cast<std::size_t>(d)];
        gl.row(a) += (1.0 - t) * gb.transpose();
        gl.row(a + 1) += t * gb.transpose();
        out.x(i, d) = (l.row(a + 1) - l.row(a)).dot(gb.transpose()) / grid_.spacing(d);
      }
    }
    for (int d = 0; d < dims; ++d) {
      const auto& l = chol_[static_cast<std::size_t>(d)];
      const auto& c = corr_[static_cast<std::size_t>(d)];
      const Matrix gc = cholesky_backward(l, g_chol[static_cast<std::size_t>(d)]);
      const double h = grid_.spacing(d);
      const double inv_l2 = 1.0 / (ls_(d) * ls_(d));
      double acc = 0.0;
      for (Eigen::Index r = 0; r < c.rows(); ++r)
        for (Eigen::Index s = 0; s < c.cols(); ++s) {
          const double diff = static_cast<double>(r - s) * h;
          acc += gc(r, s) * c(r, s) * diff * diff * inv_l2;
        }
      out.log_lengthscale(d) = acc;
    }
    return out;
  }

 private:
  Vector kron_column(Eigen::Index i) const {
    Vector acc = b_[0].col(i);
    for (std::size_t d = 1; d < b_.size(); ++d) {
      const Vector& next = b_[d].col(i);
      Vector k(acc.size() * next.size());
      for (Eigen::Index p = 0; p < acc.size(); ++p) k.segment(p * next.size(), next.size()) = acc(p) * next;
      acc = std::move(k);
    }
    return acc;
  }

  /// Gradient with respect to b_d of <g, kron_e b_e> for point i.
  Vector contract_except(const Vector& g, Eigen::Index i, int d) const {
    const int dims = grid_.dims();
    Vector out = Vector::Zero(grid_.count(d));
    const Eigen::Index total = g.size();
    for (Eigen::Index flat = 0; flat < total; ++flat) {
      if (g(flat) == 0.0) continue;
      Eigen::Index rem = flat;
      double prod = g(flat);
      int idx_d = 0;
      for (int e = dims - 1; e >= 0; --e) {
        const int idx = static_cast<int>(rem % grid_.count(e));
        rem /= grid_.count(e);
        if (e == d)
          idx_d = idx;
        else
          prod *= b_[static_cast<std::size_t>(e)](idx, i);
      }
      out(idx_d) += prod;
    }
    return out;
  }

  const InducingGrid& grid_;
  Vector ls_;
  std::vector<Matrix> corr_;
  std::vector<Matrix> chol_;
  SparseInterpolation interp_;
  std::vector<Matrix> b_;
  Matrix phi_;
};

/// Feature map over either inducing representation.
class Features {
 public:
  Features(const Inducing& u, const Vector& lengthscale, const JitterPolicy& jitter = {}) {
    if (std::holds_alternative<InducingPoints>(u))
      impl_.emplace<PointFeatures>(std::get<InducingPoints>(u), lengthscale, jitter);
    else
      impl_.emplace<GridFeatures>(std::get<InducingGrid>(u), lengthscale, jitter);
  }
  Matrix forward(const Matrix& x) {
    return std::visit([&](auto& f) -> Matrix {
      if constexpr (std::is_same_v<std::decay_t<decltype(f)>, std::monostate>)
        throw NumericError("uninitialized features");
      else
        return f.forward(x);
    }, impl_);
  }
  FeatureGradient backward(const Matrix& gphi) const {
    return std::visit([&](const auto& f) -> FeatureGradient {
      if constexpr (std::is_same_v<std::decay_t<decltype(f)>, std::monostate>)
        throw NumericError("uninitialized features");
      else
        return f.backward(gphi);
    }, impl_);
  }

 private:
  std::variant<std::monostate, PointFeatures, GridFeatures> impl_;
};

struct LatentMoments {
  Vector mean;
  Vector var;
};

/// mean_i = s phi_i^T m,  var_i = s^2 (1 - phi_i^T phi_i + |L^T phi_i|^2).
inline LatentMoments latent_moments(const Matrix& phi, const WhitenedVariationalState& q, double outputscale) {
  if (phi.rows() != q.size()) throw DimensionError("features and variational state differ in size");
  const double s = std::sqrt(outputscale);
  LatentMoments out;
  out.mean = s * (phi.transpose() * q.m);
  const Matrix u = q.L.transpose() * phi;
  out.var = outputscale * (1.0 - phi.colwise().squaredNorm().array() + u.colwise().squaredNorm().array())
                              .matrix()
                              .transpose();
  for (Eigen::Index i = 0; i < out.var.size(); ++i) {
    if (out.var(i) < -1e-10 * outputscale || !std::isfinite(out.var(i)))
      throw NumericError("negative latent variance " + std::to_string(out.var(i)));
    out.var(i) = std::max(out.var(i), 0.0);
  }
  return out;
}

struct MomentGradient {
  Vector m;
  Matrix L;
  Matrix phi;
  double log_outputscale = 0.0;
};

inline MomentGradient latent_moments_backward(const Matrix& phi, const WhitenedVariationalState& q,
                                              double outputscale, const LatentMoments& moments,
                                              const Vector& g_mean, const Vector& g_var) {
  const double s = std::sqrt(outputscale);
  MomentGradient g;
  g.m = s * (phi * g_mean);
  const Matrix u = q.L.transpose() * phi;                 // M x B
  const Matrix phi_gv = phi * g_var.asDiagonal();         // M x B
  g.L = (2.0 * outputscale) * (phi_gv * u.transpose());
  g.L = g.L.triangularView<Eigen::Lower>();
  g.phi = s * (q.m * g_mean.transpose()) + (2.0 * outputscale) * (q.L * (u * g_var.asDiagonal()) - phi_gv);
  g.log_outputscale = 0.5 * g_mean.dot(moments.mean) + g_var.dot(moments.var);
  return g;
}

/// KL(q(v) || N(0, I)) = 1/2 (|L|_F^2 + |m|^2 - M) - sum ln L_ii.
inline double whitened_kl(const WhitenedVariationalState& q) {
  return 0.5 * (q.L.triangularView<Eigen::Lower>().toDenseMatrix().squaredNorm() + q.m.squaredNorm() -
                static_cast<double>(q.size())) -
         q.L.diagonal().array().log().sum();
}

inline std::pair<Vector, Matrix> whitened_kl_gradient(const WhitenedVariationalState& q) {
  Matrix gl = q.L.triangularView<Eigen::Lower>();
  gl.diagonal() -= q.L.diagonal().cwiseInverse();
  return {q.m, gl};
}

struct ExpectedLogLik {
  double value = 0.0;
  Vector g_mean;
  Vector g_var;
  double g_log_noise = 0.0;
};

inline const GaussHermite& gauss_hermite_20() {
  static const GaussHermite gh = gauss_hermite(20);
  return gh;
}

/// sum_i E_{f ~ N(mean_i, var_i)} ln sigmoid(y_i f), y in {-1, +1}, by
/// 20-node Gauss-Hermite quadrature.
inline ExpectedLogLik bernoulli_expected_loglik(const Vector& mean, const Vector& var,
                                                const std::vector<int>& labels) {
  if (mean.size() != var.size() || mean.size() != static_cast<Eigen::Index>(labels.size()))
    throw DimensionError("bernoulli_expected_loglik: lengths differ");
  const auto& gh = gauss_hermite_20();
  const double inv_sqrt_pi = 1.0 / std::sqrt(std::numbers::pi);
  ExpectedLogLik out;
  out.g_mean = Vector::Zero(mean.size());
  out.g_var = Vector::Zero(mean.size());
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    const double y = labels[static_cast<std::size_t>(i)] ? 1.0 : -1.0;
    const double sd = std::sqrt(2.0 * var(i));
    double v = 0.0, gm = 0.0, gv = 0.0, curv = 0.0;
    for (Eigen::Index k = 0; k < gh.nodes.size(); ++k) {
      const double w = gh.weights(k) * inv_sqrt_pi;
      const double f = mean(i) + sd * gh.nodes(k);
      const double d1 = y * sigmoid(-y * f);
      v += w * log_sigmoid(y * f);
      gm += w * d1;
      gv += w * d1 * gh.nodes(k);
      curv -= w * sigmoid(f) * sigmoid(-f);
    }
    out.value += v;
    out.g_mean(i) = gm;
    // d/dvar of the quadrature rule; at var -> 0 the limit is E[g'']/2.
    out.g_var(i) = var(i) > 1e-300 ? gv / sd : 0.5 * curv;
  }
  return out;
}

/// sum_i E ln N(y_i | f, noise) = -1/2 ln(2 pi noise) - ((y - mean)^2 + var) / (2 noise).
inline ExpectedLogLik gaussian_expected_loglik(const Vector& mean, const Vector& var, const Vector& y,
                                               double noise_var) {
  if (mean.size() != y.size() || var.size() != y.size())
    throw DimensionError("gaussian_expected_loglik: lengths differ");
  ExpectedLogLik out;
  const Vector r = y - mean;
  const double n = static_cast<double>(y.size());
  const double quad = r.squaredNorm() + var.sum();
  out.value = -0.5 * n * (kLog2Pi + std::log(noise_var)) - quad / (2.0 * noise_var);
  out.g_mean = r / noise_var;
  out.g_var = Vector::Constant(y.size(), -0.5 / noise_var);
  out.g_log_noise = -0.5 * n + quad / (2.0 * noise_var);
  return out;
}

enum class Likelihood { kBernoulli, kGaussian };

struct SvgpObjective {
  double value = 0.0;
  double expected_loglik = 0.0;
  double kl = 0.0;
  LatentMoments moments;
  // gradients (populated when requested)
  Matrix g_x;
  KernelGradient g_kernel;
  Vector g_m;
  Matrix g_L;
  Matrix g_z;
};

/// Variational objective  sum_i E_q[ln p(y_i | f_i)] - kl_scale * KL(q(v) || p(v)).
/// Targets are labels in {0,1} for the Bernoulli likelihood or real values for
/// the Gaussian one.
inline SvgpObjective svgp_objective(const Inducing& inducing, const Matrix& x, const Vector& targets,
                                    const WhitenedVariationalState& q, const RbfKernelParams& params,
                                    Likelihood lik, double kl_scale, bool want_grad,
                                    const JitterPolicy& jitter = {}) {
  q.validate();
  if (x.rows() != targets.size()) throw DimensionError("svgp_objective: inputs and targets differ in length");
  if (inducing_size(inducing) != q.size()) throw DimensionError("svgp_objective: inducing size vs state");
  Features features(inducing, params.lengthscale(), jitter);
  const Matrix phi = features.forward(x);
  const double os = params.outputscale();
  SvgpObjective out;
  out.moments = latent_moments(phi, q, os);
  ExpectedLogLik ell;
  if (lik == Likelihood::kBernoulli) {
    std::vector<int> labels(static_cast<std::size_t>(targets.size()));
    for (Eigen::Index i = 0; i < targets.size(); ++i) labels[static_cast<std::size_t>(i)] = targets(i) > 0.5 ? 1 : 0;
    ell = bernoulli_expected_loglik(out.moments.mean, out.moments.var, labels);
  } else {
    ell = gaussian_expected_loglik(out.moments.mean, out.moments.var, targets, params.noise_var());
  }
  out.expected_loglik = ell.value;
  out.kl = whitened_kl(q);
  out.value = ell.value - kl_scale * out.kl;
  if (!want_grad) return out;

  const auto mg = latent_moments_backward(phi, q, os, out.moments, ell.g_mean, ell.g_var);
  const auto fg = features.backward(mg.phi);
  const auto [kl_m, kl_L] = whitened_kl_gradient(q);
  out.g_m = mg.m - kl_scale * kl_m;
  out.g_L = mg.L - kl_scale * kl_L;
  out.g_x = fg.x;
  out.g_z = fg.z;
  out.g_kernel.log_lengthscale = fg.log_lengthscale;
  out.g_kernel.log_outputscale = mg.log_outputscale;
  out.g_kernel.log_noise_var = lik == Likelihood::kGaussian ? ell.g_log_noise : 0.0;
  return out;
}

/// Predictive moments of the latent function at new inputs.
inline LatentMoments latent_posterior_predict(const WhitenedVariationalState& q, const Inducing& inducing,
                                              const Matrix& x, const RbfKernelParams& params,
                                              const JitterPolicy& jitter = {}) {
  q.validate();
  Features features(inducing, params.lengthscale(), jitter);
  return latent_moments(features.forward(x), q, params.outputscale());
}

/// Optimal q(v) for a Gaussian likelihood (closed form of the variational
/// optimum): precision I + A A^T / noise with A = s Phi.
inline WhitenedVariationalState optimal_gaussian_state(const Inducing& inducing, const Matrix& x, const Vector& y,
                                                      const RbfKernelParams& params, const JitterPolicy& jitter = {}) {
  Features features(inducing, params.lengthscale(), jitter);
  const Matrix a = std::sqrt(params.outputscale()) * features.forward(x);
  const double noise = params.noise_var();
  Matrix precision = Matrix::Identity(a.rows(), a.rows()) + a * a.transpose() / noise;
  Eigen::LLT<Matrix> llt(precision);
  if (llt.info() != Eigen::Success) throw NumericError("variational precision not positive definite");
  const Matrix cov = llt.solve(Matrix::Identity(a.rows(), a.rows()));
  WhitenedVariationalState q;
  q.m = llt.solve(a * y) / noise;
  q.L = jittered_cholesky(cov, JitterPolicy{1e-12, 1e-6, false}).lower;
  return q;
}

/// S draws of sigmoid(f), f ~ N(mean, var), per point (N x S).
inline Matrix bernoulli_predict(const Vector& latent_mean, const Vector& latent_var, int samples, Rng& rng) {
  if (samples < 1) throw ConfigError("samples", "must be >= 1");
  if (latent_mean.size() != latent_var.size()) throw DimensionError("bernoulli_predict: lengths differ");
  Matrix out(latent_mean.size(), samples);
  for (Eigen::Index i = 0; i < latent_mean.size(); ++i) {
    if (latent_var(i) < 0.0) throw NumericError("negative latent variance");
    const double sd = std::sqrt(latent_var(i));
    for (int s = 0; s < samples; ++s) out(i, s) = sigmoid(latent_mean(i) + sd * rng.normal());
  }
  return out;
}

/// E[sigmoid(f)] by Gauss-Hermite quadrature.
inline double expected_sigmoid(double mean, double var) {
  const auto& gh = gauss_hermite_20();
  const double sd = std::sqrt(2.0 * std::max(var, 0.0));
  double p = 0.0;
  for (Eigen::Index k = 0; k < gh.nodes.size(); ++k) p += gh.weights(k) * sigmoid(mean + sd * gh.nodes(k));
  return p / std::sqrt(std::numbers::pi);
}

}  // namespace dbgp::gp
