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

// Regular inducing grids and local linear interpolation onto them.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dbgp/error.hpp"
#include "dbgp/gp/kernel.hpp"
#include "dbgp/gp/toeplitz.hpp"
#include "dbgp/linalg.hpp"

namespace dbgp::gp {

/// Per-dimension equally spaced grids. The full inducing set is their
/// Cartesian product, flattened row-major (last dimension fastest), so the
/// kernel matrix is the Kronecker product of per-dimension Toeplitz factors.
class InducingGrid {
 public:
  InducingGrid() = default;

  InducingGrid(std::vector<double> lower, std::vector<double> spacing, std::vector<int> counts)
      : lower_(std::move(lower)), spacing_(std::move(spacing)), counts_(std::move(counts)) {
    if (lower_.size() != spacing_.size() || lower_.size() != counts_.size() || lower_.empty())
      throw ConfigError("gp.grid", "inconsistent grid specification");
    for (std::size_t d = 0; d < counts_.size(); ++d) {
      if (counts_[d] < 2) throw ConfigError("gp.grid_size", "need at least 2 points per dimension");
      if (!(spacing_[d] > 0.0) || !std::isfinite(spacing_[d]) || !std::isfinite(lower_[d]))
        throw ConfigError("gp.grid", "spacing must be positive and finite");
    }
  }

  /// Grid over [lo_d, hi_d] with `count` points per dimension.
  static InducingGrid uniform(const std::vector<std::pair<double, double>>& bounds, int count) {
    std::vector<double> lower, spacing;
    std::vector<int> counts;
    for (const auto& [lo, hi] : bounds) {
      if (!(hi > lo)) throw ConfigError("gp.grid", "empty interval");
      lower.push_back(lo);
      spacing.push_back((hi - lo) / (count - 1));
      counts.push_back(count);
    }
    return InducingGrid(lower, spacing, counts);
  }

  /// Grid whose hull covers the range of `x` plus one spacing on each side.
  static InducingGrid covering(const Matrix& x, int count) {
    if (count < 4) throw ConfigError("gp.grid_size", "need at least 4 points to leave a margin");
    std::vector<double> lower, spacing;
    std::vector<int> counts;
    for (Eigen::Index d = 0; d < x.cols(); ++d) {
      double lo = x.col(d).minCoeff(), hi = x.col(d).maxCoeff();
      if (hi - lo < 1e-9) {
        lo -= 0.5;
        hi += 0.5;
      }
      const double h = (hi - lo) / (count - 3);
      lower.push_back(lo - h);
      spacing.push_back(h);
      counts.push_back(count);
    }
    return InducingGrid(lower, spacing, counts);
  }

  int dims() const { return static_cast<int>(counts_.size()); }
  int count(int d) const { return counts_[static_cast<std::size_t>(d)]; }
  double spacing(int d) const { return spacing_[static_cast<std::size_t>(d)]; }
  double lower(int d) const { return lower_[static_cast<std::size_t>(d)]; }
  double upper(int d) const { return lower(d) + spacing(d) * (count(d) - 1); }
  double point(int d, int k) const { return lower(d) + spacing(d) * k; }
  const std::vector<int>& counts() const { return counts_; }

  Vector points(int d) const {
    Vector p(count(d));
    for (int k = 0; k < count(d); ++k) p(k) = point(d, k);
    return p;
  }

  Eigen::Index size() const {
    Eigen::Index m = 1;
    for (int c : counts_) m *= c;
    return m;
  }

  /// All grid locations, M x D, in flattened order.
  Matrix locations() const {
    Matrix out(size(), dims());
    for (Eigen::Index flat = 0; flat < size(); ++flat) {
      Eigen::Index rem = flat;
      for (int d = dims() - 1; d >= 0; --d) {
        out(flat, d) = point(d, static_cast<int>(rem % count(d)));
        rem /= count(d);
      }
    }
    return out;
  }

  /// First column of the unit-scale 1-D correlation matrix along dimension d.
  Vector correlation_first_column(int d, double lengthscale) const {
    Vector c(count(d));
    for (int k = 0; k < count(d); ++k) {
      const double r = k * spacing(d) / lengthscale;
      c(k) = std::exp(-0.5 * r * r);
    }
    return c;
  }

  /// First columns of the per-dimension Toeplitz kernel factors; the output
  /// scale is folded into the first factor. Cached per hyperparameter value.
  const std::vector<Vector>& kernel_first_columns(const RbfKernelParams& params) const {
    if (params.dims() != dims()) throw DimensionError("grid/kernel dimension mismatch");
    if (cache_valid_ && cached_log_ls_.size() == params.log_lengthscale.size() &&
        cached_log_ls_ == params.log_lengthscale && cached_log_os_ == params.log_outputscale)
      return cached_cols_;
    cached_cols_.clear();
    for (int d = 0; d < dims(); ++d) {
      Vector c = correlation_first_column(d, params.lengthscale(d));
      if (d == 0) c *= params.outputscale();
      cached_cols_.push_back(std::move(c));
    }
    cached_log_ls_ = params.log_lengthscale;
    cached_log_os_ = params.log_outputscale;
    cache_valid_ = true;
    return cached_cols_;
  }

  /// K_uu v using Kronecker/Toeplitz structure; never forms K_uu.
  Vector kernel_matvec(const RbfKernelParams& params, const Vector& v) const {
    return kronecker_toeplitz_matvec(kernel_first_columns(params), v);
  }

  bool operator==(const InducingGrid& o) const {
    return lower_ == o.lower_ && spacing_ == o.spacing_ && counts_ == o.counts_;
  }

 private:
  std::vector<double> lower_;
  std::vector<double> spacing_;
  std::vector<int> counts_;
  mutable bool cache_valid_ = false;
  mutable Vector cached_log_ls_;
  mutable double cached_log_os_ = 0.0;
  mutable std::vector<Vector> cached_cols_;
};

/// Local linear interpolation weights of N points onto a grid. Per point and
/// dimension the point lies in [u_a, u_{a+1}] with fractional offset t; the
/// weights are (1 - t, t).
struct SparseInterpolation {
  int dims = 0;
  Eigen::Index n_points = 0;
  std::vector<int> counts;
  std::vector<int> bracket;     // n_points * dims, lower bracketing index a
  std::vector<double> offset;   // n_points * dims, t in [0, 1]

  int lower_index(Eigen::Index i, int d) const {
    return bracket[static_cast<std::size_t>(i * dims + d)];
  }
  double fraction(Eigen::Index i, int d) const { return offset[static_cast<std::size_t>(i * dims + d)]; }

  /// Non-zero (flat grid index, weight) pairs of point i. Weights are
  /// products of per-dimension weights; exact zeros are dropped.
  std::vector<std::pair<Eigen::Index, double>> entries(Eigen::Index i) const {
    std::vector<std::pair<Eigen::Index, double>> out{{0, 1.0}};
    for (int d = 0; d < dims; ++d) {
      std::vector<std::pair<Eigen::Index, double>> next;
      const int a = lower_index(i, d);
      const double t = fraction(i, d);
      for (const auto& [idx, w] : out) {
        if (1.0 - t != 0.0) next.emplace_back(idx * counts[static_cast<std::size_t>(d)] + a, w * (1.0 - t));
        if (t != 0.0) next.emplace_back(idx * counts[static_cast<std::size_t>(d)] + a + 1, w * t);
      }
      out = std::move(next);
    }
    return out;
  }

  /// Dense M x N interpolation matrix W (column i holds point i's weights).
  Matrix dense() const {
    Eigen::Index m = 1;
    for (int c : counts) m *= c;
    Matrix w = Matrix::Zero(m, n_points);
    for (Eigen::Index i = 0; i < n_points; ++i)
      for (const auto& [idx, wt] : entries(i)) w(idx, i) += wt;
    return w;
  }

  /// W v, a length-M vector.
  Vector apply(const Vector& v) const {
    if (v.size() != n_points) throw DimensionError("interpolation apply: length");
    Eigen::Index m = 1;
    for (int c : counts) m *= c;
    Vector out = Vector::Zero(m);
    for (Eigen::Index i = 0; i < n_points; ++i)
      for (const auto& [idx, wt] : entries(i)) out(idx) += wt * v(i);
    return out;
  }

  /// W^T u, a length-N vector.
  Vector apply_transpose(const Vector& u) const {
    Vector out = Vector::Zero(n_points);
    for (Eigen::Index i = 0; i < n_points; ++i)
      for (const auto& [idx, wt] : entries(i)) out(i) += wt * u(idx);
    return out;
  }
};

/// Brackets each coordinate between adjacent grid points. Points outside
/// the grid hull raise ExtrapolationError.
inline SparseInterpolation interpolation_weights(const Matrix& x, const InducingGrid& grid) {
  if (x.cols() != grid.dims())
    throw DimensionError("interpolation: points have " + std::to_string(x.cols()) +
                         " dims, grid has " + std::to_string(grid.dims()));
  SparseInterpolation w;
  w.dims = grid.dims();
  w.n_points = x.rows();
  w.counts = grid.counts();
  w.bracket.resize(static_cast<std::size_t>(x.rows() * grid.dims()));
  w.offset.resize(w.bracket.size());
  constexpr double kSnap = 1e-12;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (int d = 0; d < grid.dims(); ++d) {
      const double pos = (x(i, d) - grid.lower(d)) / grid.spacing(d);
      const int m = grid.count(d);
      if (!std::isfinite(pos) || pos < -kSnap || pos > (m - 1) + kSnap)
        throw ExtrapolationError("point " + std::to_string(i) + " dim " + std::to_string(d) + " value " +
                                 std::to_string(x(i, d)) + " outside grid [" + std::to_string(grid.lower(d)) +
                                 ", " + std::to_string(grid.upper(d)) + "]");
      int a = static_cast<int>(std::floor(pos));
      double t = pos - a;
      if (t > 1.0 - kSnap) {
        ++a;
        t = 0.0;
      } else if (t < kSnap) {
        t = 0.0;
      }
      if (a < 0) {
        a = 0;
        t = 0.0;
      }
      if (a >= m - 1) {
        a = m - 2;
        t = 1.0;
      }
      w.bracket[static_cast<std::size_t>(i * w.dims + d)] = a;
      w.offset[static_cast<std::size_t>(i * w.dims + d)] = t;
    }
  }
  return w;
}

/// Implicit K_uf ~= K_uu W.
class SkiCrossCovariance {
 public:
  SkiCrossCovariance(const SparseInterpolation& w, const InducingGrid& grid, const RbfKernelParams& params)
      : w_(w), grid_(grid), params_(params) {
    if (w.dims != grid.dims() || w.counts != grid.counts())
      throw DimensionError("interpolation weights were built for a different grid");
  }
  Eigen::Index rows() const { return grid_.size(); }
  Eigen::Index cols() const { return w_.n_points; }
  /// K_uf v for v of length N.
  Vector apply(const Vector& v) const { return grid_.kernel_matvec(params_, w_.apply(v)); }
  /// K_fu u for u of length M.
  Vector apply_transpose(const Vector& u) const { return w_.apply_transpose(grid_.kernel_matvec(params_, u)); }

 private:
  const SparseInterpolation& w_;
  const InducingGrid& grid_;
  RbfKernelParams params_;
};

inline SkiCrossCovariance ski_cross_cov(const SparseInterpolation& w, const InducingGrid& grid,
                                        const RbfKernelParams& params) {
  return SkiCrossCovariance(w, grid, params);
}

/// Q_ff v with the interpolated approximation Q_ff ~= W^T K_uu W.
inline Vector ski_qff_quadform(const SparseInterpolation& w, const InducingGrid& grid,
                               const RbfKernelParams& params, const Vector& v) {
  if (v.size() != w.n_points) throw DimensionError("ski_qff_quadform: vector length");
  return w.apply_transpose(grid.kernel_matvec(params, w.apply(v)));
}

}  // namespace dbgp::gp
