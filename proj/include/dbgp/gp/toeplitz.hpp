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

// Structured matrix-vector products for covariance matrices on regular grids:
// symmetric Toeplitz (1-D) via circulant embedding, and Kronecker products of
// per-dimension factors (d > 1).

#include <complex>
#include <functional>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "dbgp/error.hpp"
#include "dbgp/linalg.hpp"

namespace dbgp::gp {

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

/// T v for the symmetric Toeplitz matrix T with first column `first_col`.
/// The matrix is embedded in a circulant of power-of-two size so the product
/// is a pointwise multiply in the Fourier domain, O(M log M).
inline Vector toeplitz_matvec(const Vector& first_col, const Vector& v) {
  const auto m = static_cast<std::size_t>(first_col.size());
  if (static_cast<std::size_t>(v.size()) != m)
    throw DimensionError("toeplitz_matvec: first column has " + std::to_string(m) +
                         " entries, vector has " + std::to_string(v.size()));
  if (m == 0) return Vector();
  if (m == 1) return first_col(0) * v;
  const std::size_t n = next_pow2(2 * m);
  std::vector<double> circ(n, 0.0), padded(n, 0.0);
  for (std::size_t k = 0; k < m; ++k) circ[k] = first_col(static_cast<Eigen::Index>(k));
  for (std::size_t k = 1; k < m; ++k) circ[n - k] = first_col(static_cast<Eigen::Index>(k));
  for (std::size_t k = 0; k < m; ++k) padded[k] = v(static_cast<Eigen::Index>(k));

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> fc, fv;
  fft.fwd(fc, circ);
  fft.fwd(fv, padded);
  for (std::size_t k = 0; k < fc.size(); ++k) fv[k] *= fc[k];
  std::vector<double> prod;
  fft.inv(prod, fv);
  Vector out(static_cast<Eigen::Index>(m));
  for (std::size_t k = 0; k < m; ++k) out(static_cast<Eigen::Index>(k)) = prod[k];
  return out;
}

inline Matrix toeplitz_dense(const Vector& first_col) {
  const auto m = first_col.size();
  Matrix t(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) t(i, j) = first_col(std::abs(i - j));
  return t;
}

/// Applies (A_1 kron A_2 kron ... kron A_D) to v, where each factor is given as
/// a function applying A_d to a vector of length sizes[d]. The flat index is
/// row-major: the last dimension varies fastest.
inline Vector kronecker_matvec(const std::vector<std::function<Vector(const Vector&)>>& factors,
                               const std::vector<Eigen::Index>& sizes, const Vector& v) {
  if (factors.size() != sizes.size()) throw DimensionError("kronecker_matvec: factor count");
  Eigen::Index total = 1;
  for (auto s : sizes) total *= s;
  if (v.size() != total) throw DimensionError("kronecker_matvec: vector length");
  Vector cur = v;
  Eigen::Index inner = total;
  for (std::size_t d = 0; d < sizes.size(); ++d) {
    const Eigen::Index m = sizes[d];
    inner /= m;  // stride of dimension d
    const Eigen::Index outer = total / (inner * m);
    Vector fiber(m);
    for (Eigen::Index o = 0; o < outer; ++o) {
      for (Eigen::Index in = 0; in < inner; ++in) {
        const Eigen::Index base = o * m * inner + in;
        for (Eigen::Index k = 0; k < m; ++k) fiber(k) = cur(base + k * inner);
        const Vector res = factors[d](fiber);
        for (Eigen::Index k = 0; k < m; ++k) cur(base + k * inner) = res(k);
      }
    }
  }
  return cur;
}

/// Kronecker product of symmetric Toeplitz factors applied to v.
inline Vector kronecker_toeplitz_matvec(const std::vector<Vector>& first_cols, const Vector& v) {
  std::vector<std::function<Vector(const Vector&)>> factors;
  std::vector<Eigen::Index> sizes;
  for (const auto& c : first_cols) {
    factors.emplace_back([&c](const Vector& x) { return toeplitz_matvec(c, x); });
    sizes.push_back(c.size());
  }
  return kronecker_matvec(factors, sizes, v);
}

}  // namespace dbgp::gp
