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

// Matrix-valued reverse-mode differentiation tape.
//
// Every node holds a dense value; nodes created from inputs that require
// gradients record a backward closure. Tape::backward() walks nodes in
// reverse creation order, which is a valid topological order because a node
// can only reference earlier nodes.

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dbgp/error.hpp"
#include "dbgp/linalg.hpp"
#include "dbgp/params.hpp"

namespace dbgp::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad)>;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }

  /// Leaf bound to a trainable parameter. The same parameter always maps to
  /// the same leaf within a tape.
  Var parameter(Parameter& p) {
    auto it = leaves_.find(&p);
    if (it != leaves_.end()) return Var{this, it->second};
    Var v = push(p.value, true, nullptr);
    leaves_[&p] = v.id;
    return v;
  }

  Var push(Matrix value, bool needs_grad, Backward back) {
    nodes_.push_back(Node{std::move(value), Matrix(), std::move(back), needs_grad});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  bool needs_grad(std::initializer_list<Var> vs) const {
    for (const auto& v : vs)
      if (needs_grad(v.id)) return true;
    return false;
  }

  void accumulate(int id, const Matrix& g) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Gradient of a node after backward(); zero if nothing flowed into it.
  Matrix grad(Var v) const {
    const auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Back-propagates from a 1x1 root and adds leaf gradients into the bound
  /// parameters' grad fields.
  void backward(Var root, double seed = 1.0) {
    if (root.value().size() != 1) throw DimensionError("backward root must be scalar");
    accumulate(root.id, Matrix::Constant(1, 1, seed));
    for (int id = root.id; id >= 0; --id) {
      auto& n = nodes_[static_cast<std::size_t>(id)];
      if (n.back && n.grad.size() != 0) {
        Matrix g = std::move(n.grad);
        n.grad = Matrix();
        n.back(*this, g);
        n.grad = std::move(g);
      }
    }
    for (auto& [param, id] : leaves_) {
      const auto& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.size() != 0) param->grad += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward back;
    bool needs_grad = false;
  };
  std::deque<Node> nodes_;
  std::unordered_map<Parameter*, int> leaves_;
};

inline const Matrix& Var::value() const { return tape->value(id); }

namespace detail {
inline void check_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw DimensionError("operands live on different tapes");
}
inline void check_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
}
}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  Tape& t = *a.tape;
  const bool ng = t.needs_grad({a, b});
  return t.push(a.value() * b.value(), ng, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a.id)) t.accumulate(a.id, g * b.value().transpose());
    if (t.needs_grad(b.id)) t.accumulate(b.id, a.value().transpose() * g);
  });
}

/// a * b^T
inline Var matmul_bt(Var a, Var b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.cols()) throw DimensionError("matmul_bt: inner dimensions differ");
  Tape& t = *a.tape;
  const bool ng = t.needs_grad({a, b});
  return t.push(a.value() * b.value().transpose(), ng, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a.id)) t.accumulate(a.id, g * b.value());
    if (t.needs_grad(b.id)) t.accumulate(b.id, g.transpose() * a.value());
  });
}

inline Var add(Var a, Var b) {
  detail::check_same_tape(a, b);
  detail::check_shape(a.value(), b.value(), "add");
  Tape& t = *a.tape;
  return t.push(a.value() + b.value(), t.needs_grad({a, b}), [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::check_same_tape(a, b);
  detail::check_shape(a.value(), b.value(), "sub");
  Tape& t = *a.tape;
  return t.push(a.value() - b.value(), t.needs_grad({a, b}), [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, -g);
  });
}

inline Var scale(Var a, double c) {
  Tape& t = *a.tape;
  return t.push(c * a.value(), t.needs_grad(a.id),
                [a, c](Tape& t, const Matrix& g) { t.accumulate(a.id, c * g); });
}

inline Var hadamard(Var a, Var b) {
  detail::check_same_tape(a, b);
  detail::check_shape(a.value(), b.value(), "hadamard");
  Tape& t = *a.tape;
  return t.push(a.value().cwiseProduct(b.value()), t.needs_grad({a, b}),
                [a, b](Tape& t, const Matrix& g) {
                  if (t.needs_grad(a.id)) t.accumulate(a.id, g.cwiseProduct(b.value()));
                  if (t.needs_grad(b.id)) t.accumulate(b.id, g.cwiseProduct(a.value()));
                });
}

/// Adds a 1 x cols row vector to every row of `a`.
inline Var add_row(Var a, Var row) {
  detail::check_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("add_row: bias shape");
  Tape& t = *a.tape;
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.push(std::move(out), t.needs_grad({a, row}), [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g);
    if (t.needs_grad(row.id)) t.accumulate(row.id, g.colwise().sum());
  });
}

/// x W + b
inline Var affine(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

inline Var sum(Var a) {
  Tape& t = *a.tape;
  const auto r = a.rows(), c = a.cols();
  return t.push(Matrix::Constant(1, 1, a.value().sum()), t.needs_grad(a.id),
                [a, r, c](Tape& t, const Matrix& g) {
                  t.accumulate(a.id, Matrix::Constant(r, c, g(0, 0)));
                });
}

inline Var tanh(Var a) {
  Tape& t = *a.tape;
  Matrix y = a.value().array().tanh().matrix();
  Matrix dy = (1.0 - y.array().square()).matrix();
  return t.push(std::move(y), t.needs_grad(a.id), [a, dy](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g.cwiseProduct(dy));
  });
}

/// Exact (erf-based) GELU.
inline Var gelu(Var a) {
  Tape& t = *a.tape;
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols()), dy(x.rows(), x.cols());
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
    y.data()[i] = v * cdf;
    dy.data()[i] = cdf + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
  }
  return t.push(std::move(y), t.needs_grad(a.id), [a, dy](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g.cwiseProduct(dy));
  });
}

/// Row-wise layer normalization with learned gain and bias (1 x cols each).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-12) {
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  const auto n = xv.cols();
  if (gain.cols() != n || bias.cols() != n) throw DimensionError("layer_norm: parameter width");
  Matrix xhat(xv.rows(), n);
  Vector inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Matrix y = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  y.rowwise() += bias.value().row(0);
  const bool ng = t.needs_grad({x, gain, bias});
  return t.push(std::move(y), ng, [x, gain, bias, xhat, inv_std, n](Tape& t, const Matrix& g) {
    if (t.needs_grad(gain.id)) t.accumulate(gain.id, g.cwiseProduct(xhat).colwise().sum());
    if (t.needs_grad(bias.id)) t.accumulate(bias.id, g.colwise().sum());
    if (t.needs_grad(x.id)) {
      Matrix gx_hat = (g.array().rowwise() * gain.value().row(0).array()).matrix();
      Matrix gx(g.rows(), n);
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const double mean_g = gx_hat.row(r).mean();
        const double mean_gx = gx_hat.row(r).dot(xhat.row(r)) / static_cast<double>(n);
        gx.row(r) = inv_std(r) *
                    (gx_hat.row(r).array() - mean_g - xhat.row(r).array() * mean_gx).matrix();
      }
      t.accumulate(x.id, gx);
    }
  });
}

/// Rows of `table` selected by `ids` (embedding lookup). Gradients scatter-add.
inline Var gather_rows(Var table, const std::vector<int>& ids) {
  Tape& t = *table.tape;
  const Matrix& tv = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows())
      throw LookupError(i, "id " + std::to_string(ids[i]) + " outside table of " +
                               std::to_string(tv.rows()) + " rows");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  const auto rows = tv.rows(), cols = tv.cols();
  return t.push(std::move(out), t.needs_grad(table.id),
                [table, ids, rows, cols](Tape& t, const Matrix& g) {
                  Matrix gt = Matrix::Zero(rows, cols);
                  for (std::size_t i = 0; i < ids.size(); ++i)
                    gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
                  t.accumulate(table.id, gt);
                });
}

/// Inverted dropout with a precomputed keep mask (entries 0 or 1/(1-p)).
inline Var apply_mask(Var x, Matrix mask) {
  Tape& t = *x.tape;
  detail::check_shape(x.value(), mask, "apply_mask");
  return t.push(x.value().cwiseProduct(mask), t.needs_grad(x.id),
                [x, mask](Tape& t, const Matrix& g) { t.accumulate(x.id, g.cwiseProduct(mask)); });
}

/// Sum over rows of the Bernoulli log-likelihood of labels given logits (n x 1).
inline Var bernoulli_log_likelihood(Var logits, const std::vector<int>& labels) {
  Tape& t = *logits.tape;
  const Matrix& z = logits.value();
  if (z.cols() != 1 || z.rows() != static_cast<Eigen::Index>(labels.size()))
    throw DimensionError("bernoulli_log_likelihood: logits must be n x 1");
  double ll = 0.0;
  Matrix dz(z.rows(), 1);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double y = labels[static_cast<std::size_t>(i)] ? 1.0 : -1.0;
    ll += log_sigmoid(y * z(i, 0));
    dz(i, 0) = y * sigmoid(-y * z(i, 0));
  }
  return t.push(Matrix::Constant(1, 1, ll), t.needs_grad(logits.id),
                [logits, dz](Tape& t, const Matrix& g) { t.accumulate(logits.id, g(0, 0) * dz); });
}

/// Mean softmax cross-entropy of rows of `logits` against integer targets.
inline Var softmax_cross_entropy(Var logits, const std::vector<int>& targets) {
  Tape& t = *logits.tape;
  const Matrix& z = logits.value();
  const auto n = z.rows();
  if (n != static_cast<Eigen::Index>(targets.size()) || n == 0)
    throw DimensionError("softmax_cross_entropy: target count");
  Matrix probs(n, z.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = z.row(i).maxCoeff();
    const auto e = (z.row(i).array() - mx).exp();
    const double s = e.sum();
    probs.row(i) = e / s;
    loss += std::log(s) + mx - z(i, targets[static_cast<std::size_t>(i)]);
  }
  loss /= static_cast<double>(n);
  return t.push(Matrix::Constant(1, 1, loss), t.needs_grad(logits.id),
                [logits, probs, targets, n](Tape& t, const Matrix& g) {
                  Matrix gz = probs;
                  for (Eigen::Index i = 0; i < n; ++i) gz(i, targets[static_cast<std::size_t>(i)]) -= 1.0;
                  t.accumulate(logits.id, (g(0, 0) / static_cast<double>(n)) * gz);
                });
}

/// Multi-head scaled dot-product attention over a padded batch.
///
/// q, k, v are (batch * seq_len) x hidden with row b * seq_len + i holding
/// position i of sequence b. `valid` marks non-PAD positions; invalid keys get
/// zero attention weight. Output has the same layout as v.
inline Var masked_attention(Var q, Var k, Var v, const std::vector<char>& valid, int batch,
                            int seq_len, int heads) {
  Tape& t = *q.tape;
  const auto hidden = q.cols();
  if (hidden % heads != 0) throw DimensionError("attention: hidden not divisible by heads");
  if (q.rows() != static_cast<Eigen::Index>(batch) * seq_len ||
      valid.size() != static_cast<std::size_t>(q.rows()))
    throw DimensionError("attention: layout mismatch");
  const int dh = static_cast<int>(hidden) / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix out = Matrix::Zero(q.rows(), hidden);
  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(batch * heads));
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq_len;
    for (int h = 0; h < heads; ++h) {
      const auto qb = q.value().block(r0, h * dh, seq_len, dh);
      const auto kb = k.value().block(r0, h * dh, seq_len, dh);
      const auto vb = v.value().block(r0, h * dh, seq_len, dh);
      Matrix s = (qb * kb.transpose()) * inv_sqrt;
      Matrix p(seq_len, seq_len);
      for (int i = 0; i < seq_len; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < seq_len; ++j)
          if (valid[static_cast<std::size_t>(r0 + j)]) mx = std::max(mx, s(i, j));
        double z = 0.0;
        for (int j = 0; j < seq_len; ++j) {
          const double e = valid[static_cast<std::size_t>(r0 + j)] ? std::exp(s(i, j) - mx) : 0.0;
          p(i, j) = e;
          z += e;
        }
        p.row(i) /= z;
      }
      out.block(r0, h * dh, seq_len, dh) = p * vb;
      (*probs)[static_cast<std::size_t>(b * heads + h)] = std::move(p);
    }
  }
  const bool ng = t.needs_grad({q, k, v});
  return t.push(std::move(out), ng,
                [q, k, v, probs, batch, seq_len, heads, dh, inv_sqrt](Tape& t, const Matrix& g) {
                  Matrix gq = Matrix::Zero(q.rows(), q.cols());
                  Matrix gk = Matrix::Zero(k.rows(), k.cols());
                  Matrix gv = Matrix::Zero(v.rows(), v.cols());
                  for (int b = 0; b < batch; ++b) {
                    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq_len;
                    for (int h = 0; h < heads; ++h) {
                      const Matrix& p = (*probs)[static_cast<std::size_t>(b * heads + h)];
                      const auto go = g.block(r0, h * dh, seq_len, dh);
                      const auto qb = q.value().block(r0, h * dh, seq_len, dh);
                      const auto kb = k.value().block(r0, h * dh, seq_len, dh);
                      const auto vb = v.value().block(r0, h * dh, seq_len, dh);
                      gv.block(r0, h * dh, seq_len, dh) = p.transpose() * go;
                      Matrix gp = go * vb.transpose();
                      Vector rowdot = (gp.cwiseProduct(p)).rowwise().sum();
                      Matrix gs = p.cwiseProduct(gp.colwise() - rowdot) * inv_sqrt;
                      gq.block(r0, h * dh, seq_len, dh) = gs * kb;
                      gk.block(r0, h * dh, seq_len, dh) = gs.transpose() * qb;
                    }
                  }
                  t.accumulate(q.id, gq);
                  t.accumulate(k.id, gk);
                  t.accumulate(v.id, gv);
                });
}

/// Selects whole rows by index (e.g. the first token of each sequence).
inline Var select_rows(Var x, const std::vector<Eigen::Index>& rows) {
  Tape& t = *x.tape;
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.value().row(rows[i]);
  const auto r = x.rows(), c = x.cols();
  return t.push(std::move(out), t.needs_grad(x.id), [x, rows, r, c](Tape& t, const Matrix& g) {
    Matrix gx = Matrix::Zero(r, c);
    for (std::size_t i = 0; i < rows.size(); ++i) gx.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(x.id, gx);
  });
}

}  // namespace dbgp::ad
