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
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "dbgp/error.hpp"
#include "dbgp/linalg.hpp"

namespace dbgp {

/// A named trainable block. `grad` holds d(objective)/d(value) after a
/// backward pass and is cleared by ParameterSet::zero_grad().
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  void zero_grad() { grad = Matrix::Zero(value.rows(), value.cols()); }
};

/// Ordered registry of parameters. Insertion order is stable and drives
/// checkpoint layout and optimizer state. Storage is a deque so references
/// handed out stay valid as blocks are added.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, Matrix value) {
    if (index_.count(name)) throw ConfigError(name, "duplicate parameter name");
    items_.push_back(Parameter{name, std::move(value), {}});
    items_.back().zero_grad();
    index_[name] = items_.size() - 1;
    return items_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError(name, "unknown parameter");
    return items_[it->second];
  }
  const Parameter& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError(name, "unknown parameter");
    return items_[it->second];
  }

  void zero_grad() {
    for (auto& p : items_) p.zero_grad();
  }

  std::size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::deque<Parameter> items_;
  std::map<std::string, std::size_t> index_;
};

/// Adaptive-moment optimizer. Performs ascent when `maximize` is set, which
/// is how every objective in this toolkit (ELBOs, log-likelihoods) is posed.
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    bool maximize = true;
  };

  explicit Adam(Options opts) : opts_(opts) {}

  void step(ParameterSet& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    const double sign = opts_.maximize ? 1.0 : -1.0;
    for (auto& p : params) {
      auto& st = state_[p.name];
      if (st.m.size() == 0) {
        st.m = Matrix::Zero(p.value.rows(), p.value.cols());
        st.v = Matrix::Zero(p.value.rows(), p.value.cols());
      }
      st.m = opts_.beta1 * st.m + (1.0 - opts_.beta1) * p.grad;
      st.v = opts_.beta2 * st.v + (1.0 - opts_.beta2) * p.grad.cwiseProduct(p.grad);
      p.value.array() += sign * opts_.learning_rate * (st.m.array() / bc1) /
                         ((st.v.array() / bc2).sqrt() + opts_.epsilon);
    }
  }

  long steps() const { return t_; }

 private:
  struct Moments {
    Matrix m;
    Matrix v;
  };
  Options opts_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace dbgp
