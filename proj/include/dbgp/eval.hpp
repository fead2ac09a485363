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

// Evaluation of Monte Carlo predictive samples: ranking metrics, confidence
// thresholded curves, calibration, uncertainty of correct vs incorrect
// predictions, and per-token embedding entropy.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dbgp/bayes.hpp"
#include "dbgp/error.hpp"
#include "dbgp/linalg.hpp"
#include "dbgp/synthdata.hpp"

namespace dbgp {

/// n_patients x S probabilities plus labels.
struct PredictiveSamples {
  std::vector<std::string> patient_ids;
  std::vector<int> labels;
  Matrix probs;

  Eigen::Index size() const { return probs.rows(); }
  Eigen::Index draws() const { return probs.cols(); }

  void validate() const {
    if (probs.cols() < 1) throw DataError("predictive samples need at least one draw");
    if (static_cast<Eigen::Index>(labels.size()) != probs.rows() ||
        static_cast<Eigen::Index>(patient_ids.size()) != probs.rows())
      throw DataError("predictive samples: ids, labels and rows differ in count");
    if (!probs.allFinite() || (probs.array() < 0.0).any() || (probs.array() > 1.0).any())
      throw DataError("predictive samples must be probabilities in [0, 1]");
  }

  Vector mean() const { return probs.rowwise().mean(); }

  /// Row standard deviation (ddof 1); zero when S = 1.
  Vector stddev() const {
    Vector out(probs.rows());
    const auto s = probs.cols();
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      if (s < 2 || probs.row(i).minCoeff() == probs.row(i).maxCoeff()) {
        out(i) = 0.0;
        continue;
      }
      const double m = probs.row(i).mean();
      out(i) = std::sqrt((probs.row(i).array() - m).square().sum() / static_cast<double>(s - 1));
    }
    return out;
  }

  /// The first `s` draws.
  PredictiveSamples prefix(Eigen::Index s) const {
    if (s < 1 || s > draws()) throw ConfigError("predict.samples", "prefix outside available draws");
    return {patient_ids, labels, probs.leftCols(s)};
  }
};

namespace detail {
inline void check_binary(const Vector& scores, const std::vector<int>& labels) {
  if (scores.size() != static_cast<Eigen::Index>(labels.size()))
    throw DimensionError("scores and labels differ in length");
  std::size_t pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("labels must be 0 or 1");
    pos += static_cast<std::size_t>(y);
  }
  if (pos == 0 || pos == labels.size())
    throw UndefinedMetricError("ranking metric undefined: only one class present (" + std::to_string(labels.size()) +
                               " patients, " + std::to_string(pos) + " positive)");
}
}  // namespace detail

/// Mann-Whitney AUROC with midranks for ties.
inline double auroc(const Vector& scores, const std::vector<int>& labels) {
  detail::check_binary(scores, labels);
  const auto n = static_cast<std::size_t>(scores.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores(static_cast<Eigen::Index>(a)) < scores(static_cast<Eigen::Index>(b)); });
  double rank_sum = 0.0, n_pos = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores(static_cast<Eigen::Index>(order[j + 1])) == scores(static_cast<Eigen::Index>(order[i]))) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]] == 1) {
        rank_sum += midrank;
        n_pos += 1.0;
      }
    }
    i = j + 1;
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

/// Area under the precision-recall step curve: sum over distinct score
/// thresholds (descending) of (R_k - R_{k-1}) P_k.
inline double average_precision(const Vector& scores, const std::vector<int>& labels) {
  detail::check_binary(scores, labels);
  const auto n = static_cast<std::size_t>(scores.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores(static_cast<Eigen::Index>(a)) > scores(static_cast<Eigen::Index>(b)); });
  const double total_pos = std::accumulate(labels.begin(), labels.end(), 0.0);
  double tp = 0.0, fp = 0.0, prev_recall = 0.0, ap = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores(static_cast<Eigen::Index>(order[j])) == scores(static_cast<Eigen::Index>(order[i]))) {
      (labels[order[j]] == 1 ? tp : fp) += 1.0;
      ++j;
    }
    const double recall = tp / total_pos;
    ap += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
    i = j;
  }
  return ap;
}

struct RankingMetrics {
  double auroc = 0.0;
  double average_precision = 0.0;
};

/// Both metrics on the per-patient mean probability.
inline RankingMetrics ranking_metrics(const PredictiveSamples& s) {
  s.validate();
  const Vector m = s.mean();
  return {auroc(m, s.labels), average_precision(m, s.labels)};
}

/// A patient is predicted positive when its mean probability exceeds 0.5.
inline bool predicted_positive(double mean_prob) { return mean_prob > 0.5; }
inline double confidence(double mean_prob) { return std::max(mean_prob, 1.0 - mean_prob); }

struct ConfidenceCurve {
  std::vector<double> thresholds;
  std::vector<std::optional<double>> values;  // nullopt marks an undefined point
  std::vector<std::size_t> retained;
};

inline std::vector<double> default_confidence_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back(0.5 + 0.05 * k);
  return t;
}

/// Accuracy and AUROC over patients whose confidence is at least each
/// threshold.
inline std::pair<ConfidenceCurve, ConfidenceCurve> confidence_curves(
    const PredictiveSamples& s, const std::vector<double>& thresholds = default_confidence_thresholds()) {
  s.validate();
  for (double t : thresholds)
    if (!(t >= 0.5 && t < 1.0)) throw ConfigError("eval.thresholds", "thresholds must lie in [0.5, 1)");
  if (!std::is_sorted(thresholds.begin(), thresholds.end()))
    throw ConfigError("eval.thresholds", "thresholds must be ascending");
  const Vector m = s.mean();
  ConfidenceCurve acc{thresholds, {}, {}}, roc{thresholds, {}, {}};
  for (double t : thresholds) {
    std::vector<int> labels;
    std::vector<double> means;
    double correct = 0.0;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if (confidence(m(i)) < t) continue;
      const int y = s.labels[static_cast<std::size_t>(i)];
      labels.push_back(y);
      means.push_back(m(i));
      correct += (predicted_positive(m(i)) ? 1 : 0) == y;
    }
    acc.retained.push_back(labels.size());
    roc.retained.push_back(labels.size());
    acc.values.push_back(labels.empty() ? std::nullopt : std::optional<double>(correct / static_cast<double>(labels.size())));
    try {
      roc.values.push_back(auroc(Eigen::Map<const Vector>(means.data(), static_cast<Eigen::Index>(means.size())), labels));
    } catch (const UndefinedMetricError&) {
      roc.values.push_back(std::nullopt);
    }
  }
  return {acc, roc};
}

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  std::optional<double> mean_predicted;     // nullopt for empty bins
  std::optional<double> positive_fraction;
};

/// Equal-width bins on [0, 1] over mean probabilities; 1.0 falls in the last bin.
inline std::vector<CalibrationBin> calibration_curve(const PredictiveSamples& s, int n_bins = 10) {
  if (n_bins < 2) throw ConfigError("eval.calibration_bins", "need at least 2 bins");
  s.validate();
  const Vector m = s.mean();
  std::vector<CalibrationBin> bins(static_cast<std::size_t>(n_bins));
  std::vector<double> sum_p(bins.size(), 0.0), sum_y(bins.size(), 0.0);
  for (int b = 0; b < n_bins; ++b) {
    bins[static_cast<std::size_t>(b)].lower = static_cast<double>(b) / n_bins;
    bins[static_cast<std::size_t>(b)].upper = static_cast<double>(b + 1) / n_bins;
  }
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const auto b = static_cast<std::size_t>(std::min(n_bins - 1, static_cast<int>(std::floor(m(i) * n_bins))));
    bins[b].count += 1;
    sum_p[b] += m(i);
    sum_y[b] += s.labels[static_cast<std::size_t>(i)];
  }
  for (std::size_t b = 0; b < bins.size(); ++b) {
    if (bins[b].count == 0) continue;
    bins[b].mean_predicted = sum_p[b] / static_cast<double>(bins[b].count);
    bins[b].positive_fraction = sum_y[b] / static_cast<double>(bins[b].count);
  }
  return bins;
}

/// Linear-interpolation quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw DataError("quantile of empty set");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct GroupSummary {
  std::size_t count = 0;
  // Absent when the group is empty.
  std::optional<double> min, q1, median, q3, max, mean;
};

inline GroupSummary summarize(std::vector<double> v) {
  GroupSummary g;
  g.count = v.size();
  if (v.empty()) return g;
  std::sort(v.begin(), v.end());
  g.min = v.front();
  g.q1 = quantile_sorted(v, 0.25);
  g.median = quantile_sorted(v, 0.5);
  g.q3 = quantile_sorted(v, 0.75);
  g.max = v.back();
  g.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  return g;
}

/// Per-patient predictive std grouped by outcome at the 0.5 cut.
struct UncertaintySplit {
  std::vector<double> tp, fp, tn, fn;

  std::size_t total() const { return tp.size() + fp.size() + tn.size() + fn.size(); }
};

inline UncertaintySplit uncertainty_split(const PredictiveSamples& s) {
  s.validate();
  const Vector m = s.mean(), sd = s.stddev();
  UncertaintySplit out;
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const bool pos = predicted_positive(m(i));
    const bool y = s.labels[static_cast<std::size_t>(i)] == 1;
    (pos ? (y ? out.tp : out.fp) : (y ? out.fn : out.tn)).push_back(sd(i));
  }
  return out;
}

/// KL(N(m1, s1^2) || N(m2, s2^2)).
inline double gaussian_kl(double m1, double s1, double m2, double s2) {
  return std::log(s2 / s1) + (s1 * s1 + (m1 - m2) * (m1 - m2)) / (2.0 * s2 * s2) - 0.5;
}

enum class Side { kPositive, kNegative };

/// KL between Gaussians fitted (ddof 1) to the std values of the incorrect
/// and correct predictions on one side. On the negative side false negatives
/// take the role of false positives and true negatives that of true positives.
inline double div_metric(const UncertaintySplit& split, Side side) {
  const auto& wrong = side == Side::kPositive ? split.fp : split.fn;
  const auto& right = side == Side::kPositive ? split.tp : split.tn;
  const char* wrong_name = side == Side::kPositive ? "FP" : "FN";
  const char* right_name = side == Side::kPositive ? "TP" : "TN";
  auto fit = [](const std::vector<double>& v, const char* name) {
    if (v.size() < 2)
      throw UndefinedMetricError(std::string("DIV undefined: group ") + name + " has " + std::to_string(v.size()) +
                                 " members");
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    if (!(sd > 0.0)) throw UndefinedMetricError(std::string("DIV undefined: group ") + name + " has zero variance");
    return std::pair{m, sd};
  };
  const auto [mw, sw] = fit(wrong, wrong_name);
  const auto [mr, sr] = fit(right, right_name);
  return gaussian_kl(mw, sw, mr, sr);
}

struct EntropyRanking {
  std::vector<int> token_ids;      // ascending entropy
  std::vector<std::string> tokens;
  std::vector<double> entropy;
  bool has_degenerate = false;     // some scale is 0, entropy -inf
};

/// sum_d 1/2 ln(2 pi e s_d^2) per row.
inline Vector row_entropy(const Matrix& scale) {
  const double c = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  Vector out(scale.rows());
  for (Eigen::Index r = 0; r < scale.rows(); ++r) {
    double h = 0.0;
    for (Eigen::Index d = 0; d < scale.cols(); ++d)
      h += scale(r, d) > 0.0 ? c + std::log(scale(r, d)) : -std::numeric_limits<double>::infinity();
    out(r) = h;
  }
  return out;
}

/// Ranks the code tokens of a stochastic embedding table by total entropy,
/// most certain first. Special tokens are left out.
inline EntropyRanking embedding_entropy(const MeanFieldTensor& block, const Vocabulary& vocab) {
  if (block.rho.size() == 0) throw ConfigError("eval.entropy", "embedding block is not stochastic");
  if (block.rho.rows() != vocab.size()) throw DimensionError("embedding rows differ from vocabulary size");
  const Vector h = row_entropy(block.scale());
  std::vector<int> ids;
  for (int id = 0; id < vocab.size(); ++id)
    if (vocab.is_code(id)) ids.push_back(id);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return h(a) < h(b); });
  EntropyRanking out;
  for (int id : ids) {
    out.token_ids.push_back(id);
    out.tokens.push_back(vocab.token(id));
    out.entropy.push_back(h(id));
    if (std::isinf(h(id))) out.has_degenerate = true;
  }
  return out;
}

}  // namespace dbgp
