// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace edrl {

/// Mann-Whitney AUC with midranks for ties. NaN when either side is empty.
inline double binary_auc(std::span<const double> scores, const std::vector<bool>& positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t q = i; q <= j; ++q) rank[order[q]] = mid;
    i = j + 1;
  }
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (positive[i]) {
      pos += 1.0;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

struct ClassMetrics {
  std::size_t support = 0;    // samples labelled with the class
  std::size_t predicted = 0;  // samples predicted as the class
  std::size_t true_positive = 0;
  double f1 = 0.0;
  double auc = std::numeric_limits<double>::quiet_NaN();
};

struct MetricsReport {
  double accuracy = 0.0;
  double auc = 0.0;  // macro one-vs-rest over classes with both positives and negatives
  double f1 = 0.0;   // macro over classes that occur in labels or predictions
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<ClassMetrics> per_class;
  std::string regime;
  std::size_t epoch = 0;
};

/// Predictions are the row argmax of `scores` ([N, K] row-major), lowest
/// class on ties.
inline MetricsReport compute_metrics(std::span<const double> scores, const std::vector<std::size_t>& labels,
                                     std::size_t classes) {
  const std::size_t n = labels.size();
  if (n == 0) throw std::invalid_argument("metrics on an empty test set");
  if (scores.size() != n * classes) throw std::invalid_argument("score table does not match labels");
  MetricsReport r;
  r.total = n;
  r.per_class.resize(classes);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= classes) throw std::invalid_argument("label out of range in metrics");
    std::size_t pred = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (scores[i * classes + c] > scores[i * classes + pred]) pred = c;
    r.per_class[labels[i]].support++;
    r.per_class[pred].predicted++;
    if (pred == labels[i]) {
      r.per_class[pred].true_positive++;
      r.correct++;
    }
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(n);

  double f1_sum = 0.0, auc_sum = 0.0;
  std::size_t f1_count = 0, auc_count = 0;
  std::vector<double> column(n);
  std::vector<bool> positive(n);
  for (std::size_t c = 0; c < classes; ++c) {
    auto& m = r.per_class[c];
    const std::size_t denom = m.support + m.predicted;
    if (denom > 0) {
      m.f1 = 2.0 * static_cast<double>(m.true_positive) / static_cast<double>(denom);
      f1_sum += m.f1;
      ++f1_count;
    }
    for (std::size_t i = 0; i < n; ++i) {
      column[i] = scores[i * classes + c];
      positive[i] = labels[i] == c;
    }
    m.auc = binary_auc(column, positive);
    if (!std::isnan(m.auc)) {
      auc_sum += m.auc;
      ++auc_count;
    }
  }
  r.f1 = f1_count ? f1_sum / static_cast<double>(f1_count) : 0.0;
  r.auc = auc_count ? auc_sum / static_cast<double>(auc_count) : std::numeric_limits<double>::quiet_NaN();
  return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    per_class.push_back({{"class", c},
                         {"support", m.support},
                         {"predicted", m.predicted},
                         {"true_positive", m.true_positive},
                         {"f1", m.f1},
                         {"auc", std::isnan(m.auc) ? nlohmann::json(nullptr) : nlohmann::json(m.auc)}});
  }
  return {{"acc", r.accuracy},
          {"auc", std::isnan(r.auc) ? nlohmann::json(nullptr) : nlohmann::json(r.auc)},
          {"f1", r.f1},
          {"correct", r.correct},
          {"total", r.total},
          {"per_class", per_class},
          {"regime", r.regime},
          {"epoch", r.epoch}};
}

}  // namespace edrl
