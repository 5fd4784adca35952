#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "ambokd/errors.hpp"
#include "ambokd/ops.hpp"
#include "ambokd/tensor.hpp"

namespace ambokd {

/// ROC AUC via the Mann–Whitney rank statistic, ties given their mean rank.
/// Undefined (nullopt) unless both classes are present.
inline std::optional<double> auc(std::span<const double> scores,
                                 std::span<const std::uint8_t> positive) {
  if (scores.size() != positive.size())
    throw dimension_error("auc: " + std::to_string(scores.size()) + " scores for " +
                          std::to_string(positive.size()) + " labels");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (positive[order[k]]) {
        rank_sum += mid_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

struct Metrics {
  std::optional<double> auc;
  double acc = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

namespace detail {

struct Counts {
  double tp = 0, fp = 0, fn = 0;
};

inline void precision_recall_f1(const Counts& c, double& precision, double& recall,
                                double& f1) {
  precision = c.tp + c.fp > 0 ? c.tp / (c.tp + c.fp) : 0.0;
  recall = c.tp + c.fn > 0 ? c.tp / (c.tp + c.fn) : 0.0;
  f1 = precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

}  // namespace detail

/// Metrics from [n × M] class probabilities. Predictions are the argmax.
/// Binary: AUC ranks the class-1 probability, F1/precision are for class 1.
/// M > 2: one-vs-rest AUC, F1 and precision, macro-averaged.
inline Metrics classification_metrics(const Tensor& probabilities,
                                      std::span<const std::uint32_t> labels) {
  if (probabilities.rank() != 2 || probabilities.dim(0) != labels.size())
    throw dimension_error("metrics: probabilities " + shape_str(probabilities.shape()) +
                          " for " + std::to_string(labels.size()) + " labels");
  const std::size_t n = labels.size(), m = probabilities.dim(1);
  if (n == 0) throw data_error("metrics: empty dataset");
  std::vector<std::uint32_t> pred(n);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = probabilities.data().data() + i * m;
    pred[i] = static_cast<std::uint32_t>(std::max_element(row, row + m) - row);
    if (pred[i] == labels[i]) ++correct;
  }
  Metrics out;
  out.acc = static_cast<double>(correct) / static_cast<double>(n);

  auto one_vs_rest = [&](std::uint32_t cls, double& p, double& r, double& f1,
                         std::optional<double>& a) {
    detail::Counts c;
    std::vector<double> scores(n);
    std::vector<std::uint8_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      const bool truth = labels[i] == cls, guess = pred[i] == cls;
      c.tp += truth && guess;
      c.fp += !truth && guess;
      c.fn += truth && !guess;
      scores[i] = probabilities[i * m + cls];
      pos[i] = truth;
    }
    detail::precision_recall_f1(c, p, r, f1);
    a = auc(scores, pos);
  };

  if (m == 2) {
    one_vs_rest(1, out.precision, out.recall, out.f1, out.auc);
    return out;
  }
  double sp = 0, sr = 0, sf = 0, sa = 0;
  bool auc_defined = true;
  for (std::uint32_t c = 0; c < m; ++c) {
    double p, r, f;
    std::optional<double> a;
    one_vs_rest(c, p, r, f, a);
    sp += p;
    sr += r;
    sf += f;
    if (a) sa += *a;
    else auc_defined = false;
  }
  const double dm = static_cast<double>(m);
  out.precision = sp / dm;
  out.recall = sr / dm;
  out.f1 = sf / dm;
  if (auc_defined) out.auc = sa / dm;
  return out;
}

/// Metrics from raw logits (softmax applied first).
inline Metrics metrics_from_logits(const Tensor& logits,
                                   std::span<const std::uint32_t> labels) {
  return classification_metrics(softmax_values(logits), labels);
}

}  // namespace ambokd
