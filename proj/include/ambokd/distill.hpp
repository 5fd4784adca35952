#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>

#include "ambokd/errors.hpp"
#include "ambokd/ops.hpp"
#include "ambokd/tape.hpp"

// Loss functions for mutual distillation: per-branch cross-entropy, the
// temperature-softened KL term, and the weighted per-student total.
namespace ambokd {

namespace detail {

inline void check_labels(const Tensor& logits, std::span<const std::uint32_t> labels,
                         const char* op) {
  require_rank(logits, 2, op);
  if (logits.dim(0) == 0) throw data_error(std::string(op) + ": empty batch");
  if (labels.size() != logits.dim(0))
    throw dimension_error(std::string(op) + ": " + std::to_string(labels.size()) +
                          " labels for batch of " + std::to_string(logits.dim(0)));
  for (std::uint32_t y : labels)
    if (y >= logits.dim(1))
      throw data_error(std::string(op) + ": label " + std::to_string(y) +
                       " out of range [0, " + std::to_string(logits.dim(1)) + ")");
}

}  // namespace detail

/// Mean over the batch of -log softmax(logits)[label].
inline Var cross_entropy(Var logits, std::span<const std::uint32_t> labels) {
  detail::check_labels(logits.value(), labels, "cross_entropy");
  return scale(mean(pick(log_softmax(logits), labels)), -1.0);
}

/// Mean over the batch of KL(q || p) with q = softmax(teacher/tau) and
/// p = softmax(student/tau). The teacher enters as a constant.
inline Var kd_loss(Var student_logits, const Tensor& teacher_logits, double tau) {
  detail::check_temperature(tau, "kd_loss");
  const Tensor& s = student_logits.value();
  detail::require_rank(s, 2, "kd_loss");
  if (s.shape() != teacher_logits.shape())
    throw dimension_error("kd_loss: student " + shape_str(s.shape()) +
                          " vs teacher " + shape_str(teacher_logits.shape()));
  if (s.dim(0) == 0) throw data_error("kd_loss: empty batch");
  const double inv_n = 1.0 / static_cast<double>(s.dim(0));

  const Tensor q = softmax_values(teacher_logits, tau);
  double entropy_term = 0.0;  // Σ q log q
  Tensor weights(q.shape());
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] > 0.0) entropy_term += q[i] * std::log(q[i]);
    weights[i] = -q[i] * inv_n;
  }
  Var cross = dot_const(log_softmax(student_logits, tau), weights);
  Tape& tape = *student_logits.tape;
  Var kl = add(cross, tape.constant(Tensor::scalar(entropy_term * inv_n)));
  // KL is nonnegative; a negative value here is rounding in the two sums.
  if (kl.value()[0] < 0.0)
    kl = add(kl, tape.constant(Tensor::scalar(-kl.value()[0])));
  return kl;
}

inline Var kd_loss(Var student_logits, Var teacher_logits, double tau) {
  return kd_loss(student_logits, teacher_logits.value(), tau);
}

/// Per-student loss terms of one step.
struct LossBundle {
  double ce = 0.0;
  double kd_a = 0.0;
  double kd_b = 0.0;
  double alpha = 1.0;
  double beta = 1.0;
  double tau = 4.0;
  double total = 0.0;
};

/// ce + alpha·tau²·kd_a + beta·tau²·kd_b.
inline double total_loss(double ce_s, double kd_a, double kd_b, double alpha,
                         double beta, double tau) {
  if (ce_s < 0.0 || kd_a < 0.0 || kd_b < 0.0)
    throw parameter_error("total_loss: losses must be nonnegative");
  if (!(tau > 0.0)) throw parameter_error("total_loss: tau must be positive");
  const double t2 = tau * tau;
  return ce_s + alpha * t2 * kd_a + beta * t2 * kd_b;
}

/// Differentiable form of total_loss over recorded loss values.
inline Var total_loss(Var ce_s, Var kd_a, Var kd_b, double alpha, double beta,
                      double tau) {
  const double t2 = tau * tau;
  return add(add(ce_s, scale(kd_a, alpha * t2)), scale(kd_b, beta * t2));
}

/// Closed-form d(mean CE)/d(logits): (softmax(logits) - onehot) / batch.
/// Test oracle only; training differentiates through the tape.
inline Tensor ce_logit_gradient_oracle(const Tensor& logits,
                                       std::span<const std::uint32_t> labels) {
  detail::check_labels(logits, labels, "ce_logit_gradient_oracle");
  Tensor g = softmax_values(logits);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    g[r * cols + labels[r]] -= 1.0;
    for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] /= static_cast<double>(rows);
  }
  return g;
}

/// Value-only cross-entropy, for reporting and evaluation.
inline double cross_entropy_value(const Tensor& logits,
                                  std::span<const std::uint32_t> labels) {
  detail::check_labels(logits, labels, "cross_entropy");
  Tensor ls(logits.shape());
  detail::log_softmax_rows(logits.data(), ls.data(), logits.dim(1), 1.0);
  double s = 0.0;
  for (std::size_t r = 0; r < labels.size(); ++r) s -= ls[r * logits.dim(1) + labels[r]];
  return s / static_cast<double>(labels.size());
}

}  // namespace ambokd
