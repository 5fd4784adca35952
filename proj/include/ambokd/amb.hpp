#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>

#include "ambokd/errors.hpp"

// Adaptive modality balancing: CE-ratio KD weights and the progress-driven
// gradient ratio that scales each student's optimizer step.
namespace ambokd {

struct AmbConfig {
  double gamma = 3.0;
  double r_min = 0.1;
  double r_max = 10.0;
  double alpha_min = 0.1;
  double alpha_max = 10.0;
  double beta_min = 0.1;
  double beta_max = 10.0;
  double ratio_floor = 1e-3;

  void validate() const {
    auto bounds = [](double lo, double hi, const char* lo_key, const char* hi_key) {
      if (!(lo < hi))
        throw config_error(std::string("amb.") + lo_key + " must be below amb." +
                           hi_key);
    };
    bounds(r_min, r_max, "r_min", "r_max");
    bounds(alpha_min, alpha_max, "alpha_min", "alpha_max");
    bounds(beta_min, beta_max, "beta_min", "beta_max");
    if (!(gamma > 0.0)) throw config_error("amb.gamma must be positive");
    if (!(ratio_floor > 0.0)) throw config_error("amb.ratio_floor must be positive");
  }
};

/// Clamp to [lo, hi].
inline double saturate(double x, double lo, double hi) {
  if (!(lo < hi))
    throw parameter_error("saturate: lower bound " + std::to_string(lo) +
                          " is not below upper bound " + std::to_string(hi));
  return std::min(std::max(x, lo), hi);
}

struct KdWeights {
  double alpha = 1.0;
  double beta = 1.0;
};

/// Called with a description when an input had to be floored.
using AmbWarning = std::function<void(const std::string&)>;

/// alpha = Sat(ce_s / ce_ta), beta = Sat(ce_s / ce_tb). Nonpositive CE values
/// are floored at cfg.ratio_floor.
inline KdWeights dynamic_weights(double ce_s, double ce_ta, double ce_tb,
                                 const AmbConfig& cfg, const AmbWarning& warn = {}) {
  auto floored = [&](double v, const char* what) {
    if (v > 0.0) return v;
    if (warn)
      warn(std::string("dynamic_weights: nonpositive ") + what + " CE " +
           std::to_string(v) + " floored at " + std::to_string(cfg.ratio_floor));
    return cfg.ratio_floor;
  };
  const double s = floored(ce_s, "student");
  const double a = floored(ce_ta, "teacher a");
  const double b = floored(ce_tb, "teacher b");
  return {saturate(s / a, cfg.alpha_min, cfg.alpha_max),
          saturate(s / b, cfg.beta_min, cfg.beta_max)};
}

/// Fractional CE reduction relative to the epoch-1 baseline. May be negative.
inline double progress_ratio(double l_base, double l_current) {
  if (!(l_base > 0.0))
    throw state_error("progress_ratio: baseline loss " + std::to_string(l_base) +
                      " is not positive (baseline not captured)");
  return (l_base - l_current) / l_base;
}

/// 1 during epoch 1; afterwards Sat(((r_ta + r_tb) / (2 r_s))^gamma) with each
/// ratio floored at cfg.ratio_floor.
inline double dynamic_gradient_ratio(double r_s, double r_ta, double r_tb, int epoch,
                                     const AmbConfig& cfg) {
  if (epoch < 1)
    throw parameter_error("dynamic_gradient_ratio: epoch must be >= 1, got " +
                          std::to_string(epoch));
  if (epoch == 1) return 1.0;
  const double s = std::max(r_s, cfg.ratio_floor);
  const double a = std::max(r_ta, cfg.ratio_floor);
  const double b = std::max(r_tb, cfg.ratio_floor);
  const double base = (a + b) / (2.0 * s);
  return saturate(std::pow(base, cfg.gamma), cfg.r_min, cfg.r_max);
}

enum class Branch : std::size_t { eeg = 0, visual = 1, fusion = 2 };

inline constexpr std::array<Branch, 3> kBranches = {Branch::eeg, Branch::visual,
                                                    Branch::fusion};

inline const char* branch_name(Branch b) {
  switch (b) {
    case Branch::eeg: return "eeg";
    case Branch::visual: return "visual";
    case Branch::fusion: return "fusion";
  }
  return "?";
}

inline std::size_t index(Branch b) { return static_cast<std::size_t>(b); }

/// The two teachers of a student, in (T_a, T_b) order.
inline std::array<Branch, 2> teachers_of(Branch student) {
  switch (student) {
    case Branch::eeg: return {Branch::visual, Branch::fusion};
    case Branch::visual: return {Branch::eeg, Branch::fusion};
    case Branch::fusion: return {Branch::eeg, Branch::visual};
  }
  return {Branch::eeg, Branch::visual};
}

/// Epoch bookkeeping for the gradient ratio: baseline capture during epoch 1,
/// progress ratios afterwards. Baselines are never refreshed.
class AmbState {
 public:
  explicit AmbState(AmbConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  const AmbConfig& config() const { return cfg_; }
  int epoch() const { return epoch_; }

  /// Enters the given (1-based) epoch. Leaving epoch 1 freezes the baselines.
  void begin_epoch(int epoch) {
    if (epoch < 1) throw parameter_error("AmbState: epoch must be >= 1");
    if (epoch_ == 1 && epoch > 1) freeze_baselines();
    epoch_ = epoch;
  }

  /// Records one batch of per-branch CE. Only epoch-1 batches feed baselines.
  void observe(const std::array<double, 3>& ce) {
    if (epoch_ != 1) return;
    for (std::size_t i = 0; i < 3; ++i) accum_[i] += ce[i];
    ++batches_;
  }

  bool has_baselines() const { return frozen_; }

  double baseline(Branch b) const {
    if (!frozen_) throw state_error("AmbState: baselines not captured yet");
    return base_[index(b)];
  }

  /// R^DG for `student` given this batch's per-branch CE.
  double gradient_ratio(Branch student, const std::array<double, 3>& ce) const {
    if (epoch_ == 1) return 1.0;
    if (!frozen_) throw state_error("AmbState: baselines not captured yet");
    const auto [ta, tb] = teachers_of(student);
    return dynamic_gradient_ratio(progress_ratio(base_[index(student)], ce[index(student)]),
                                  progress_ratio(base_[index(ta)], ce[index(ta)]),
                                  progress_ratio(base_[index(tb)], ce[index(tb)]),
                                  epoch_, cfg_);
  }

 private:
  void freeze_baselines() {
    if (batches_ == 0) throw state_error("AmbState: epoch 1 observed no batches");
    for (std::size_t i = 0; i < 3; ++i) {
      base_[i] = accum_[i] / static_cast<double>(batches_);
      if (!(base_[i] > 0.0))
        throw state_error(std::string("AmbState: baseline CE of branch ") +
                          branch_name(kBranches[i]) + " is not positive");
    }
    frozen_ = true;
  }

  AmbConfig cfg_;
  int epoch_ = 1;
  std::array<double, 3> accum_{};
  std::array<double, 3> base_{};
  std::size_t batches_ = 0;
  bool frozen_ = false;
};

}  // namespace ambokd
