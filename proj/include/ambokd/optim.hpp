#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "ambokd/errors.hpp"
#include "ambokd/tape.hpp"

namespace ambokd {

struct AdamConfig {
  double eta = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool bias_correction = false;

  void validate() const {
    if (!(eta > 0.0)) throw config_error("optim.eta must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw config_error("optim.beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw config_error("optim.beta2 must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw config_error("optim.epsilon must be positive");
  }
};

/// Adam moments over a subset of a parameter set. The step multiplies the
/// learning rate by an external ratio; the moments never see it.
///
///   m <- b1 m + (1 - b1) g
///   v <- b2 v + (1 - b2) g^2
///   theta <- theta - r * eta * m / (sqrt(v) + eps)
///
/// Bias correction is off by default and, when enabled, divides m and v by
/// (1 - b^t) before the update.
class ModulatedAdam {
 public:
  ModulatedAdam(AdamConfig cfg, const ParamSet& params, std::vector<std::string> owned)
      : cfg_(cfg), owned_(std::move(owned)) {
    cfg_.validate();
    for (const std::string& name : owned_) {
      const Tensor& p = params.get(name);
      mean_.emplace(name, Tensor(p.shape()));
      var_.emplace(name, Tensor(p.shape()));
    }
  }

  /// Applies one step to the owned parameters from their gradient slots.
  /// Validates every gradient before touching any state.
  void step(ParamSet& params, double r_dg) {
    if (!(r_dg > 0.0) || !std::isfinite(r_dg))
      throw parameter_error("adam_step: ratio must be positive, got " +
                            std::to_string(r_dg));
    for (const std::string& name : owned_)
      if (!params.grad(name).all_finite())
        throw numerical_error("adam_step: non-finite gradient in parameter '" + name +
                              "'");
    ++t_;
    const double c1 = cfg_.bias_correction ? 1.0 - std::pow(cfg_.beta1, t_) : 1.0;
    const double c2 = cfg_.bias_correction ? 1.0 - std::pow(cfg_.beta2, t_) : 1.0;
    for (const std::string& name : owned_) {
      Tensor& theta = params.get(name);
      const Tensor& g = params.grad(name);
      Tensor& m = mean_.at(name);
      Tensor& v = var_.at(name);
      for (std::size_t i = 0; i < theta.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double base = cfg_.eta * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.epsilon);
        theta[i] -= r_dg * base;
      }
    }
  }

  const AdamConfig& config() const { return cfg_; }
  const std::vector<std::string>& owned() const { return owned_; }
  std::size_t steps() const { return t_; }
  const Tensor& first_moment(const std::string& name) const { return mean_.at(name); }
  const Tensor& second_moment(const std::string& name) const { return var_.at(name); }

 private:
  AdamConfig cfg_;
  std::vector<std::string> owned_;
  std::map<std::string, Tensor> mean_;
  std::map<std::string, Tensor> var_;
  std::size_t t_ = 0;
};

}  // namespace ambokd
