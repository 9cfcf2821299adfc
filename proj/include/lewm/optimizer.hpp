#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lewm/autograd.hpp"

namespace lewm {

struct AdamConfig {
  double step_size = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected adaptive-moment optimizer over the trainable entries of a
/// ParameterSet. Moment buffers are allocated lazily on the first step and
/// keyed by position, so the set must not change shape between steps.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {
    if (!(cfg_.step_size > 0.0)) throw Error("Adam step size must be > 0");
  }

  void step(ParameterSet& params) {
    if (first_.empty()) {
      for (const auto& p : params) {
        first_.emplace_back(p.value.shape(), 0.0);
        second_.emplace_back(p.value.shape(), 0.0);
      }
    }
    if (first_.size() != params.size()) throw ShapeError("Adam: parameter count changed between steps");
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    std::size_t k = 0;
    for (auto& p : params) {
      Array& m = first_[k];
      Array& v = second_[k];
      ++k;
      if (!p.trainable) continue;
      require_same_shape(p.value, p.grad, ("Adam gradient for '" + p.name + "'").c_str());
      require_same_shape(p.value, m, ("Adam state for '" + p.name + "'").c_str());
      auto& w = p.value.storage();
      const auto& g = p.grad.storage();
      auto& ms = m.storage();
      auto& vs = v.storage();
      for (std::size_t i = 0; i < w.size(); ++i) {
        ms[i] = cfg_.beta1 * ms[i] + (1.0 - cfg_.beta1) * g[i];
        vs[i] = cfg_.beta2 * vs[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = ms[i] / bc1;
        const double vhat = vs[i] / bc2;
        w[i] -= cfg_.step_size * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
    }
  }

  std::uint64_t steps() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<Array> first_;
  std::vector<Array> second_;
  std::uint64_t steps_ = 0;
};

}  // namespace lewm
