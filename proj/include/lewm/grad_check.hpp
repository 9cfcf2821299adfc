#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "lewm/autograd.hpp"
#include "lewm/rng.hpp"

namespace lewm {

/// Builds a scalar loss on a fresh graph from the current parameter values.
using LossBuilder = std::function<Var(Graph&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients against central differences:
/// max over coordinates of |analytic - numeric| / max(1, |numeric|).
/// When `max_coords_per_param` is nonzero, a seeded subset of coordinates of
/// each larger parameter is checked instead of all of them.
inline GradCheckResult grad_check_detailed(const LossBuilder& build, ParameterSet& params, double eps,
                                           std::size_t max_coords_per_param = 0,
                                           std::uint64_t seed = 0) {
  if (!(eps > 0.0)) throw Error("grad_check: eps must be > 0");
  {
    Graph g;
    Var loss = build(g);
    g.backward(loss);
  }
  GradCheckResult result;
  Rng rng(seed);
  for (auto& p : params) {
    if (!p.trainable) continue;
    const Array analytic = p.grad;
    const std::size_t n = p.value.size();
    std::vector<std::size_t> coords;
    if (max_coords_per_param == 0 || n <= max_coords_per_param) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t k = 0; k < max_coords_per_param; ++k) coords.push_back(rng.index(n));
    }
    for (std::size_t i : coords) {
      const double saved = p.value[i];
      auto eval_at = [&](double x) {
        p.value[i] = x;
        Graph g;
        const double v = build(g).value().item();
        if (!std::isfinite(v)) throw NonFiniteError("grad_check: non-finite loss at perturbed point");
        return v;
      };
      const double up = eval_at(saved + eps);
      const double down = eval_at(saved - eps);
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      ++result.coordinates;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = p.name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

inline double grad_check(const LossBuilder& build, ParameterSet& params, double eps,
                         std::size_t max_coords_per_param = 0) {
  return grad_check_detailed(build, params, eps, max_coords_per_param).max_rel_error;
}

}  // namespace lewm
