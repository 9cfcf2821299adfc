#pragma once

// Training objectives over a window of encoded frames.
//
// Layout: Z holds steps x batch rows in time-major order (row t*B + i is
// frame t of trajectory i). Z_pred holds one row per predicted frame, i.e.
// (steps - history) x batch rows aligned with frames history..steps-1.

#include <string>
#include <utility>
#include <vector>

#include "lewm/autograd.hpp"
#include "lewm/kv.hpp"
#include "lewm/rng.hpp"
#include "lewm/sigreg.hpp"
#include "lewm/worldmodel.hpp"

namespace lewm {

struct EmbeddingBatch {
  Var Z;
  Var Z_pred;
  std::size_t steps = 0;
  std::size_t batch = 0;
  std::size_t history = 1;

  void validate() const {
    if (steps <= history) {
      throw ShapeError("EmbeddingBatch: " + std::to_string(steps) + " steps leave nothing to predict with history " +
                       std::to_string(history));
    }
    if (Z.rows() != steps * batch) {
      throw ShapeError("EmbeddingBatch: Z " + shape_str(Z.value().shape()) + " is not " + std::to_string(steps) +
                       " x " + std::to_string(batch) + " rows");
    }
    if (Z_pred.rows() != (steps - history) * batch || Z_pred.cols() != Z.cols()) {
      throw ShapeError("EmbeddingBatch: predictions " + shape_str(Z_pred.value().shape()) + " do not align with Z " +
                       shape_str(Z.value().shape()));
    }
  }

  /// Encoded frames the predictions are compared against.
  Var targets() const { return slice_rows(Z, history * batch, (steps - history) * batch); }
};

/// Named scalar terms plus their weighted total.
struct LossTerms {
  Var total;
  std::vector<std::pair<std::string, Var>> components;

  Var component(const std::string& name) const {
    for (const auto& [n, v] : components)
      if (n == name) return v;
    throw Error("no loss component named '" + name + "'");
  }
  double value(const std::string& name) const { return component(name).value().item(); }
};

/// Mean squared error over every entry.
inline Var pred_loss(Var Z_pred, Var Z_target) {
  require_same_shape(Z_pred.value(), Z_target.value(), "pred_loss");
  return mean(square(sub(Z_pred, Z_target)));
}

/// pred + lambda * stepwise SIGReg of the encoded frames.
inline LossTerms lewm_loss(const EmbeddingBatch& eb, const DirectionSet& U, const EppsPulleyConfig& ep,
                           double lambda_loss) {
  eb.validate();
  if (!(lambda_loss >= 0.0)) throw Error("lewm_loss: lambda must be >= 0");
  Var pred = pred_loss(eb.Z_pred, eb.targets());
  Var reg = stepwise_sigreg(eb.Z, eb.steps, eb.batch, U, ep);
  LossTerms out;
  out.total = add(pred, scale(reg, lambda_loss));
  out.components = {{"pred", pred}, {"sigreg", reg}};
  return out;
}

// ---------------------------------------------------------------------------
// PLDM baseline

struct PldmCoefficients {
  double alpha = 18.0;
  double beta = 12.0;
  double gamma = 0.2;
  double zeta = 0.7;
  double nu = 0.0;
  double mu = 0.0;
  double epsilon = 1e-4;

  void validate() const {
    for (double c : {alpha, beta, gamma, zeta, nu, mu, epsilon}) {
      if (!std::isfinite(c)) throw Error("PldmCoefficients: coefficients must be finite");
    }
    if (!(epsilon > 0.0)) throw Error("PldmCoefficients: epsilon must be > 0");
  }

  void write(KeyValues& kv, const std::string& p = "pldm.") const {
    kv.set(p + "alpha", alpha);
    kv.set(p + "beta", beta);
    kv.set(p + "gamma", gamma);
    kv.set(p + "zeta", zeta);
    kv.set(p + "nu", nu);
    kv.set(p + "mu", mu);
    kv.set(p + "epsilon", epsilon);
  }
  void read(const KeyValues& kv, const std::string& p = "pldm.") {
    kv.read(p + "alpha", alpha);
    kv.read(p + "beta", beta);
    kv.read(p + "gamma", gamma);
    kv.read(p + "zeta", zeta);
    kv.read(p + "nu", nu);
    kv.read(p + "mu", mu);
    kv.read(p + "epsilon", epsilon);
  }

  friend bool operator==(const PldmCoefficients&, const PldmCoefficients&) = default;
};

inline const std::vector<std::string>& pldm_component_names() {
  static const std::vector<std::string> names{"pred", "var", "cov", "time_sim", "time_var", "time_cov", "idm"};
  return names;
}

/// Inverse-dynamics head: (z_t, z_{t+1}) -> action block.
class InverseDynamics {
 public:
  InverseDynamics() = default;
  InverseDynamics(std::size_t embed_dim, std::size_t block_dim, std::size_t hidden, std::uint64_t seed)
      : block_dim_(block_dim) {
    Rng rng(seed);
    nn::add_linear(params_, rng, "idm.l0", 2 * embed_dim, hidden);
    nn::add_linear(params_, rng, "idm.out", hidden, block_dim);
  }

  ParameterSet& params() { return params_; }
  std::size_t block_dim() const { return block_dim_; }

  Var operator()(Graph& g, Var z_now, Var z_next) {
    Var h = silu(nn::linear(g, params_, "idm.l0", concat_cols({z_now, z_next})));
    return nn::linear(g, params_, "idm.out", h);
  }

 private:
  std::size_t block_dim_ = 0;
  ParameterSet params_;
};

namespace detail {

// Rows of one slice minus their column mean, plus the unbiased per-column
// variance of the slice.
struct Centered {
  Var centered;
  Var var;
};

inline Centered center(Var X) {
  const double n = static_cast<double>(X.rows());
  Var c = sub_row(X, col_mean(X));
  return {c, scale(col_sum(square(c)), 1.0 / (n - 1.0))};
}

// sum_d max(0, 1 - sqrt(var_d) + eps)
inline Var variance_hinge(Var var, double eps) { return sum(relu(add_scalar(scale(sqrt(var), -1.0), 1.0 + eps))); }

inline Array offdiag_mask(std::size_t d) {
  Array m = Array::matrix(d, d, 1.0);
  for (std::size_t i = 0; i < d; ++i) m(i, i) = 0.0;
  return m;
}

// sum_{i != j} Cov_ij^2 with Cov = c^T c / (n - 1).
inline Var offdiag_cov_sq(const Centered& c, const Array& offdiag) {
  const double n = static_cast<double>(c.centered.rows());
  Var cov = scale(matmul(transpose(c.centered), c.centered), 1.0 / (n - 1.0));
  return sum(square(mask(cov, offdiag)));
}

}  // namespace detail

/// Seven-term PLDM objective. actions (when given) holds one row per
/// consecutive frame pair, time-major like Z; the IDM term is computed only
/// when an inverse-dynamics head is supplied.
inline LossTerms pldm_loss(const EmbeddingBatch& eb, const Var* actions, InverseDynamics* idm,
                           const PldmCoefficients& k) {
  k.validate();
  eb.validate();
  const std::size_t T = eb.steps, B = eb.batch, D = eb.Z.cols();
  if (B < 2) throw DegenerateBatchError("pldm_loss: var/cov terms need batch >= 2, got " + std::to_string(B));
  if (T < 2) throw DegenerateBatchError("pldm_loss: time terms need >= 2 steps, got " + std::to_string(T));
  if (k.mu > 0.0 && (idm == nullptr || actions == nullptr)) {
    throw Error("pldm_loss: idm term has weight " + format_double(k.mu) + " but no inverse-dynamics head");
  }
  Graph& g = eb.Z.graph();
  const double bt_pred = static_cast<double>(B * (T - eb.history));
  const double bt_pair = static_cast<double>(B * (T - 1));
  const Array offdiag = detail::offdiag_mask(D);

  Var pred = scale(sum(square(sub(eb.Z_pred, eb.targets()))), 1.0 / bt_pred);

  Var var_sum, cov_sum;
  for (std::size_t t = 0; t < T; ++t) {
    const auto c = detail::center(slice_rows(eb.Z, t * B, B));
    Var v = detail::variance_hinge(c.var, k.epsilon);
    Var cv = detail::offdiag_cov_sq(c, offdiag);
    var_sum = var_sum.valid() ? add(var_sum, v) : v;
    cov_sum = cov_sum.valid() ? add(cov_sum, cv) : cv;
  }
  Var l_var = scale(var_sum, 1.0 / static_cast<double>(T * D));
  Var l_cov = scale(cov_sum, 1.0 / static_cast<double>(T * D));

  Var now = slice_rows(eb.Z, 0, (T - 1) * B);
  Var next = slice_rows(eb.Z, B, (T - 1) * B);
  Var time_sim = scale(sum(square(sub(next, now))), 1.0 / bt_pair);

  Var tvar_sum, tcov_sum;
  for (std::size_t i = 0; i < B; ++i) {
    std::vector<std::size_t> rows(T);
    for (std::size_t t = 0; t < T; ++t) rows[t] = t * B + i;
    const auto c = detail::center(gather_rows(eb.Z, std::move(rows)));
    Var v = detail::variance_hinge(c.var, k.epsilon);
    Var cv = detail::offdiag_cov_sq(c, offdiag);
    tvar_sum = tvar_sum.valid() ? add(tvar_sum, v) : v;
    tcov_sum = tcov_sum.valid() ? add(tcov_sum, cv) : cv;
  }
  Var time_var = scale(tvar_sum, 1.0 / static_cast<double>(B * D));
  Var time_cov = scale(tcov_sum, 1.0 / static_cast<double>(B * D));

  Var l_idm;
  if (idm != nullptr && actions != nullptr) {
    if (actions->rows() != (T - 1) * B || actions->cols() != idm->block_dim()) {
      throw ShapeError("pldm_loss: actions " + shape_str(actions->value().shape()) + " do not match " +
                       std::to_string((T - 1) * B) + " frame pairs");
    }
    l_idm = scale(sum(square(sub((*idm)(g, now, next), *actions))), 1.0 / bt_pair);
  } else {
    l_idm = g.constant(Array::scalar(0.0), "idm_off");
  }

  LossTerms out;
  out.components = {{"pred", pred},         {"var", l_var},          {"cov", l_cov}, {"time_sim", time_sim},
                    {"time_var", time_var}, {"time_cov", time_cov}, {"idm", l_idm}};
  const double w[] = {1.0, k.alpha, k.beta, k.gamma, k.zeta, k.nu, k.mu};
  Var total;
  for (std::size_t c = 0; c < out.components.size(); ++c) {
    Var term = c == 0 ? out.components[c].second : scale(out.components[c].second, w[c]);
    total = total.valid() ? add(total, term) : term;
  }
  out.total = total;
  return out;
}

}  // namespace lewm
