#pragma once

// Sketched isotropic-Gaussian regularizer: project embeddings on random unit
// directions, compare each projection's empirical characteristic function to
// the standard normal one with a weighted Epps-Pulley statistic, average.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "lewm/array.hpp"
#include "lewm/autograd.hpp"
#include "lewm/error.hpp"
#include "lewm/kv.hpp"
#include "lewm/rng.hpp"

namespace lewm {

struct EppsPulleyConfig {
  std::size_t knot_count = 17;
  double knot_lo = 0.2;
  double knot_hi = 4.0;
  /// Bandwidth of w(t) = exp(-t^2 / (2 bandwidth^2)). Unrelated to the loss weight.
  double weight_bandwidth = 4.0;

  void validate() const {
    if (knot_count < 2) throw Error("EppsPulleyConfig: knot_count must be >= 2");
    if (!(knot_lo < knot_hi)) throw Error("EppsPulleyConfig: knot_lo must be < knot_hi");
    if (!(weight_bandwidth > 0.0)) throw Error("EppsPulleyConfig: weight_bandwidth must be > 0");
  }

  double knot(std::size_t k) const {
    return knot_lo + (knot_hi - knot_lo) * static_cast<double>(k) / static_cast<double>(knot_count - 1);
  }
  double weight(double t) const { return std::exp(-t * t / (2.0 * weight_bandwidth * weight_bandwidth)); }

  void write(KeyValues& kv, const std::string& p = "sigreg.") const {
    kv.set_size(p + "knot_count", knot_count);
    kv.set(p + "knot_lo", knot_lo);
    kv.set(p + "knot_hi", knot_hi);
    kv.set(p + "weight_bandwidth", weight_bandwidth);
  }
  void read(const KeyValues& kv, const std::string& p = "sigreg.") {
    kv.read_size(p + "knot_count", knot_count);
    kv.read(p + "knot_lo", knot_lo);
    kv.read(p + "knot_hi", knot_hi);
    kv.read(p + "weight_bandwidth", weight_bandwidth);
  }

  friend bool operator==(const EppsPulleyConfig&, const EppsPulleyConfig&) = default;
};

/// Plain trapezoid weights on the configured uniform knots (no w(t)).
inline std::vector<double> trapezoid_weights(const EppsPulleyConfig& cfg) {
  cfg.validate();
  const double h = (cfg.knot_hi - cfg.knot_lo) / static_cast<double>(cfg.knot_count - 1);
  std::vector<double> w(cfg.knot_count, h);
  w.front() = 0.5 * h;
  w.back() = 0.5 * h;
  return w;
}

/// Trapezoid rule over the knot interval for samples f(t_k).
inline double trapezoid(std::span<const double> f, const EppsPulleyConfig& cfg) {
  if (f.size() != cfg.knot_count) throw ShapeError("trapezoid: expected one value per knot");
  const auto w = trapezoid_weights(cfg);
  double s = 0.0;
  for (std::size_t k = 0; k < f.size(); ++k) s += w[k] * f[k];
  return s;
}

struct DirectionSet {
  Array directions;  // M x d, unit rows
  std::uint64_t seed = 0;

  std::size_t count() const { return directions.rows(); }
  std::size_t dim() const { return directions.cols(); }
};

/// M directions uniform on the (d-1)-sphere: normalized standard-normal draws.
inline DirectionSet sample_directions(std::size_t count, std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw Error("sample_directions: dimension must be >= 1");
  if (count == 0) throw Error("sample_directions: need at least one direction");
  Rng rng(seed);
  Array U = Array::matrix(count, dim);
  for (std::size_t m = 0; m < count; ++m) {
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double v = rng.normal();
        U(m, j) = v;
        norm2 += v * v;
      }
    } while (std::sqrt(norm2) < 1e-12);
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t j = 0; j < dim; ++j) U(m, j) *= inv;
  }
  return DirectionSet{std::move(U), seed};
}

/// Per-training-step directions derived from (global seed, step).
inline DirectionSet directions_for_step(std::size_t count, std::size_t dim, std::uint64_t seed,
                                        std::uint64_t step) {
  return sample_directions(count, dim, derive_seed(seed, step));
}

struct ProjectionBatch {
  Array H;  // M x N: row m holds Z u^(m)
  std::size_t sample_count = 0;
};

inline ProjectionBatch project(const Array& Z, const DirectionSet& U) {
  if (Z.rank() != 2 || Z.cols() != U.dim()) {
    throw ShapeError("project: embeddings " + shape_str(Z.shape()) + " do not match directions " +
                     shape_str(U.directions.shape()));
  }
  Array H = Array::matrix(U.count(), Z.rows());
  detail::view(H).noalias() = detail::view(U.directions) * detail::view(Z).transpose();
  return ProjectionBatch{std::move(H), Z.rows()};
}

/// Differentiable projection: (N x d) -> (N x M), column m = Z u^(m).
inline Var project(Var Z, const DirectionSet& U) {
  if (Z.cols() != U.dim()) {
    throw ShapeError("project: embeddings " + shape_str(Z.value().shape()) + " do not match directions " +
                     shape_str(U.directions.shape()));
  }
  Array Ut = Array::matrix(U.dim(), U.count());
  detail::view(Ut) = detail::view(U.directions).transpose();
  return matmul(Z, Z.graph().constant(std::move(Ut), "directions^T"));
}

struct Ecf {
  std::vector<double> real;
  std::vector<double> imag;
};

/// phi_N(t) = (1/N) sum_n exp(i t h_n), evaluated directly.
inline Ecf ecf(std::span<const double> h, std::span<const double> t) {
  if (h.empty()) throw DegenerateBatchError("ecf: empty sample");
  Ecf out{std::vector<double>(t.size(), 0.0), std::vector<double>(t.size(), 0.0)};
  const double inv_n = 1.0 / static_cast<double>(h.size());
  for (std::size_t k = 0; k < t.size(); ++k) {
    double c = 0.0, s = 0.0;
    for (double x : h) {
      c += std::cos(t[k] * x);
      s += std::sin(t[k] * x);
    }
    out.real[k] = c * inv_n;
    out.imag[k] = s * inv_n;
  }
  return out;
}

namespace detail {

// Column-wise ECF on the uniform knot grid. The knots are equally spaced, so
// exp(i t_k h) is advanced by repeated multiplication with exp(i dt h): two
// sincos calls per entry instead of one per knot.
struct KnotEcf {
  std::size_t columns = 0;
  std::size_t knots = 0;
  std::vector<double> re;  // columns x knots
  std::vector<double> im;
};

inline KnotEcf knot_ecf(const Array& H, const EppsPulleyConfig& cfg) {
  const std::size_t N = H.rows(), M = H.cols(), K = cfg.knot_count;
  KnotEcf e{M, K, std::vector<double>(M * K, 0.0), std::vector<double>(M * K, 0.0)};
  const double t0 = cfg.knot(0);
  const double dt = cfg.knot(1) - t0;
  for (std::size_t n = 0; n < N; ++n) {
    const double* row = H.data().data() + n * M;
    for (std::size_t m = 0; m < M; ++m) {
      const double h = row[m];
      double c = std::cos(t0 * h), s = std::sin(t0 * h);
      const double dc = std::cos(dt * h), ds = std::sin(dt * h);
      double* re = e.re.data() + m * K;
      double* im = e.im.data() + m * K;
      for (std::size_t k = 0; k < K; ++k) {
        re[k] += c;
        im[k] += s;
        const double cn = c * dc - s * ds;
        s = s * dc + c * ds;
        c = cn;
      }
    }
  }
  const double inv_n = 1.0 / static_cast<double>(N);
  for (double& v : e.re) v *= inv_n;
  for (double& v : e.im) v *= inv_n;
  return e;
}

// Quadrature coefficient per knot: trapezoid weight times w(t_k).
inline std::vector<double> ep_coefficients(const EppsPulleyConfig& cfg) {
  auto c = trapezoid_weights(cfg);
  for (std::size_t k = 0; k < c.size(); ++k) c[k] *= cfg.weight(cfg.knot(k));
  return c;
}

inline std::vector<double> ep_statistics(const KnotEcf& e, const EppsPulleyConfig& cfg) {
  const auto coef = ep_coefficients(cfg);
  std::vector<double> stat(e.columns, 0.0);
  for (std::size_t m = 0; m < e.columns; ++m) {
    double acc = 0.0;
    for (std::size_t k = 0; k < e.knots; ++k) {
      const double t = cfg.knot(k);
      const double dr = e.re[m * e.knots + k] - std::exp(-0.5 * t * t);
      const double di = e.im[m * e.knots + k];
      acc += coef[k] * (dr * dr + di * di);
    }
    stat[m] = acc;
  }
  return stat;
}

}  // namespace detail

/// Weighted Epps-Pulley statistic of a 1-D sample against N(0, 1):
/// trapezoid rule of w(t) |phi_N(t) - exp(-t^2/2)|^2 on the knot grid.
inline double epps_pulley(std::span<const double> h, const EppsPulleyConfig& cfg) {
  cfg.validate();
  if (h.empty()) throw DegenerateBatchError("epps_pulley: empty sample");
  Array H({h.size(), 1}, std::vector<double>(h.begin(), h.end()));
  return detail::ep_statistics(detail::knot_ecf(H, cfg), cfg)[0];
}

/// Differentiable Epps-Pulley statistic of every column of H (N x M) -> (1 x M).
inline Var epps_pulley_columns(Var H, const EppsPulleyConfig& cfg) {
  cfg.validate();
  if (H.rows() == 0) throw DegenerateBatchError("epps_pulley: empty sample");
  const std::size_t hi = H.id();
  return H.graph().apply(
      "epps_pulley", {H},
      [hi, cfg](const Graph& g) {
        const auto stat = detail::ep_statistics(detail::knot_ecf(g.value(hi), cfg), cfg);
        return Array::row(stat);
      },
      [hi, cfg](Graph& g, std::size_t self) {
        const Array& Hv = g.value(hi);
        const std::size_t N = Hv.rows(), M = Hv.cols(), K = cfg.knot_count;
        const auto e = detail::knot_ecf(Hv, cfg);
        const auto coef = detail::ep_coefficients(cfg);
        const Array& up = g.grad(self);
        // d stat_m / d h_nm = sum_k A_mk sin(t_k h) + B_mk cos(t_k h)
        std::vector<double> A(M * K), B(M * K);
        const double inv_n = 1.0 / static_cast<double>(N);
        for (std::size_t m = 0; m < M; ++m) {
          for (std::size_t k = 0; k < K; ++k) {
            const double t = cfg.knot(k);
            const double dr = e.re[m * K + k] - std::exp(-0.5 * t * t);
            const double di = e.im[m * K + k];
            A[m * K + k] = -2.0 * coef[k] * dr * t * inv_n * up[m];
            B[m * K + k] = 2.0 * coef[k] * di * t * inv_n * up[m];
          }
        }
        const double t0 = cfg.knot(0);
        const double dt = cfg.knot(1) - t0;
        Array& G = g.grad_ref(hi);
        for (std::size_t n = 0; n < N; ++n) {
          const double* row = Hv.data().data() + n * M;
          double* grow = G.data().data() + n * M;
          for (std::size_t m = 0; m < M; ++m) {
            const double h = row[m];
            double c = std::cos(t0 * h), s = std::sin(t0 * h);
            const double dc = std::cos(dt * h), ds = std::sin(dt * h);
            const double* a = A.data() + m * K;
            const double* b = B.data() + m * K;
            double acc = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
              acc += a[k] * s + b[k] * c;
              const double cn = c * dc - s * ds;
              s = s * dc + c * ds;
              c = cn;
            }
            grow[m] += acc;
          }
        }
      });
}

/// Mean Epps-Pulley statistic over the projections of Z (samples x d).
inline Var sigreg(Var Z, const DirectionSet& U, const EppsPulleyConfig& cfg) {
  if (Z.rows() < 2) {
    throw DegenerateBatchError("sigreg: degenerate batch of " + std::to_string(Z.rows()) +
                               " sample(s); distribution matching needs at least 2");
  }
  return mean(epps_pulley_columns(project(Z, U), cfg));
}

inline double sigreg(const Array& Z, const DirectionSet& U, const EppsPulleyConfig& cfg) {
  Graph g;
  return sigreg(g.constant(Z), U, cfg).value().item();
}

/// SIGReg applied to each history step's (batch x d) slice, then averaged.
/// Z holds steps*batch rows in time-major order.
inline Var stepwise_sigreg(Var Z, std::size_t steps, std::size_t batch, const DirectionSet& U,
                           const EppsPulleyConfig& cfg) {
  if (steps == 0) throw Error("stepwise_sigreg: need at least one history step");
  if (batch < 2) {
    throw DegenerateBatchError("stepwise_sigreg: degenerate batch of " + std::to_string(batch) +
                               " sample(s) per step; need at least 2");
  }
  if (Z.rows() != steps * batch) {
    throw ShapeError("stepwise_sigreg: " + shape_str(Z.value().shape()) + " is not " +
                     std::to_string(steps) + " steps x " + std::to_string(batch) + " samples");
  }
  // One projection for all rows, then per-step column statistics.
  Var H = project(Z, U);
  Var total;
  for (std::size_t t = 0; t < steps; ++t) {
    Var s = mean(epps_pulley_columns(slice_rows(H, t * batch, batch), cfg));
    total = total.valid() ? add(total, s) : s;
  }
  return scale(total, 1.0 / static_cast<double>(steps));
}

inline double stepwise_sigreg(const Array& Z, std::size_t steps, std::size_t batch, const DirectionSet& U,
                              const EppsPulleyConfig& cfg) {
  Graph g;
  return stepwise_sigreg(g.constant(Z), steps, batch, U, cfg).value().item();
}

}  // namespace lewm
