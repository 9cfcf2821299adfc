#pragma once

// Read-only analyses of a trained model: probes for ground-truth state,
// surprise under violation-of-expectation perturbations, latent path
// straightening and collapse diagnostics.

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "lewm/dataset.hpp"
#include "lewm/optimizer.hpp"
#include "lewm/worldmodel.hpp"

namespace lewm {

// ---------------------------------------------------------------------------
// Probes

enum class ProbeKind { linear, nonlinear };

inline const char* to_string(ProbeKind k) { return k == ProbeKind::linear ? "linear" : "nonlinear"; }

struct ProbeOptions {
  double ridge = 1e-6;
  std::size_t hidden = 64;
  std::size_t train_steps = 400;
  double learning_rate = 1e-3;
  double test_fraction = 0.2;
  double validation_fraction = 0.2;  // of the training split, for the nonlinear probe's stopping point
};

struct ProbeResult {
  ProbeKind kind = ProbeKind::linear;
  std::string target_name;
  double mse = 0.0;
  double pearson_r = 0.0;
  double mse_std = 0.0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

struct ProbeFit {
  ProbeResult result;
  Array weight;  // d x k (linear part)
  Array bias;    // 1 x k
  Array test_prediction;
  std::vector<std::size_t> test_rows;
};

namespace detail {

inline Array take_rows(const Array& a, const std::vector<std::size_t>& rows) {
  Array out = Array::matrix(rows.size(), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = a.row_span(rows[i]);
    std::copy(r.begin(), r.end(), out.storage().begin() + i * a.cols());
  }
  return out;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline std::vector<double> column(const Array& a, std::size_t j) {
  std::vector<double> out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) out[i] = a(i, j);
  return out;
}

// Ridge regression with an unpenalized intercept (data centered first).
inline std::pair<Array, Array> ridge_fit(const Array& X, const Array& Y, double ridge) {
  const auto Xv = view(X);
  const auto Yv = view(Y);
  const Eigen::RowVectorXd mx = Xv.colwise().mean();
  const Eigen::RowVectorXd my = Yv.colwise().mean();
  const Eigen::MatrixXd Xc = Xv.rowwise() - mx;
  const Eigen::MatrixXd Yc = Yv.rowwise() - my;
  Eigen::MatrixXd A = Xc.transpose() * Xc;
  A.diagonal().array() += ridge;
  const Eigen::MatrixXd W = A.ldlt().solve(Xc.transpose() * Yc);
  Array w = Array::matrix(X.cols(), Y.cols());
  view(w) = W;
  Array b = Array::matrix(1, Y.cols());
  view(b).row(0) = my - mx * W;
  return {w, b};
}

inline Array affine(const Array& X, const Array& w, const Array& b) {
  Array out = Array::matrix(X.rows(), w.cols());
  view(out) = view(X) * view(w);
  view(out).rowwise() += view(b).row(0);
  return out;
}

inline double mse(const Array& a, const Array& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

}  // namespace detail

/// Seeded 80/20 split; rows [0, n_test) of the permutation are the test set.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_rows(std::size_t n, double test_fraction,
                                                                                std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  std::vector<std::size_t> test(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(n_test), perm.end());
  return {train, test};
}

/// Fits a read-out from frozen embeddings X (n x d) to targets Y (n x k) and
/// scores it on the held-out rows. The nonlinear probe is the linear one plus
/// a one-hidden-layer network whose output layer starts at zero, trained
/// with Adam; the step with the lowest validation error is kept.
inline ProbeFit fit_probe(const Array& X, const Array& Y, ProbeKind kind, std::uint64_t split_seed,
                          const std::string& target_name = "target", const ProbeOptions& opt = {}) {
  if (X.rank() != 2 || Y.rank() != 2 || X.rows() != Y.rows()) {
    throw ShapeError("fit_probe: embeddings " + shape_str(X.shape()) + " and targets " + shape_str(Y.shape()) +
                     " disagree");
  }
  if (X.rows() < 20) throw Error("fit_probe: need at least 20 samples, got " + std::to_string(X.rows()));
  for (std::size_t j = 0; j < Y.cols(); ++j) {
    const auto c = detail::column(Y, j);
    if (std::all_of(c.begin(), c.end(), [&](double v) { return v == c[0]; })) {
      throw Error("fit_probe: target column " + std::to_string(j) + " has zero variance");
    }
  }
  auto [train, test] = split_rows(X.rows(), opt.test_fraction, split_seed);
  const Array Xtr = detail::take_rows(X, train), Ytr = detail::take_rows(Y, train);
  const Array Xte = detail::take_rows(X, test), Yte = detail::take_rows(Y, test);

  ProbeFit fit;
  std::tie(fit.weight, fit.bias) = detail::ridge_fit(Xtr, Ytr, opt.ridge);
  fit.test_prediction = detail::affine(Xte, fit.weight, fit.bias);

  if (kind == ProbeKind::nonlinear) {
    auto [inner, val] = split_rows(Xtr.rows(), opt.validation_fraction, derive_seed(split_seed, 1));
    const Array Xin = detail::take_rows(Xtr, inner), Yin = detail::take_rows(Ytr, inner);
    const Array Xva = detail::take_rows(Xtr, val), Yva = detail::take_rows(Ytr, val);
    ParameterSet ps;
    Rng rng(derive_seed(split_seed, 2));
    ps.add("lin.weight", fit.weight);
    ps.add("lin.bias", fit.bias);
    nn::add_linear(ps, rng, "mlp.l0", X.cols(), opt.hidden);
    ps.add("mlp.out.weight", Array::matrix(opt.hidden, Y.cols()));
    ps.add("mlp.out.bias", Array::matrix(1, Y.cols()));
    auto forward = [&ps](Graph& g, const Array& x) {
      Var in = g.constant(x);
      Var lin = nn::linear(g, ps, "lin", in);
      Var h = silu(nn::linear(g, ps, "mlp.l0", in));
      return add(lin, nn::linear(g, ps, "mlp.out", h));
    };
    auto predict = [&](const Array& x) {
      Graph g;
      return forward(g, x).value();
    };
    Adam adam(AdamConfig{opt.learning_rate});
    double best_val = detail::mse(predict(Xva), Yva);
    ParameterSet best = ps;
    for (std::size_t s = 0; s < opt.train_steps; ++s) {
      Graph g;
      Var loss = mean(square(sub(forward(g, Xin), g.constant(Yin))));
      g.backward(loss);
      adam.step(ps);
      const double v = detail::mse(predict(Xva), Yva);
      if (v < best_val) {
        best_val = v;
        best = ps;
      }
    }
    ps = best;
    fit.test_prediction = predict(Xte);
  }

  ProbeResult& r = fit.result;
  r.kind = kind;
  r.target_name = target_name;
  r.n_train = train.size();
  r.n_test = test.size();
  std::vector<double> per_sample(Xte.rows(), 0.0);
  for (std::size_t i = 0; i < Xte.rows(); ++i) {
    for (std::size_t j = 0; j < Y.cols(); ++j) {
      const double e = fit.test_prediction(i, j) - Yte(i, j);
      per_sample[i] += e * e / static_cast<double>(Y.cols());
    }
  }
  r.mse = std::accumulate(per_sample.begin(), per_sample.end(), 0.0) / static_cast<double>(per_sample.size());
  double ss = 0.0;
  for (double v : per_sample) ss += (v - r.mse) * (v - r.mse);
  r.mse_std = per_sample.size() > 1 ? std::sqrt(ss / static_cast<double>(per_sample.size() - 1)) : 0.0;
  double rsum = 0.0;
  for (std::size_t j = 0; j < Y.cols(); ++j) {
    rsum += detail::pearson(detail::column(fit.test_prediction, j), detail::column(Yte, j));
  }
  r.pearson_r = rsum / static_cast<double>(Y.cols());
  fit.test_rows = std::move(test);
  return fit;
}

/// Eval-mode embeddings and agent positions for every frame of the given
/// trajectories.
struct FrameSample {
  Array embeddings;
  Array positions;
};

inline FrameSample embed_frames(WorldModel& model, const Dataset& data, std::size_t max_frames) {
  std::size_t n = 0;
  for (const auto& tr : data.trajectories) n += tr.length();
  n = std::min(n, max_frames);
  const std::size_t px = frame_pixels(data.config);
  Array obs = Array::matrix(n, px);
  Array pos = Array::matrix(n, 2);
  std::size_t row = 0;
  for (const auto& tr : data.trajectories) {
    for (std::size_t t = 0; t < tr.length() && row < n; ++t, ++row) {
      for (std::size_t i = 0; i < px; ++i) obs(row, i) = tr.frames[t * px + i] / 255.0;
      pos(row, 0) = tr.states[t].agent.x;
      pos(row, 1) = tr.states[t].agent.y;
    }
  }
  return {model.encode(obs, Mode::eval), pos};
}

inline void write_probe_csv(std::ostream& os, const std::vector<ProbeResult>& rows) {
  os << "target,kind,mse,mse_std,r\n";
  for (const auto& r : rows) {
    os << r.target_name << ',' << to_string(r.kind) << ',' << format_double(r.mse) << ','
       << format_double(r.mse_std) << ',' << format_double(r.pearson_r) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Surprise and violation of expectation

/// values[k] is the surprise at frame first_t + k.
struct SurpriseSeries {
  std::size_t first_t = 0;
  std::vector<double> values;

  double at(std::size_t t) const { return values.at(t - first_t); }
};

/// surprise(t) = || predict(enc(o_{t-h..t-1}), a_{t-1}) - enc(o_t) ||^2 in eval mode.
inline SurpriseSeries surprise_series(WorldModel& model, const Trajectory& tr, const EnvConfig& env) {
  const std::size_t H = model.config().history_len;
  const std::size_t T = tr.length();
  if (T < H + 2) {
    throw Error("surprise_series: trajectory of " + std::to_string(T) + " frames is shorter than history + 2");
  }
  const Array Z = model.encode(frame_rows(tr, env), Mode::eval);
  const std::size_t P = T - H;
  std::vector<Array> hist;
  for (std::size_t h = 0; h < H; ++h) hist.push_back(slice_rows(Z, h, P));
  const Array pred = model.predict(hist, action_rows(tr, env, H - 1, P), Mode::eval);
  SurpriseSeries s{H, std::vector<double>(P, 0.0)};
  const std::size_t d = Z.cols();
  for (std::size_t k = 0; k < P; ++k) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double e = pred(k, j) - Z(H + k, j);
      acc += e * e;
    }
    s.values[k] = acc;
  }
  return s;
}

struct PairedTTest {
  double t = 0.0;
  double p = 1.0;
  double mean_diff = 0.0;
  std::size_t n = 0;
};

/// Two-sided paired t-test of a - b. A zero standard deviation of the
/// differences is clamped to sd_floor so constant shifts give a finite t.
inline PairedTTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b, double sd_floor = 1e-12) {
  if (a.size() != b.size()) throw ShapeError("paired_t_test: samples differ in length");
  if (a.size() < 2) throw Error("paired_t_test: need at least 2 pairs");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const double m = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : d) ss += (v - m) * (v - m);
  const double sd = std::max(std::sqrt(ss / static_cast<double>(n - 1)), sd_floor);
  PairedTTest r;
  r.n = n;
  r.mean_diff = m;
  r.t = m / (sd / std::sqrt(static_cast<double>(n)));
  const boost::math::students_t dist(static_cast<double>(n - 1));
  r.p = std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))), 0.0, 1.0);
  return r;
}

struct VoeConfig {
  std::size_t n_trials = 30;
  std::size_t window = 3;  // frames t_p .. t_p + window - 1
  std::size_t min_length = 8;

  void write(KeyValues& kv, const std::string& p = "voe.") const {
    kv.set_size(p + "n_trials", n_trials);
    kv.set_size(p + "window", window);
    kv.set_size(p + "min_length", min_length);
  }
  void read(const KeyValues& kv, const std::string& p = "voe.") {
    kv.read_size(p + "n_trials", n_trials);
    kv.read_size(p + "window", window);
    kv.read_size(p + "min_length", min_length);
  }
  friend bool operator==(const VoeConfig&, const VoeConfig&) = default;
};

struct VoeTrial {
  std::size_t trajectory = 0;
  std::size_t t_perturb = 0;
  SurpriseSeries unperturbed;
  SurpriseSeries recolor;
  SurpriseSeries teleport;
  double window_unperturbed = 0.0;
  double window_recolor = 0.0;
  double window_teleport = 0.0;
};

struct VoeReport {
  std::vector<VoeTrial> trials;
  PairedTTest recolor;
  PairedTTest teleport;
};

inline double window_max(const SurpriseSeries& s, std::size_t t0, std::size_t width) {
  double m = 0.0;
  for (std::size_t t = t0; t < t0 + width; ++t) m = std::max(m, s.at(t));
  return m;
}

/// Matched (unperturbed, recolor, teleport) triples on dataset trajectories,
/// compared through the maximum surprise over the perturbation window.
inline VoeReport voe_test(WorldModel& model, const Dataset& data, const VoeConfig& cfg, std::uint64_t seed) {
  if (cfg.n_trials < 10) throw Error("voe_test: need at least 10 trials");
  if (cfg.window == 0) throw Error("voe_test: window must be >= 1");
  const std::size_t H = model.config().history_len;
  const std::size_t lo = std::max<std::size_t>(2, H);  // first frame that has a surprise value and t_p > 1
  const std::size_t min_len = std::max(cfg.min_length, lo + cfg.window + 1);
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < data.trajectories.size(); ++i) {
    if (data.trajectories[i].length() >= min_len) eligible.push_back(i);
  }
  if (eligible.empty()) throw Error("voe_test: no trajectory has " + std::to_string(min_len) + " frames");
  Rng rng(seed);
  VoeReport rep;
  std::vector<double> base, rec, tel;
  for (std::size_t k = 0; k < cfg.n_trials; ++k) {
    VoeTrial tr;
    tr.trajectory = eligible[rng.index(eligible.size())];
    const Trajectory& orig = data.trajectories[tr.trajectory];
    tr.t_perturb = lo + rng.index(orig.length() - cfg.window - lo + 1);
    const Trajectory recolored = perturb(orig, Perturbation::recolor, tr.t_perturb, data.config, rng);
    const Trajectory teleported = perturb(orig, Perturbation::teleport, tr.t_perturb, data.config, rng);
    tr.unperturbed = surprise_series(model, orig, data.config);
    tr.recolor = surprise_series(model, recolored, data.config);
    tr.teleport = surprise_series(model, teleported, data.config);
    tr.window_unperturbed = window_max(tr.unperturbed, tr.t_perturb, cfg.window);
    tr.window_recolor = window_max(tr.recolor, tr.t_perturb, cfg.window);
    tr.window_teleport = window_max(tr.teleport, tr.t_perturb, cfg.window);
    base.push_back(tr.window_unperturbed);
    rec.push_back(tr.window_recolor);
    tel.push_back(tr.window_teleport);
    rep.trials.push_back(std::move(tr));
  }
  rep.recolor = paired_t_test(rec, base);
  rep.teleport = paired_t_test(tel, base);
  return rep;
}

inline void write_voe_csv(std::ostream& os, const VoeReport& rep) {
  os << "kind,trial,window_max_unperturbed,window_max_perturbed,t,p\n";
  for (const char* kind : {"recolor", "teleport"}) {
    const bool tele = std::string(kind) == "teleport";
    const PairedTTest& test = tele ? rep.teleport : rep.recolor;
    for (std::size_t i = 0; i < rep.trials.size(); ++i) {
      const auto& tr = rep.trials[i];
      os << kind << ',' << i << ',' << format_double(tr.window_unperturbed) << ','
         << format_double(tele ? tr.window_teleport : tr.window_recolor) << ',' << format_double(test.t) << ','
         << format_double(test.p) << '\n';
    }
    os << kind << ",summary,,," << format_double(test.t) << ',' << format_double(test.p) << '\n';
  }
}

/// Plot-ready per-frame surprise for every trial.
inline void write_surprise_csv(std::ostream& os, const VoeReport& rep) {
  os << "trial,t,t_perturb,unperturbed,recolor,teleport\n";
  for (std::size_t i = 0; i < rep.trials.size(); ++i) {
    const auto& tr = rep.trials[i];
    for (std::size_t k = 0; k < tr.unperturbed.values.size(); ++k) {
      os << i << ',' << tr.unperturbed.first_t + k << ',' << tr.t_perturb << ','
         << format_double(tr.unperturbed.values[k]) << ',' << format_double(tr.recolor.values[k]) << ','
         << format_double(tr.teleport.values[k]) << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Straightening

struct StraighteningResult {
  double value = 0.0;
  std::size_t pairs = 0;
  std::size_t degenerate_pairs = 0;
};

/// Mean cosine between consecutive latent velocities v_t = z_{t+1} - z_t over
/// every sequence (each T x d). Pairs where either velocity is shorter than
/// 1e-12 are skipped and counted; with no usable pair the value is 0.
inline StraighteningResult straightening(const std::vector<Array>& sequences) {
  StraighteningResult r;
  double acc = 0.0;
  for (const Array& Z : sequences) {
    if (Z.rank() != 2 || Z.rows() < 3) {
      throw Error("straightening: each sequence needs at least 3 steps, got " + shape_str(Z.shape()));
    }
    const std::size_t T = Z.rows(), d = Z.cols();
    for (std::size_t t = 0; t + 2 < T; ++t) {
      double dot = 0.0, n1 = 0.0, n2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double v1 = Z(t + 1, j) - Z(t, j);
        const double v2 = Z(t + 2, j) - Z(t + 1, j);
        dot += v1 * v2;
        n1 += v1 * v1;
        n2 += v2 * v2;
      }
      if (std::sqrt(n1) < 1e-12 || std::sqrt(n2) < 1e-12) {
        ++r.degenerate_pairs;
        continue;
      }
      acc += std::clamp(dot / (std::sqrt(n1) * std::sqrt(n2)), -1.0, 1.0);
      ++r.pairs;
    }
  }
  r.value = r.pairs ? acc / static_cast<double>(r.pairs) : 0.0;
  return r;
}

/// Eval-mode latent sequences of the first n trajectories with >= 3 frames.
inline std::vector<Array> latent_sequences(WorldModel& model, const Dataset& data, std::size_t n) {
  std::vector<Array> out;
  for (const auto& tr : data.trajectories) {
    if (out.size() >= n) break;
    if (tr.length() >= 3) out.push_back(model.encode(frame_rows(tr, data.config), Mode::eval));
  }
  return out;
}

struct StraighteningRow {
  std::size_t checkpoint_step = 0;
  StraighteningResult result;
};

inline void write_straightening_csv(std::ostream& os, const std::vector<StraighteningRow>& rows) {
  os << "checkpoint_step,S,pairs,degenerate_pairs\n";
  for (const auto& r : rows) {
    os << r.checkpoint_step << ',' << format_double(r.result.value) << ',' << r.result.pairs << ','
       << r.result.degenerate_pairs << '\n';
  }
}

// ---------------------------------------------------------------------------
// Collapse diagnostics

struct EmbeddingStats {
  std::vector<double> std;  // unbiased, per dimension
  std::vector<double> mean;
  double min_distance = 0.0;
  double mean_distance = 0.0;
  double max_distance = 0.0;

  double mean_std() const { return std.empty() ? 0.0 : std::accumulate(std.begin(), std.end(), 0.0) / std.size(); }
};

inline EmbeddingStats embedding_stats(const Array& Z) {
  if (Z.rank() != 2 || Z.rows() < 2) throw Error("embedding_stats: need at least 2 samples");
  const std::size_t n = Z.rows(), d = Z.cols();
  EmbeddingStats s;
  s.mean.assign(d, 0.0);
  s.std.assign(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += Z(i, j);
    m /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += (Z(i, j) - m) * (Z(i, j) - m);
    s.mean[j] = m;
    s.std[j] = std::sqrt(ss / static_cast<double>(n - 1));
  }
  s.min_distance = std::numeric_limits<double>::infinity();
  double acc = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      double dd = 0.0;
      for (std::size_t j = 0; j < d; ++j) dd += (Z(a, j) - Z(b, j)) * (Z(a, j) - Z(b, j));
      const double dist = std::sqrt(dd);
      s.min_distance = std::min(s.min_distance, dist);
      s.max_distance = std::max(s.max_distance, dist);
      acc += dist;
    }
  }
  s.mean_distance = acc / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
  return s;
}

inline void write_stats_csv(std::ostream& os, const EmbeddingStats& s) {
  os << "stat,dim,value\n";
  for (std::size_t j = 0; j < s.std.size(); ++j) os << "std," << j << ',' << format_double(s.std[j]) << '\n';
  for (std::size_t j = 0; j < s.mean.size(); ++j) os << "mean," << j << ',' << format_double(s.mean[j]) << '\n';
  os << "mean_std,," << format_double(s.mean_std()) << '\n';
  os << "min_distance,," << format_double(s.min_distance) << '\n';
  os << "mean_distance,," << format_double(s.mean_distance) << '\n';
  os << "max_distance,," << format_double(s.max_distance) << '\n';
}

}  // namespace lewm
