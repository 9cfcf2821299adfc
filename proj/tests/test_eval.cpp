#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "lewm/eval.hpp"
#include "oracles.hpp"

using namespace lewm;

namespace {

Array normal_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Array a = Array::matrix(r, c);
  for (double& v : a.storage()) v = rng.normal();
  return a;
}

WorldModelConfig model_config(const EnvConfig& env, std::size_t history = 1) {
  WorldModelConfig c;
  c.obs_height = env.render_size;
  c.obs_width = env.render_size;
  c.embed_dim = 6;
  c.encoder_hidden = {12};
  c.predictor_hidden = {12};
  c.history_len = history;
  c.frame_skip = env.frame_skip;
  return c;
}

EnvConfig tiny_env() {
  EnvConfig e;
  e.render_size = 8;
  e.frame_skip = 2;
  return e;
}

}  // namespace

// --- probes ----------------------------------------------------------------

TEST(Probe, LinearTargetIsRecoveredExactly) {
  const Array X = normal_matrix(200, 5, 1);
  Array Y = Array::matrix(200, 2);
  for (std::size_t i = 0; i < 200; ++i) {
    Y(i, 0) = 2 * X(i, 0) - X(i, 3) + 0.5;
    Y(i, 1) = X(i, 1) + X(i, 2);
  }
  const auto fit = fit_probe(X, Y, ProbeKind::linear, 3, "pos");
  EXPECT_LT(fit.result.mse, 1e-8);
  EXPECT_GT(fit.result.pearson_r, 0.9999);
  EXPECT_EQ(fit.result.n_test, 40u);
  EXPECT_EQ(fit.result.n_train, 160u);
  EXPECT_NEAR(fit.weight(0, 0), 2.0, 1e-5);
  EXPECT_NEAR(fit.bias[0], 0.5, 1e-5);
}

TEST(Probe, NonlinearBeatsLinearOnASquare) {
  const Array X = normal_matrix(400, 2, 4);
  Array Y = Array::matrix(400, 1);
  for (std::size_t i = 0; i < 400; ++i) Y(i, 0) = X(i, 0) * X(i, 0);
  ProbeOptions opt;
  opt.learning_rate = 1e-2;
  const auto lin = fit_probe(X, Y, ProbeKind::linear, 5, "sq", opt);
  const auto mlp = fit_probe(X, Y, ProbeKind::nonlinear, 5, "sq", opt);
  EXPECT_LT(mlp.result.mse, 0.5 * lin.result.mse);
  EXPECT_GT(mlp.result.pearson_r, lin.result.pearson_r);
}

TEST(Probe, NoiseTargetsGiveNoCorrelation) {
  const Array X = normal_matrix(2000, 6, 6);
  const Array Y = normal_matrix(2000, 2, 7);
  const auto fit = fit_probe(X, Y, ProbeKind::linear, 8, "noise");
  EXPECT_LT(std::abs(fit.result.pearson_r), 0.1);
}

TEST(Probe, InputErrors) {
  EXPECT_THROW(fit_probe(normal_matrix(30, 2, 1), normal_matrix(29, 1, 2), ProbeKind::linear, 1), ShapeError);
  EXPECT_THROW(fit_probe(normal_matrix(10, 2, 1), normal_matrix(10, 1, 2), ProbeKind::linear, 1), Error);
  EXPECT_THROW(fit_probe(normal_matrix(30, 2, 1), Array::matrix(30, 1, 3.0), ProbeKind::linear, 1), Error);
}

TEST(Probe, SplitIsDisjointAndDeterministic) {
  const auto [train, test] = split_rows(50, 0.2, 9);
  EXPECT_EQ(test.size(), 10u);
  std::vector<int> seen(50, 0);
  for (auto i : train) ++seen[i];
  for (auto i : test) ++seen[i];
  for (int s : seen) EXPECT_EQ(s, 1);
  EXPECT_EQ(split_rows(50, 0.2, 9), split_rows(50, 0.2, 9));
}

TEST(Probe, CsvHasOneRowPerResult) {
  std::ostringstream os;
  write_probe_csv(os, {ProbeResult{}, ProbeResult{}});
  const std::string s = os.str();
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 3);
  EXPECT_EQ(s.rfind("target,kind,mse,mse_std,r\n", 0), 0u);
}

// --- t test ----------------------------------------------------------------

TEST(TTest, MatchesQuadratureOracle) {
  Rng rng(10);
  for (std::size_t n : {5u, 12u, 40u}) {
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      b[i] = rng.normal();
      a[i] = b[i] + 0.4 + rng.normal();
    }
    const auto r = paired_t_test(a, b);
    double m = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += (a[i] - b[i]) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) ss += (a[i] - b[i] - m) * (a[i] - b[i] - m);
    const double t = m / std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
    EXPECT_NEAR(r.t, t, 1e-10);
    EXPECT_NEAR(r.p, oracle::t_two_sided_p(t, static_cast<double>(n - 1)), 1e-8) << n;
  }
}

TEST(TTest, KnownCriticalValue) {
  // t_{0.975, 9} = 2.262157...
  std::vector<double> d(10);
  for (std::size_t i = 0; i < 10; ++i) d[i] = (i % 2 ? 1.0 : -1.0);
  const double sd = std::sqrt(10.0 / 9.0);
  const double shift = 2.2621571627982 * sd / std::sqrt(10.0);
  std::vector<double> a(10), b(10, 0.0);
  for (std::size_t i = 0; i < 10; ++i) a[i] = d[i] + shift;
  EXPECT_NEAR(paired_t_test(a, b).p, 0.05, 1e-9);
}

TEST(TTest, ConstantShiftIsFiniteAndSignificant) {
  std::vector<double> a{1, 2, 3, 4}, b{0, 1, 2, 3};
  const auto r = paired_t_test(a, b);
  EXPECT_TRUE(std::isfinite(r.t));
  EXPECT_LT(r.p, 1e-6);
  EXPECT_EQ(paired_t_test(b, b).p, 1.0);
  EXPECT_THROW(paired_t_test({1.0}, {1.0}), Error);
  EXPECT_THROW(paired_t_test({1.0, 2.0}, {1.0}), ShapeError);
}

// --- straightening ---------------------------------------------------------

TEST(Straightening, Fixtures) {
  Array line = Array::matrix(5, 3);
  for (std::size_t t = 0; t < 5; ++t) line(t, 0) = 2.0 * t, line(t, 1) = -1.0 * t;
  EXPECT_NEAR(straightening({line}).value, 1.0, 1e-15);

  Array zigzag = Array::matrix(5, 2);
  for (std::size_t t = 0; t < 5; ++t) zigzag(t, 0) = t % 2 ? 1.0 : 0.0;
  EXPECT_NEAR(straightening({zigzag}).value, -1.0, 1e-15);

  Array square = Array::matrix(4, 2);
  square(1, 0) = 1.0;
  square(2, 0) = 1.0;
  square(2, 1) = 1.0;
  square(3, 1) = 1.0;
  EXPECT_NEAR(straightening({square}).value, 0.0, 1e-15);
}

TEST(Straightening, PoolsPairsAndSkipsStationarySteps) {
  Array line = Array::matrix(3, 1);
  line(1, 0) = 1;
  line(2, 0) = 2;
  Array flat = Array::matrix(4, 1, 7.0);
  Array zig = Array::matrix(4, 1);
  zig(1, 0) = 1;
  zig(3, 0) = 1;
  const auto r = straightening({line, flat, zig});
  EXPECT_EQ(r.pairs, 3u);
  EXPECT_EQ(r.degenerate_pairs, 2u);
  EXPECT_NEAR(r.value, (1.0 - 1.0 - 1.0) / 3.0, 1e-15);
  EXPECT_EQ(straightening({flat}).value, 0.0);
  EXPECT_THROW(straightening({Array::matrix(2, 3)}), Error);
}

TEST(Straightening, InvariantToRotationAndScale) {
  const Array Z = normal_matrix(10, 2, 11);
  Array R = Array::matrix(10, 2);
  const double c = std::cos(0.7), s = std::sin(0.7);
  for (std::size_t t = 0; t < 10; ++t) {
    R(t, 0) = 3.0 * (c * Z(t, 0) - s * Z(t, 1)) + 5.0;
    R(t, 1) = 3.0 * (s * Z(t, 0) + c * Z(t, 1));
  }
  EXPECT_NEAR(straightening({Z}).value, straightening({R}).value, 1e-12);
}

// --- collapse diagnostics --------------------------------------------------

TEST(EmbeddingStats, KnownValues) {
  Array Z = Array::matrix(3, 2);
  Z(0, 0) = 0, Z(1, 0) = 3, Z(2, 0) = 0;
  Z(0, 1) = 0, Z(1, 1) = 0, Z(2, 1) = 4;
  const auto s = embedding_stats(Z);
  EXPECT_NEAR(s.mean[0], 1.0, 1e-15);
  EXPECT_NEAR(s.std[0], std::sqrt(3.0), 1e-15);
  EXPECT_NEAR(s.std[1], std::sqrt(16.0 / 3.0), 1e-14);
  EXPECT_EQ(s.min_distance, 3.0);
  EXPECT_EQ(s.max_distance, 5.0);
  EXPECT_NEAR(s.mean_distance, 4.0, 1e-15);
  EXPECT_NEAR(s.mean_std(), 0.5 * (std::sqrt(3.0) + std::sqrt(16.0 / 3.0)), 1e-14);
}

TEST(EmbeddingStats, CollapsedBatch) {
  const auto s = embedding_stats(Array::matrix(5, 4, 2.5));
  EXPECT_EQ(s.mean_std(), 0.0);
  EXPECT_EQ(s.max_distance, 0.0);
  EXPECT_THROW(embedding_stats(Array::matrix(1, 4)), Error);
}

// --- surprise and VoE on a small untrained model ---------------------------

TEST(Surprise, MatchesDirectComputation) {
  const EnvConfig env = tiny_env();
  WorldModel m(model_config(env, 2), 12);
  const auto ds = generate_dataset(env, 1, 300, 13);
  const auto& tr = ds.trajectories[0];
  const auto s = surprise_series(m, tr, env);
  EXPECT_EQ(s.first_t, 2u);
  ASSERT_EQ(s.values.size(), tr.length() - 2);
  const std::size_t t = 5;
  const Array z = m.encode(frame_rows(tr, env, t - 2, 3));
  const Array p = m.predict({slice_rows(z, 0, 1), slice_rows(z, 1, 1)}, action_rows(tr, env, t - 1, 1));
  double e = 0.0;
  for (std::size_t j = 0; j < z.cols(); ++j) e += (p[j] - z(2, j)) * (p[j] - z(2, j));
  EXPECT_NEAR(s.at(t), e, 1e-12);
}

TEST(Voe, PrefixSurpriseIsUntouchedByPerturbations) {
  const EnvConfig env = tiny_env();
  WorldModel m(model_config(env), 14);
  const auto ds = generate_dataset(env, 10, 300, 15);
  VoeConfig cfg;
  cfg.n_trials = 10;
  const auto rep = voe_test(m, ds, cfg, 16);
  ASSERT_EQ(rep.trials.size(), 10u);
  for (const auto& tr : rep.trials) {
    for (std::size_t t = tr.unperturbed.first_t; t < tr.t_perturb; ++t) {
      EXPECT_EQ(tr.recolor.at(t), tr.unperturbed.at(t));
      EXPECT_EQ(tr.teleport.at(t), tr.unperturbed.at(t));
    }
    EXPECT_EQ(tr.window_unperturbed, window_max(tr.unperturbed, tr.t_perturb, cfg.window));
  }
  EXPECT_GE(rep.recolor.p, 0.0);
  EXPECT_LE(rep.teleport.p, 1.0);
  std::ostringstream voe, sur;
  write_voe_csv(voe, rep);
  write_surprise_csv(sur, rep);
  const std::string v = voe.str();
  EXPECT_EQ(std::count(v.begin(), v.end(), '\n'), 1 + 2 * 11);
  EXPECT_EQ(voe_test(m, ds, cfg, 16).trials[3].window_teleport, rep.trials[3].window_teleport);
  cfg.n_trials = 9;
  EXPECT_THROW(voe_test(m, ds, cfg, 16), Error);
}

TEST(Latents, SequencesAreEvalEncodings) {
  const EnvConfig env = tiny_env();
  WorldModel m(model_config(env), 17);
  const auto ds = generate_dataset(env, 4, 300, 18);
  const auto seqs = latent_sequences(m, ds, 2);
  ASSERT_EQ(seqs.size(), 2u);
  EXPECT_EQ(seqs[0], m.encode(frame_rows(ds.trajectories[0], env)));
  const auto fs = embed_frames(m, ds, 7);
  EXPECT_EQ(fs.embeddings.rows(), 7u);
  EXPECT_EQ(fs.positions(3, 0), ds.trajectories[0].states[3].agent.x);
}
