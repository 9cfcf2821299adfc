#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "lewm/grad_check.hpp"
#include "lewm/losses.hpp"
#include "oracles.hpp"

using namespace lewm;

namespace {

Array normal_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  Array a = Array::matrix(r, c);
  for (double& v : a.storage()) v = sd * rng.normal();
  return a;
}

// Time-major rows (t*B + i) to an oracle cube [t][i][d].
oracle::Cube to_cube(const Array& a, std::size_t T, std::size_t B) {
  oracle::Cube c(T, oracle::Mat(B, std::vector<double>(a.cols())));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t d = 0; d < a.cols(); ++d) c[t][i][d] = a(t * B + i, d);
  return c;
}

oracle::Mat to_mat(const Array& a) {
  oracle::Mat m(a.rows(), std::vector<double>(a.cols()));
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) m[r][c] = a(r, c);
  return m;
}

std::vector<double> to_vec(const Array& a) { return {a.storage().begin(), a.storage().end()}; }

struct Instance {
  std::size_t T = 3, B = 4, D = 5, K = 3;
  Array Z, Zp, A;
};

Instance seeded_instance(std::uint64_t seed, std::size_t T = 3, std::size_t B = 4, std::size_t D = 5) {
  Instance in;
  in.T = T;
  in.B = B;
  in.D = D;
  in.Z = normal_matrix(T * B, D, seed, 0.6);
  in.Zp = normal_matrix((T - 1) * B, D, seed + 1, 0.6);
  in.A = normal_matrix((T - 1) * B, in.K, seed + 2);
  return in;
}

EmbeddingBatch batch_of(Var Z, Var Zp, const Instance& in) {
  EmbeddingBatch eb;
  eb.Z = Z;
  eb.Z_pred = Zp;
  eb.steps = in.T;
  eb.batch = in.B;
  return eb;
}

PldmCoefficients all_on() {
  PldmCoefficients k;
  k.nu = 0.3;
  k.mu = 0.5;
  return k;
}

}  // namespace

// --- prediction ------------------------------------------------------------

TEST(PredLoss, ZeroForPerfectPrediction) {
  Graph g;
  const Array z = normal_matrix(6, 4, 1);
  EXPECT_EQ(pred_loss(g.constant(z), g.constant(z)).value().item(), 0.0);
}

TEST(PredLoss, UnitOffsetGivesOne) {
  Graph g;
  const Array z = normal_matrix(6, 4, 2);
  Array z1 = z;
  for (double& v : z1.storage()) v += 1.0;
  EXPECT_NEAR(pred_loss(g.constant(z1), g.constant(z)).value().item(), 1.0, 1e-15);
}

TEST(PredLoss, MatchesLoopOracle) {
  const Array p = normal_matrix(2 * 3, 4, 3), y = normal_matrix(2 * 3, 4, 4);
  Graph g;
  EXPECT_NEAR(pred_loss(g.constant(p), g.constant(y)).value().item(), oracle::pred_loss(to_mat(p), to_mat(y)), 1e-12);
}

TEST(PredLoss, ShapeMismatchIsAnError) {
  Graph g;
  EXPECT_THROW(pred_loss(g.constant(Array::matrix(2, 3)), g.constant(Array::matrix(3, 2))), ShapeError);
}

// --- LeWM ------------------------------------------------------------------

TEST(LewmLoss, ZeroLambdaIsPredictionOnly) {
  const auto in = seeded_instance(10);
  const auto U = sample_directions(32, in.D, 11);
  Graph g;
  const auto eb = batch_of(g.constant(in.Z), g.constant(in.Zp), in);
  const auto terms = lewm_loss(eb, U, {}, 0.0);
  EXPECT_EQ(terms.total.value().item(), terms.value("pred"));
}

TEST(LewmLoss, PerfectPredictionLeavesWeightedSigreg) {
  Instance in = seeded_instance(12, 2, 512, 4);
  in.Z = normal_matrix(2 * 512, 4, 13);
  in.Zp = slice_rows(in.Z, 512, 512);
  const auto U = sample_directions(64, 4, 14);
  Graph g;
  const auto terms = lewm_loss(batch_of(g.constant(in.Z), g.constant(in.Zp), in), U, {}, 0.1);
  double oracle_sig = 0.0;
  for (std::size_t t = 0; t < 2; ++t)
    oracle_sig += oracle::sigreg(to_mat(slice_rows(in.Z, t * 512, 512)), to_mat(U.directions), 0.2, 4.0, 17, 4.0) / 2;
  EXPECT_EQ(terms.value("pred"), 0.0);
  EXPECT_NEAR(terms.value("sigreg"), oracle_sig, 1e-12);
  EXPECT_GT(oracle_sig, 0.0);
  EXPECT_LT(oracle_sig, 0.02);
  EXPECT_NEAR(terms.total.value().item(), 0.1 * oracle_sig, 1e-15);
}

TEST(LewmLoss, AffineInLambda) {
  const auto in = seeded_instance(15, 3, 8, 4);
  const auto U = sample_directions(16, 4, 16);
  Graph g;
  const auto eb = batch_of(g.constant(in.Z), g.constant(in.Zp), in);
  const auto a = lewm_loss(eb, U, {}, 0.1), b = lewm_loss(eb, U, {}, 0.2);
  EXPECT_NEAR(b.total.value().item() - a.total.value().item(), 0.1 * a.value("sigreg"), 1e-12);
}

TEST(LewmLoss, GradientOfTotalAndComponents) {
  const auto in = seeded_instance(17, 3, 6, 4);
  const auto U = sample_directions(8, 4, 18);
  ParameterSet ps;
  ps.add("Z", in.Z);
  ps.add("Zp", in.Zp);
  for (const char* which : {"total", "pred", "sigreg"}) {
    auto build = [&](Graph& g) {
      const auto t = lewm_loss(batch_of(g.parameter(ps.at("Z")), g.parameter(ps.at("Zp")), in), U, {}, 0.1);
      return std::string(which) == "total" ? t.total : t.component(which);
    };
    EXPECT_LT(grad_check(build, ps, 1e-5), 1e-4) << which;
  }
}

TEST(LewmLoss, CollapsedBatchFiresRegularizers) {
  // All embeddings equal: prediction is trivially perfect, regularizers are not.
  const std::size_t T = 3, B = 16, D = 4;
  Array Z = Array::matrix(T * B, D);
  for (std::size_t r = 0; r < T * B; ++r)
    for (std::size_t d = 0; d < D; ++d) Z(r, d) = 0.2 * static_cast<double>(d) - 0.1;
  Instance in{T, B, D, 3, Z, slice_rows(Z, B, (T - 1) * B), Array::matrix((T - 1) * B, 3)};
  Graph g;
  const auto eb = batch_of(g.constant(in.Z), g.constant(in.Zp), in);
  const auto lw = lewm_loss(eb, sample_directions(64, D, 1), {}, 0.1);
  EXPECT_EQ(lw.value("pred"), 0.0);
  EXPECT_GT(lw.value("sigreg"), 0.05);
  PldmCoefficients k;
  const auto pl = pldm_loss(eb, nullptr, nullptr, k);
  EXPECT_EQ(pl.value("pred"), 0.0);
  EXPECT_GT(pl.value("var"), 0.9);
}

// --- PLDM ------------------------------------------------------------------

TEST(PldmLoss, EveryComponentMatchesBruteForce) {
  for (std::uint64_t seed : {100u, 200u, 300u}) {
    const auto in = seeded_instance(seed);
    InverseDynamics idm(in.D, in.K, 6, seed + 7);
    const auto k = all_on();
    Graph g;
    Var acts = g.constant(in.A);
    const auto terms = pldm_loss(batch_of(g.constant(in.Z), g.constant(in.Zp), in), &acts, &idm, k);

    oracle::Idm o;
    o.W0 = to_mat(idm.params().at("idm.l0.weight").value);
    o.b0 = to_vec(idm.params().at("idm.l0.bias").value);
    o.W1 = to_mat(idm.params().at("idm.out.weight").value);
    o.b1 = to_vec(idm.params().at("idm.out.bias").value);
    const auto ref = oracle::pldm(to_cube(in.Z, 3, 4), to_cube(in.Zp, 2, 4), to_cube(in.A, 2, 4), &o, k.epsilon);
    EXPECT_NEAR(terms.value("pred"), ref.pred, 1e-10);
    EXPECT_NEAR(terms.value("var"), ref.var, 1e-10);
    EXPECT_NEAR(terms.value("cov"), ref.cov, 1e-10);
    EXPECT_NEAR(terms.value("time_sim"), ref.time_sim, 1e-10);
    EXPECT_NEAR(terms.value("time_var"), ref.time_var, 1e-10);
    EXPECT_NEAR(terms.value("time_cov"), ref.time_cov, 1e-10);
    EXPECT_NEAR(terms.value("idm"), ref.idm, 1e-10);
    const double total = ref.pred + k.alpha * ref.var + k.beta * ref.cov + k.gamma * ref.time_sim +
                         k.zeta * ref.time_var + k.nu * ref.time_cov + k.mu * ref.idm;
    EXPECT_NEAR(terms.total.value().item(), total, 1e-10);
    // Hinges are active somewhere on this instance, so the check is not vacuous.
    EXPECT_GT(ref.var, 0.0);
    EXPECT_GT(ref.time_var, 0.0);
  }
}

TEST(PldmLoss, ComponentNamesAndOrder) {
  const auto in = seeded_instance(5);
  Graph g;
  const auto terms = pldm_loss(batch_of(g.constant(in.Z), g.constant(in.Zp), in), nullptr, nullptr, {});
  ASSERT_EQ(terms.components.size(), 7u);
  for (std::size_t c = 0; c < 7; ++c) EXPECT_EQ(terms.components[c].first, pldm_component_names()[c]);
  EXPECT_EQ(terms.value("idm"), 0.0);
}

TEST(PldmLoss, HingeInactiveAboveUnitStd) {
  const auto in = seeded_instance(6, 3, 4, 5);
  Array Z = normal_matrix(3 * 4, 5, 7, 40.0);
  // Make every per-step column variance comfortably large.
  Instance big = in;
  big.Z = Z;
  Graph g;
  const auto terms = pldm_loss(batch_of(g.constant(big.Z), g.constant(big.Zp), big), nullptr, nullptr, {});
  for (std::size_t t = 0; t < 3; ++t) {
    const auto ref = oracle::covariance(to_cube(Z, 3, 4)[t], 0, 0);
    ASSERT_GE(ref, (1.0 + 1e-4) * (1.0 + 1e-4));
  }
  EXPECT_EQ(terms.value("var"), 0.0);
}

TEST(PldmLoss, DiagonalCovarianceHasNoCovTerm) {
  // Per step, sample i carries +-c on feature i mod D only, balanced so every
  // column has mean zero and columns never overlap.
  const std::size_t T = 2, B = 8, D = 4;
  Array Z = Array::matrix(T * B, D);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < B; ++i) Z(t * B + i, i % D) = (i < D ? 1.0 : -1.0) * (1.0 + static_cast<double>(t));
  Instance in{T, B, D, 3, Z, normal_matrix((T - 1) * B, D, 1), Array::matrix((T - 1) * B, 3)};
  Graph g;
  const auto terms = pldm_loss(batch_of(g.constant(in.Z), g.constant(in.Zp), in), nullptr, nullptr, {});
  EXPECT_EQ(terms.value("cov"), 0.0);
}

TEST(PldmLoss, StaticTrajectoriesHaveNoTimeSim) {
  const std::size_t T = 3, B = 4, D = 5;
  const Array frame = normal_matrix(B, D, 8);
  Array Z = Array::matrix(T * B, D);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t d = 0; d < D; ++d) Z(t * B + i, d) = frame(i, d);
  Instance in{T, B, D, 3, Z, normal_matrix((T - 1) * B, D, 9), Array::matrix((T - 1) * B, 3)};
  Graph g;
  const auto terms = pldm_loss(batch_of(g.constant(in.Z), g.constant(in.Zp), in), nullptr, nullptr, {});
  EXPECT_EQ(terms.value("time_sim"), 0.0);
}

TEST(PldmLoss, ComponentsAreNonNegative) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto in = seeded_instance(400 + s, 3, 5, 4);
    InverseDynamics idm(in.D, in.K, 4, s);
    Graph g;
    Var acts = g.constant(in.A);
    const auto terms = pldm_loss(batch_of(g.constant(in.Z), g.constant(in.Zp), in), &acts, &idm, all_on());
    for (const auto& [name, v] : terms.components) EXPECT_GE(v.value().item(), 0.0) << name;
  }
}

TEST(PldmLoss, DegenerateShapesAreErrors) {
  {
    const auto in = seeded_instance(20, 3, 1, 4);
    Graph g;
    EXPECT_THROW(pldm_loss(batch_of(g.constant(in.Z), g.constant(in.Zp), in), nullptr, nullptr, {}),
                 DegenerateBatchError);
  }
  {
    PldmCoefficients k;
    k.mu = 1.0;
    const auto in = seeded_instance(21);
    Graph g;
    EXPECT_THROW(pldm_loss(batch_of(g.constant(in.Z), g.constant(in.Zp), in), nullptr, nullptr, k), Error);
  }
}

TEST(PldmLoss, GradientOfTotalAndEveryComponent) {
  const auto in = seeded_instance(30, 3, 4, 5);
  InverseDynamics idm(in.D, in.K, 5, 31);
  ParameterSet ps;
  ps.add("Z", in.Z);
  ps.add("Zp", in.Zp);
  std::vector<std::string> which{"total"};
  for (const auto& n : pldm_component_names()) which.push_back(n);
  for (const auto& w : which) {
    auto build = [&](Graph& g) {
      Var acts = g.constant(in.A);
      const auto t = pldm_loss(batch_of(g.parameter(ps.at("Z")), g.parameter(ps.at("Zp")), in), &acts, &idm,
                               all_on());
      return w == "total" ? t.total : t.component(w);
    };
    EXPECT_LT(grad_check(build, ps, 1e-5), 1e-4) << w;
    if (w == "idm" || w == "total") EXPECT_LT(grad_check(build, idm.params(), 1e-5), 1e-4) << w;
  }
}

TEST(PldmLoss, ZeroCoefficientRemovesGradient) {
  // Zeroing alpha must give the same gradient as dropping the var term.
  const auto in = seeded_instance(40);
  ParameterSet ps;
  ps.add("Z", in.Z);
  ps.add("Zp", in.Zp);
  auto grad_with = [&](bool drop_var) {
    PldmCoefficients k;
    if (drop_var) k.alpha = 0.0;
    Graph g;
    const auto t = pldm_loss(batch_of(g.parameter(ps.at("Z")), g.parameter(ps.at("Zp")), in), nullptr, nullptr, k);
    Var loss = drop_var ? t.total : sub(t.total, scale(t.component("var"), k.alpha));
    g.backward(loss);
    return ps.at("Z").grad;
  };
  const Array a = grad_with(true), b = grad_with(false);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(PldmCoefficients, DefaultsAndTextRoundTrip) {
  PldmCoefficients k;
  EXPECT_EQ(k.alpha, 18.0);
  EXPECT_EQ(k.beta, 12.0);
  EXPECT_EQ(k.gamma, 0.2);
  EXPECT_EQ(k.zeta, 0.7);
  EXPECT_EQ(k.nu, 0.0);
  EXPECT_EQ(k.mu, 0.0);
  EXPECT_EQ(k.epsilon, 1e-4);
  k.nu = 0.125;
  KeyValues kv;
  k.write(kv);
  PldmCoefficients back;
  back.read(KeyValues::parse(kv.serialize()));
  EXPECT_EQ(back, k);
}
