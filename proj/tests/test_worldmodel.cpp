#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "lewm/checkpoint.hpp"
#include "lewm/grad_check.hpp"
#include "lewm/train.hpp"
#include "lewm/worldmodel.hpp"

using namespace lewm;

namespace {

WorldModelConfig small_config(std::size_t history = 1) {
  WorldModelConfig c;
  c.obs_height = 4;
  c.obs_width = 3;
  c.embed_dim = 4;
  c.encoder_hidden = {6};
  c.predictor_hidden = {5};
  c.history_len = history;
  c.frame_skip = 2;
  return c;
}

Array uniform_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Array a = Array::matrix(r, c);
  for (double& v : a.storage()) v = rng.uniform(lo, hi);
  return a;
}

void randomize_action_weights(WorldModel& m, std::uint64_t seed) {
  Rng rng(seed);
  for (double& v : m.params().at("predictor.in.weight_a").value.storage()) v = rng.uniform(-0.5, 0.5);
}

}  // namespace

TEST(Config, BlockDimIsActionTimesFrameSkip) {
  const auto c = small_config();
  EXPECT_EQ(c.block_dim(), 4u);
  auto bad = c;
  bad.embed_dim = 1;
  EXPECT_THROW(bad.validate(), Error);
  bad = c;
  bad.history_len = 0;
  EXPECT_THROW(bad.validate(), Error);
  bad = c;
  bad.frame_skip = 0;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Config, TextRoundTrip) {
  auto c = small_config(2);
  c.encoder_hidden = {7, 3, 9};
  KeyValues kv;
  c.write(kv);
  WorldModelConfig back;
  back.read(KeyValues::parse(kv.serialize()));
  EXPECT_EQ(back, c);
}

TEST(Encode, EvalModeIsDeterministicAndPure) {
  WorldModel m(small_config(), 1);
  Array obs = uniform_matrix(3, 12, 2);
  for (std::size_t j = 0; j < 12; ++j) obs(1, j) = obs(0, j);
  const ParameterSet before = m.params();
  const Array z1 = m.encode(obs);
  const Array z2 = m.encode(obs);
  EXPECT_EQ(z1, z2);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(z1(0, j), z1(1, j));
  EXPECT_TRUE(m.params() == before);
}

TEST(Encode, TrainModeStandardizesToScaleAndShift) {
  WorldModelConfig cfg = small_config();
  cfg.norm_eps = 1e-15;  // otherwise eps/var shows up at this tolerance
  WorldModel m(cfg, 3);
  Rng rng(4);
  for (double& v : m.params().at("encoder.proj.scale").value.storage()) v = rng.uniform(0.5, 2.0);
  for (double& v : m.params().at("encoder.proj.shift").value.storage()) v = rng.uniform(-1.0, 1.0);
  const Array z = m.encode(uniform_matrix(9, 12, 5), Mode::train);
  const Array& scale = m.params().at("encoder.proj.scale").value;
  const Array& shift = m.params().at("encoder.proj.shift").value;
  for (std::size_t j = 0; j < 4; ++j) {
    double mu = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < 9; ++i) mu += z(i, j) / 9.0;
    for (std::size_t i = 0; i < 9; ++i) ss += (z(i, j) - mu) * (z(i, j) - mu) / 9.0;
    EXPECT_NEAR(mu, shift[j], 1e-6);
    EXPECT_NEAR(std::sqrt(ss), scale[j], 1e-6);
  }
}

TEST(Encode, RunningStatisticsMoveOnlyInTrainMode) {
  WorldModel m(small_config(), 6);
  const Array obs = uniform_matrix(8, 12, 7);
  const Array rm0 = m.params().at("encoder.proj.running_mean").value;
  m.encode(obs, Mode::eval);
  EXPECT_EQ(m.params().at("encoder.proj.running_mean").value, rm0);
  m.encode(obs, Mode::train);
  EXPECT_NE(m.params().at("encoder.proj.running_mean").value, rm0);
}

TEST(Encode, ShapeMismatchIsAnError) {
  WorldModel m(small_config(), 1);
  EXPECT_THROW(m.encode(Array::matrix(2, 11)), ShapeError);
}

TEST(Encode, GradientOfSquaredNorm) {
  WorldModel m(small_config(), 8);
  const Array obs = uniform_matrix(6, 12, 9);
  auto build = [&](Graph& g) { return sum(square(m.encode(g, g.constant(obs), Mode::train, false))); };
  const auto r = grad_check_detailed(build, m.params(), 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param;
  auto build_eval = [&](Graph& g) { return sum(square(m.encode(g, g.constant(obs), Mode::eval))); };
  EXPECT_LT(grad_check(build_eval, m.params(), 1e-5), 1e-4);
}

TEST(Predict, ZeroInitialisedActionWeightsIgnoreActions) {
  WorldModel m(small_config(), 10);
  for (double v : m.params().at("predictor.in.weight_a").value.storage()) EXPECT_EQ(v, 0.0);
  const Array z = uniform_matrix(2, 4, 11, -1, 1);
  const Array a0 = Array::matrix(2, 4, 0.0), a1 = Array::matrix(2, 4, 1.0);
  EXPECT_EQ(m.predict({z}, a0), m.predict({z}, a1));
  randomize_action_weights(m, 12);
  EXPECT_NE(m.predict({z}, a0), m.predict({z}, a1));
}

TEST(Predict, EvalModeIsDeterministic) {
  WorldModel m(small_config(), 13);
  randomize_action_weights(m, 14);
  const Array z = uniform_matrix(3, 4, 15, -1, 1), a = uniform_matrix(3, 4, 16, -1, 1);
  EXPECT_EQ(m.predict({z}, a), m.predict({z}, a));
}

TEST(Predict, WrongHistoryLengthIsAnError) {
  WorldModel m(small_config(2), 17);
  const Array z = Array::matrix(1, 4), a = Array::matrix(1, 4);
  EXPECT_THROW(m.predict({z}, a), ShapeError);
  EXPECT_NO_THROW(m.predict({z, z}, a));
  EXPECT_THROW(m.predict({z, z}, Array::matrix(1, 3)), ShapeError);
}

TEST(Predict, GradientWrtWeightsLatentsAndActions) {
  WorldModel m(small_config(2), 18);
  randomize_action_weights(m, 19);
  ParameterSet inputs;
  inputs.add("z0", uniform_matrix(5, 4, 20, -1, 1));
  inputs.add("z1", uniform_matrix(5, 4, 21, -1, 1));
  inputs.add("a", uniform_matrix(5, 4, 22, -1, 1));
  auto build = [&](Graph& g) {
    Var out = m.predict(g, {g.parameter(inputs.at("z0")), g.parameter(inputs.at("z1"))},
                        g.parameter(inputs.at("a")), Mode::train, false);
    return sum(mul(out, g.constant(uniform_matrix(5, 4, 23, -1, 1))));
  };
  EXPECT_LT(grad_check(build, m.params(), 1e-5), 1e-4);
  EXPECT_LT(grad_check(build, inputs, 1e-5), 1e-4);
}

TEST(Rollout, SingleStepEqualsPredict) {
  WorldModel m(small_config(), 24);
  randomize_action_weights(m, 25);
  const Array z = uniform_matrix(1, 4, 26, -1, 1), a = uniform_matrix(1, 4, 27, -1, 1);
  const auto r = m.rollout({z}, {a});
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0], m.predict({z}, a));
}

TEST(Rollout, CausalAndPrefixConsistent) {
  WorldModel m(small_config(2), 28);
  randomize_action_weights(m, 29);
  const std::vector<Array> hist{uniform_matrix(2, 4, 30, -1, 1), uniform_matrix(2, 4, 31, -1, 1)};
  std::vector<Array> acts{uniform_matrix(2, 4, 32, -1, 1), uniform_matrix(2, 4, 33, -1, 1),
                          uniform_matrix(2, 4, 34, -1, 1)};
  const auto r3 = m.rollout(hist, acts);
  const auto r2 = m.rollout(hist, {acts[0], acts[1]});
  EXPECT_EQ(r3[0], r2[0]);
  EXPECT_EQ(r3[1], r2[1]);
  acts[2] = uniform_matrix(2, 4, 35, -1, 1);
  const auto r3b = m.rollout(hist, acts);
  EXPECT_EQ(r3b[0], r3[0]);
  EXPECT_EQ(r3b[1], r3[1]);
  EXPECT_NE(r3b[2], r3[2]);
}

TEST(Rollout, EmptyHorizonIsAnError) {
  WorldModel m(small_config(), 36);
  EXPECT_THROW(m.rollout({Array::matrix(1, 4)}, {}), Error);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  WorldModel m(small_config(2), 37);
  randomize_action_weights(m, 38);
  m.encode(uniform_matrix(5, 12, 39), Mode::train);  // move the running statistics
  const auto bytes = checkpoint_bytes(m);
  WorldModel back = load_checkpoint_bytes(bytes);
  EXPECT_EQ(back.config(), m.config());
  EXPECT_TRUE(back.params() == m.params());
  EXPECT_EQ(checkpoint_bytes(back), bytes);
  const Array obs = uniform_matrix(4, 12, 40);
  EXPECT_EQ(back.encode(obs), m.encode(obs));
}

TEST(Checkpoint, FileRoundTrip) {
  WorldModel m(small_config(), 41);
  const auto path = std::filesystem::temp_directory_path() / "lewm_test_ckpt.bin";
  save_checkpoint(m, path.string());
  WorldModel back = load_checkpoint(path.string());
  EXPECT_EQ(checkpoint_bytes(back), checkpoint_bytes(m));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptInputsAreRejected) {
  WorldModel m(small_config(), 42);
  auto bytes = checkpoint_bytes(m);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(load_checkpoint_bytes(bad_magic), FormatError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(load_checkpoint_bytes(truncated), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(load_checkpoint_bytes(trailing), FormatError);
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt"), Error);
}

TEST(Training, RepeatsBitForBitInOneProcess) {
  const EnvConfig env;
  const Dataset ds = generate_dataset(env, 30, 300, 3);
  WorldModelConfig mc;
  mc.encoder_hidden = {32};
  mc.predictor_hidden = {32};
  TrainConfig tc;
  tc.batch_size = 16;
  tc.num_projections = 64;
  tc.max_steps = 6;
  tc.seed = 9;
  auto run = [&] {
    WorldModel m(mc, 4);
    Trainer t(m, ds, tc);
    for (std::size_t s = 0; s < t.total_steps(); ++s) t.step();
    return checkpoint_bytes(m);
  };
  const auto first = run();
  // Shift the heap so buffers land at different addresses the second time.
  std::vector<std::vector<char>> ballast;
  for (std::size_t i = 1; i < 40; ++i) ballast.emplace_back(i * 24 + 8);
  EXPECT_EQ(run(), first);
}
