#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "lewm/planner.hpp"

using namespace lewm;

namespace {

// Separable quadratic sum_j (x_j - c_j)^2 with the optimum inside the box.
BatchCost quadratic(std::vector<double> c) {
  return [c](const Array& x) {
    std::vector<double> out(x.rows(), 0.0);
    for (std::size_t n = 0; n < x.rows(); ++n)
      for (std::size_t j = 0; j < x.cols(); ++j) out[n] += (x(n, j) - c[j % c.size()]) * (x(n, j) - c[j % c.size()]);
    return out;
  };
}

CemConfig small_cem() {
  CemConfig c;
  c.n_samples = 200;
  c.n_elites = 20;
  c.n_iters = 15;
  c.horizon = 3;
  c.seed = 5;
  return c;
}

WorldModelConfig model_config(const EnvConfig& env) {
  WorldModelConfig c;
  c.obs_height = env.render_size;
  c.obs_width = env.render_size;
  c.embed_dim = 8;
  c.encoder_hidden = {16};
  c.predictor_hidden = {16};
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

TEST(Cem, FindsQuadraticOptimum) {
  const std::vector<double> c{0.3, -0.6, 0.1, 0.8};
  const auto r = cem(quadratic(c), 4, small_cem());
  ASSERT_EQ(r.best_actions.rows(), 3u);
  for (std::size_t h = 0; h < 3; ++h)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(r.best_actions(h, j), c[j], 1e-2);
  EXPECT_LT(r.best_cost, 1e-3);
}

TEST(Cem, RunningBestIsNonIncreasing) {
  const auto r = cem(quadratic({0.5, -0.2}), 2, small_cem());
  ASSERT_EQ(r.cost_trace.size(), 15u);
  double best = std::numeric_limits<double>::infinity();
  for (double c : r.cost_trace) {
    const double next = std::min(best, c);
    EXPECT_LE(next, best);
    best = next;
  }
  EXPECT_EQ(best, r.best_cost);
  for (const auto& it : r.iterations) {
    EXPECT_LE(it.best_cost, it.elite_cost_mean);
    EXPECT_LE(it.elite_cost_mean, it.mean_cost);
  }
}

TEST(Cem, OptimumOutsideTheBoxIsClipped) {
  // Unconstrained optimum at 3 in every coordinate.
  CemConfig cfg = small_cem();
  const auto r = cem(quadratic({3.0}), 2, cfg);
  for (double v : r.best_actions.storage()) {
    EXPECT_LE(v, cfg.action_high);
    EXPECT_NEAR(v, cfg.action_high, 1e-2);
  }
}

TEST(Cem, EveryCandidateIsInsideTheBox) {
  CemConfig cfg = small_cem();
  cfg.init_std = 10.0;
  auto check = [&](const Array& x) {
    for (double v : x.storage()) {
      EXPECT_GE(v, cfg.action_low);
      EXPECT_LE(v, cfg.action_high);
    }
    return std::vector<double>(x.rows(), 1.0);
  };
  cem(check, 3, cfg);
}

TEST(Cem, DeterministicForAFixedSeed) {
  const auto a = cem(quadratic({0.1, 0.2}), 2, small_cem());
  const auto b = cem(quadratic({0.1, 0.2}), 2, small_cem());
  EXPECT_EQ(a.best_actions, b.best_actions);
  EXPECT_EQ(a.cost_trace, b.cost_trace);
  CemConfig other = small_cem();
  other.seed = 6;
  EXPECT_NE(cem(quadratic({0.1, 0.2}), 2, other).cost_trace, a.cost_trace);
}

TEST(Cem, NonFiniteCostIsAnError) {
  auto bad = [](const Array& x) {
    std::vector<double> out(x.rows(), 0.0);
    out[3] = std::numeric_limits<double>::quiet_NaN();
    return out;
  };
  EXPECT_THROW(cem(bad, 2, small_cem()), NonFiniteError);
  auto short_cost = [](const Array& x) { return std::vector<double>(x.rows() - 1, 0.0); };
  EXPECT_THROW(cem(short_cost, 2, small_cem()), ShapeError);
}

TEST(Cem, InvalidConfigIsRejected) {
  CemConfig c = small_cem();
  c.n_elites = c.n_samples + 1;
  EXPECT_THROW(cem(quadratic({0.0}), 2, c), Error);
  c = small_cem();
  c.action_low = 1.0;
  EXPECT_THROW(c.validate(), Error);
  KeyValues kv;
  small_cem().write(kv);
  CemConfig back;
  back.read(KeyValues::parse(kv.serialize()));
  CemConfig expect = small_cem();
  expect.seed = back.seed;
  EXPECT_EQ(back, expect);
}

TEST(GoalCost, SquaredDistance) {
  const std::vector<double> a{1, 2, 3}, b{1, 0, 1};
  EXPECT_EQ(goal_cost(a, b), 8.0);
  EXPECT_THROW(goal_cost(a, std::vector<double>{1.0}), ShapeError);
}

TEST(Plan, LeavesTheModelUntouched) {
  const EnvConfig env = tiny_env();
  WorldModel m(model_config(env), 1);
  const ParameterSet before = m.params();
  RoomWorldState s;
  s.agent = {0.2, 0.3};
  RoomWorldState g = s;
  g.agent = {0.3, 0.3};
  CemConfig c = small_cem();
  c.n_iters = 2;
  const auto r1 = plan(m, observation_row(s, env), observation_row(g, env), c);
  const auto r2 = plan(m, observation_row(s, env), observation_row(g, env), c);
  EXPECT_TRUE(m.params() == before);
  EXPECT_EQ(r1.best_actions, r2.best_actions);
  EXPECT_EQ(r1.best_actions.cols(), 2 * env.frame_skip);
  EXPECT_THROW(plan(m, Array::matrix(2, env.render_size * env.render_size), observation_row(g, env), c),
               ShapeError);
}

TEST(Mpc, ZeroBudgetNeverMoves) {
  const EnvConfig env = tiny_env();
  WorldModel m(model_config(env), 2);
  RoomWorldState s;
  s.agent = {0.2, 0.3};
  const auto rec = mpc_episode(m, env, s, {0.8, 0.7}, small_cem(), 0, 1);
  EXPECT_FALSE(rec.success);
  EXPECT_EQ(rec.steps_used, 0u);
  EXPECT_EQ(rec.plans, 0u);
}

TEST(Mpc, BudgetAndContainmentAreRespected) {
  const EnvConfig env = tiny_env();
  WorldModel m(model_config(env), 3);
  RoomWorldState s;
  s.agent = {0.2, 0.3};
  CemConfig c = small_cem();
  c.n_iters = 2;
  c.n_samples = 30;
  c.n_elites = 5;
  const auto rec = mpc_episode(m, env, s, {0.8, 0.7}, c, 13, 2);
  EXPECT_EQ(rec.steps_used, 13u);
  EXPECT_EQ(rec.states.size(), 14u);
  EXPECT_EQ(rec.plans, 4u);  // 2 blocks of 2 steps per plan
  for (const auto& st : rec.states) EXPECT_TRUE(is_valid_position(st.agent, env));
  for (std::size_t i = 1; i < rec.states.size(); ++i) {
    EXPECT_LE(std::abs(rec.states[i].agent.x - rec.states[i - 1].agent.x), env.max_step + 1e-15);
  }
  EXPECT_THROW(mpc_episode(m, env, s, {0.8, 0.7}, c, 10, c.horizon + 1), Error);
}

TEST(Control, ZeroBudgetSucceedsOnlyAtTheGoal) {
  const EnvConfig env = tiny_env();
  WorldModel m(model_config(env), 4);
  const auto ds = generate_dataset(env, 5, 300, 9);
  ControlProtocol proto;
  proto.n_episodes = 6;
  proto.budget = 0;
  proto.exec_blocks = 3;
  proto.goal_offset_steps = 20;
  const auto rep = evaluate_control(m, ds, small_cem(), proto, 11);
  ASSERT_EQ(rep.episodes.size(), 6u);
  std::size_t expected = 0;
  for (const auto& ep : rep.episodes) {
    const auto& tr = ds.trajectories[ep.trajectory];
    const double d = distance(tr.states[ep.start_frame].agent, tr.states[ep.start_frame + 10].agent);
    expected += d <= env.success_radius ? 1 : 0;
    EXPECT_EQ(ep.record.steps_used, 0u);
  }
  EXPECT_EQ(rep.successes, expected);
  proto.goal_offset_steps = 21;
  EXPECT_THROW(evaluate_control(m, ds, small_cem(), proto, 11), Error);
}
