#pragma once

// Cross-entropy-method planning in latent space and the receding-horizon
// episode loop around it. Candidate actions live in normalized units
// (env action / max_step), so the default bounds are [-1, 1].

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "lewm/dataset.hpp"
#include "lewm/env.hpp"
#include "lewm/kv.hpp"
#include "lewm/rng.hpp"
#include "lewm/worldmodel.hpp"

namespace lewm {

struct CemConfig {
  std::size_t n_samples = 300;
  std::size_t n_iters = 10;
  std::size_t n_elites = 30;
  double init_std = 1.0;
  std::size_t horizon = 5;
  double action_low = -1.0;
  double action_high = 1.0;
  double std_floor = 1e-3;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_samples == 0) throw Error("CemConfig: n_samples must be >= 1");
    if (n_elites == 0 || n_elites > n_samples) throw Error("CemConfig: need 1 <= n_elites <= n_samples");
    if (n_iters == 0) throw Error("CemConfig: n_iters must be >= 1");
    if (horizon == 0) throw Error("CemConfig: horizon must be >= 1");
    if (!(init_std > 0.0)) throw Error("CemConfig: init_std must be > 0");
    if (!(std_floor > 0.0)) throw Error("CemConfig: std_floor must be > 0");
    if (!(action_low < action_high)) throw Error("CemConfig: action_low must be < action_high");
  }

  void write(KeyValues& kv, const std::string& p = "cem.") const {
    kv.set_size(p + "n_samples", n_samples);
    kv.set_size(p + "n_iters", n_iters);
    kv.set_size(p + "n_elites", n_elites);
    kv.set(p + "init_std", init_std);
    kv.set_size(p + "horizon", horizon);
    kv.set(p + "action_low", action_low);
    kv.set(p + "action_high", action_high);
    kv.set(p + "std_floor", std_floor);
  }
  void read(const KeyValues& kv, const std::string& p = "cem.") {
    kv.read_size(p + "n_samples", n_samples);
    kv.read_size(p + "n_iters", n_iters);
    kv.read_size(p + "n_elites", n_elites);
    kv.read(p + "init_std", init_std);
    kv.read_size(p + "horizon", horizon);
    kv.read(p + "action_low", action_low);
    kv.read(p + "action_high", action_high);
    kv.read(p + "std_floor", std_floor);
  }

  friend bool operator==(const CemConfig&, const CemConfig&) = default;
};

struct CemState {
  Array mean;  // horizon x block_dim
  Array std;
};

struct CemIteration {
  double best_cost = 0.0;
  double mean_cost = 0.0;
  double elite_cost_mean = 0.0;
};

struct PlanResult {
  Array best_actions;  // horizon x block_dim
  double best_cost = 0.0;
  std::vector<double> cost_trace;  // best cost within each iteration
  std::vector<CemIteration> iterations;
  CemState final_state;
};

/// Costs for a batch of candidates: row n of the argument is candidate n
/// flattened (horizon * block_dim); one cost per row.
using BatchCost = std::function<std::vector<double>(const Array&)>;

/// Squared Euclidean distance between a final latent and the goal latent.
inline double goal_cost(std::span<const double> z_final, std::span<const double> z_goal) {
  if (z_final.size() != z_goal.size()) {
    throw ShapeError("goal_cost: latent sizes " + std::to_string(z_final.size()) + " and " +
                     std::to_string(z_goal.size()) + " differ");
  }
  double s = 0.0;
  for (std::size_t j = 0; j < z_final.size(); ++j) s += (z_final[j] - z_goal[j]) * (z_final[j] - z_goal[j]);
  return s;
}

inline PlanResult cem(const BatchCost& cost_fn, std::size_t block_dim, const CemConfig& cfg) {
  cfg.validate();
  if (block_dim == 0) throw Error("cem: block_dim must be >= 1");
  const std::size_t N = cfg.n_samples, K = cfg.n_elites, D = cfg.horizon * block_dim;
  Rng rng(cfg.seed);
  CemState st{Array::matrix(cfg.horizon, block_dim, 0.0), Array::matrix(cfg.horizon, block_dim, cfg.init_std)};
  PlanResult res;
  res.best_cost = std::numeric_limits<double>::infinity();
  Array cand = Array::matrix(N, D);
  std::vector<std::size_t> order(N);
  for (std::size_t it = 0; it < cfg.n_iters; ++it) {
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t j = 0; j < D; ++j) {
        cand(n, j) = std::clamp(st.mean[j] + st.std[j] * rng.normal(), cfg.action_low, cfg.action_high);
      }
    }
    const std::vector<double> cost = cost_fn(cand);
    if (cost.size() != N) throw ShapeError("cem: cost function returned " + std::to_string(cost.size()) + " values");
    for (std::size_t n = 0; n < N; ++n) {
      if (!std::isfinite(cost[n])) {
        throw NonFiniteError("cem: non-finite cost for candidate " + std::to_string(n) + " at iteration " +
                             std::to_string(it));
      }
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return cost[a] < cost[b]; });

    CemIteration rec;
    rec.best_cost = cost[order[0]];
    for (double c : cost) rec.mean_cost += c;
    rec.mean_cost /= static_cast<double>(N);
    for (std::size_t e = 0; e < K; ++e) rec.elite_cost_mean += cost[order[e]];
    rec.elite_cost_mean /= static_cast<double>(K);
    res.iterations.push_back(rec);
    res.cost_trace.push_back(rec.best_cost);
    if (rec.best_cost < res.best_cost) {
      res.best_cost = rec.best_cost;
      const auto row = cand.row_span(order[0]);
      res.best_actions = Array::matrix(cfg.horizon, block_dim);
      std::copy(row.begin(), row.end(), res.best_actions.storage().begin());
    }

    for (std::size_t j = 0; j < D; ++j) {
      double m = 0.0;
      for (std::size_t e = 0; e < K; ++e) m += cand(order[e], j);
      m /= static_cast<double>(K);
      double v = 0.0;
      for (std::size_t e = 0; e < K; ++e) v += (cand(order[e], j) - m) * (cand(order[e], j) - m);
      v /= static_cast<double>(K);
      st.mean[j] = m;
      st.std[j] = std::max(std::sqrt(v), cfg.std_floor);
    }
  }
  res.final_state = std::move(st);
  return res;
}

inline void write_plan_trace(std::ostream& os, const PlanResult& r) {
  os << "iteration,best_cost,mean_cost,elite_cost_mean\n";
  for (std::size_t i = 0; i < r.iterations.size(); ++i) {
    const auto& it = r.iterations[i];
    os << i << ',' << format_double(it.best_cost) << ',' << format_double(it.mean_cost) << ','
       << format_double(it.elite_cost_mean) << '\n';
  }
}

/// Batched latent cost: roll every candidate out from the encoded context and
/// compare the final prediction with the goal latent.
inline BatchCost latent_goal_cost(WorldModel& model, std::vector<Array> z_context, Array z_goal,
                                  std::size_t horizon) {
  const std::size_t bd = model.config().block_dim();
  return [&model, z_context = std::move(z_context), z_goal = std::move(z_goal), horizon, bd](const Array& cand) {
    const std::size_t N = cand.rows();
    const std::size_t d = z_goal.cols();
    std::vector<Array> hist;
    for (const Array& z : z_context) {
      Array rep = Array::matrix(N, d);
      for (std::size_t n = 0; n < N; ++n) std::copy(z.storage().begin(), z.storage().end(), rep.storage().begin() + n * d);
      hist.push_back(std::move(rep));
    }
    std::vector<Array> blocks;
    for (std::size_t h = 0; h < horizon; ++h) {
      Array a = Array::matrix(N, bd);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t j = 0; j < bd; ++j) a(n, j) = cand(n, h * bd + j);
      }
      blocks.push_back(std::move(a));
    }
    const Array z_final = model.rollout(std::move(hist), blocks).back();
    std::vector<double> cost(N);
    for (std::size_t n = 0; n < N; ++n) cost[n] = goal_cost(z_final.row_span(n), z_goal.row_span(0));
    return cost;
  };
}

/// obs_context: history_len observation rows (oldest first); obs_goal: one row.
/// Parameters and running statistics are only read.
inline PlanResult plan(WorldModel& model, const Array& obs_context, const Array& obs_goal, const CemConfig& cfg) {
  const auto& mc = model.config();
  if (obs_context.rows() != mc.history_len) {
    throw ShapeError("plan: context holds " + std::to_string(obs_context.rows()) + " frames, model expects " +
                     std::to_string(mc.history_len));
  }
  if (obs_goal.rows() != 1) throw ShapeError("plan: goal must be a single observation row");
  const Array z_ctx = model.encode(obs_context, Mode::eval);
  std::vector<Array> hist;
  for (std::size_t h = 0; h < mc.history_len; ++h) hist.push_back(slice_rows(z_ctx, h, 1));
  Array z_goal = model.encode(obs_goal, Mode::eval);
  return cem(latent_goal_cost(model, std::move(hist), std::move(z_goal), cfg.horizon), mc.block_dim(), cfg);
}

// ---------------------------------------------------------------------------
// Receding-horizon episodes

struct EpisodeRecord {
  bool success = false;
  std::size_t steps_used = 0;
  double final_distance = 0.0;
  std::size_t plans = 0;
  std::vector<RoomWorldState> states;  // every low-level state, start included
};

inline Array observation_row(const RoomWorldState& s, const EnvConfig& env) {
  const auto frame = quantize_frame(render(s, env));
  Array row = Array::matrix(1, frame.size());
  for (std::size_t i = 0; i < frame.size(); ++i) row[i] = frame[i] / 255.0;
  return row;
}

/// Sees every planning call of an episode (index within the episode).
using PlanObserver = std::function<void(std::size_t, const PlanResult&)>;

/// Plan, execute the first exec_blocks blocks, replan; success is checked
/// after every low-level step and the episode stops at the budget.
inline EpisodeRecord mpc_episode(WorldModel& model, const EnvConfig& env, RoomWorldState start, Vec2 goal,
                                 const CemConfig& cem_cfg, std::size_t budget, std::size_t exec_blocks,
                                 const PlanObserver& observer = {}) {
  const auto& mc = model.config();
  if (mc.frame_skip != env.frame_skip) throw Error("mpc_episode: model and env frame_skip differ");
  if (exec_blocks == 0 || exec_blocks > cem_cfg.horizon) {
    throw Error("mpc_episode: exec_blocks must be in [1, horizon]");
  }
  start.goal = goal;
  RoomWorldState goal_state = start;
  goal_state.agent = goal;
  const Array obs_goal = observation_row(goal_state, env);

  EpisodeRecord rec;
  RoomWorldState s = start;
  rec.states.push_back(s);
  std::vector<Array> frames{observation_row(s, env)};
  rec.success = reached_goal(s, env);
  while (!rec.success && rec.steps_used < budget) {
    Array context = Array::matrix(mc.history_len, mc.obs_size());
    for (std::size_t h = 0; h < mc.history_len; ++h) {
      const std::size_t back = mc.history_len - 1 - h;
      const Array& f = frames[frames.size() > back ? frames.size() - 1 - back : 0];
      std::copy(f.storage().begin(), f.storage().end(), context.storage().begin() + h * mc.obs_size());
    }
    CemConfig c = cem_cfg;
    c.seed = derive_seed(cem_cfg.seed, rec.plans);
    const PlanResult p = plan(model, context, obs_goal, c);
    if (observer) observer(rec.plans, p);
    ++rec.plans;
    for (std::size_t b = 0; b < exec_blocks && !rec.success && rec.steps_used < budget; ++b) {
      for (std::size_t k = 0; k < env.frame_skip && !rec.success && rec.steps_used < budget; ++k) {
        const Vec2 a{p.best_actions(b, 2 * k) * env.max_step, p.best_actions(b, 2 * k + 1) * env.max_step};
        s = step(s, a, env);
        ++rec.steps_used;
        rec.states.push_back(s);
        rec.success = reached_goal(s, env);
      }
      frames.push_back(observation_row(s, env));
    }
  }
  rec.final_distance = distance(s.agent, goal);
  return rec;
}

struct ControlProtocol {
  std::size_t n_episodes = 50;
  std::size_t goal_offset_steps = 100;
  std::size_t budget = 150;
  std::size_t exec_blocks = 5;

  void write(KeyValues& kv, const std::string& p = "control.") const {
    kv.set_size(p + "n_episodes", n_episodes);
    kv.set_size(p + "goal_offset_steps", goal_offset_steps);
    kv.set_size(p + "budget", budget);
    kv.set_size(p + "exec_blocks", exec_blocks);
  }
  void read(const KeyValues& kv, const std::string& p = "control.") {
    kv.read_size(p + "n_episodes", n_episodes);
    kv.read_size(p + "goal_offset_steps", goal_offset_steps);
    kv.read_size(p + "budget", budget);
    kv.read_size(p + "exec_blocks", exec_blocks);
  }

  friend bool operator==(const ControlProtocol&, const ControlProtocol&) = default;
};

struct ControlEpisode {
  std::size_t trajectory = 0;
  std::size_t start_frame = 0;
  EpisodeRecord record;
};

struct ControlReport {
  std::vector<ControlEpisode> episodes;
  std::size_t successes = 0;

  double success_rate() const {
    return episodes.empty() ? 0.0 : static_cast<double>(successes) / static_cast<double>(episodes.size());
  }
  /// Binomial standard error of the success rate.
  double standard_error() const {
    if (episodes.empty()) return 0.0;
    const double p = success_rate();
    return std::sqrt(p * (1.0 - p) / static_cast<double>(episodes.size()));
  }
};

/// Start states drawn uniformly from dataset frames that have a frame
/// goal_offset_steps low-level steps later in the same trajectory; that later
/// position is the goal.
/// The observer, when set, receives (episode, plan index, result).
using EpisodePlanObserver = std::function<void(std::size_t, std::size_t, const PlanResult&)>;

inline ControlReport evaluate_control(WorldModel& model, const Dataset& data, const CemConfig& cem_cfg,
                                      const ControlProtocol& proto, std::uint64_t seed,
                                      const EpisodePlanObserver& observer = {}) {
  const EnvConfig& env = data.config;
  if (proto.goal_offset_steps % env.frame_skip != 0) {
    throw Error("evaluate_control: goal offset " + std::to_string(proto.goal_offset_steps) +
                " is not a multiple of frame_skip " + std::to_string(env.frame_skip));
  }
  const std::size_t offset = proto.goal_offset_steps / env.frame_skip;
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < data.trajectories.size(); ++i) {
    if (data.trajectories[i].length() > offset) eligible.push_back(i);
  }
  if (eligible.empty()) {
    throw Error("evaluate_control: no trajectory spans " + std::to_string(proto.goal_offset_steps) + " steps");
  }
  Rng rng(seed);
  ControlReport rep;
  for (std::size_t e = 0; e < proto.n_episodes; ++e) {
    const std::size_t ti = eligible[rng.index(eligible.size())];
    const Trajectory& tr = data.trajectories[ti];
    const std::size_t t0 = rng.index(tr.length() - offset);
    CemConfig c = cem_cfg;
    c.seed = derive_seed(seed, 1000003 + e);
    PlanObserver per_plan;
    if (observer) per_plan = [&observer, e](std::size_t k, const PlanResult& r) { observer(e, k, r); };
    ControlEpisode ep{ti, t0,
                      mpc_episode(model, env, tr.states[t0], tr.states[t0 + offset].agent, c, proto.budget,
                                  proto.exec_blocks, per_plan)};
    rep.successes += ep.record.success ? 1 : 0;
    rep.episodes.push_back(std::move(ep));
  }
  return rep;
}

inline void write_control_csv(std::ostream& os, const ControlReport& rep) {
  os << "episode,trajectory,start_frame,success,steps_used,final_distance,plans\n";
  for (std::size_t e = 0; e < rep.episodes.size(); ++e) {
    const auto& ep = rep.episodes[e];
    os << e << ',' << ep.trajectory << ',' << ep.start_frame << ',' << (ep.record.success ? 1 : 0) << ','
       << ep.record.steps_used << ',' << format_double(ep.record.final_distance) << ',' << ep.record.plans << '\n';
  }
}

}  // namespace lewm
