#pragma once

// Frame-skip trajectories from the heuristic policy, VoE perturbations and
// the binary dataset container:
//   "LEWMDATA" | u32 version | str env-config text | u64 seed | u64 count |
//   per trajectory: u64 episode seed | u64 T |
//     T states  (agent x, agent y, goal x, goal y, colour) as f64 |
//     T frames  (render_size^2 u8 each) |
//     T-1 action blocks (frame_skip x 2 f32 each)

#include <cstdint>
#include <string>
#include <vector>

#include "lewm/binary_io.hpp"
#include "lewm/env.hpp"

namespace lewm {

struct Trajectory {
  std::vector<RoomWorldState> states;
  std::vector<std::uint8_t> frames;   // T x render_size^2
  std::vector<float> action_blocks;   // (T-1) x frame_skip x 2
  std::uint64_t episode_seed = 0;

  std::size_t length() const { return states.size(); }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct Dataset {
  EnvConfig config;
  std::uint64_t seed = 0;
  std::vector<Trajectory> trajectories;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline std::size_t frame_pixels(const EnvConfig& cfg) { return cfg.render_size * cfg.render_size; }
inline std::size_t block_width(const EnvConfig& cfg) { return cfg.frame_skip * 2; }

inline Vec2 block_action(const Trajectory& tr, const EnvConfig& cfg, std::size_t block, std::size_t k) {
  const std::size_t base = block * block_width(cfg) + 2 * k;
  return {static_cast<double>(tr.action_blocks[base]), static_cast<double>(tr.action_blocks[base + 1])};
}

/// Runs one block of frame_skip low-level actions.
inline RoomWorldState apply_block(RoomWorldState s, const Trajectory& tr, const EnvConfig& cfg,
                                  std::size_t block) {
  for (std::size_t k = 0; k < cfg.frame_skip; ++k) s = step(s, block_action(tr, cfg, block, k), cfg);
  return s;
}

/// Replays the stored action blocks from states[0]; true when every stored
/// state is reproduced.
inline bool replay_matches(const Trajectory& tr, const EnvConfig& cfg, double tol = 0.0) {
  if (tr.states.empty()) return true;
  RoomWorldState s = tr.states[0];
  for (std::size_t b = 0; b + 1 < tr.length(); ++b) {
    s = apply_block(s, tr, cfg, b);
    const auto& ref = tr.states[b + 1];
    if (std::abs(s.agent.x - ref.agent.x) > tol || std::abs(s.agent.y - ref.agent.y) > tol) return false;
  }
  return true;
}

inline void append_frame(Trajectory& tr, const RoomWorldState& s, const EnvConfig& cfg) {
  const auto f = render_u8(s, cfg);
  tr.frames.insert(tr.frames.end(), f.begin(), f.end());
}

/// One heuristic-policy episode from a random start to a random goal in the
/// other room. Frames are kept every frame_skip steps; the episode stops at
/// the first frame within success_radius of the goal or after max_len steps.
inline Trajectory generate_episode(const EnvConfig& cfg, std::size_t max_len, std::uint64_t episode_seed) {
  Rng rng(episode_seed);
  const int start_room = rng.uniform() < 0.5 ? -1 : 1;
  RoomWorldState s;
  s.agent = sample_position(start_room, cfg, rng);
  s.goal = sample_position(-start_room, cfg, rng);
  Trajectory tr;
  tr.episode_seed = episode_seed;
  tr.states.push_back(s);
  append_frame(tr, s, cfg);
  std::size_t steps = 0;
  while (!reached_goal(s, cfg) && steps + cfg.frame_skip <= max_len) {
    for (std::size_t k = 0; k < cfg.frame_skip; ++k) {
      const Vec2 a = heuristic_policy(s, cfg, rng);
      // Stored at f32, so the executed action is the f32 value.
      const float ax = static_cast<float>(a.x), ay = static_cast<float>(a.y);
      tr.action_blocks.push_back(ax);
      tr.action_blocks.push_back(ay);
      s = step(s, {static_cast<double>(ax), static_cast<double>(ay)}, cfg);
    }
    steps += cfg.frame_skip;
    tr.states.push_back(s);
    append_frame(tr, s, cfg);
  }
  return tr;
}

inline Dataset generate_dataset(const EnvConfig& cfg, std::size_t n_episodes, std::size_t max_len,
                                std::uint64_t seed) {
  cfg.validate();
  if (n_episodes == 0) throw Error("generate_dataset: need at least one episode");
  Dataset ds;
  ds.config = cfg;
  ds.seed = seed;
  ds.trajectories.reserve(n_episodes);
  for (std::size_t e = 0; e < n_episodes; ++e) {
    ds.trajectories.push_back(generate_episode(cfg, max_len, derive_seed(seed, e)));
  }
  return ds;
}

enum class Perturbation { recolor, teleport };

/// Visual (recolor) or physical (teleport) violation from frame t_perturb on.
/// Frames before t_perturb are untouched. A teleport lands farther from the
/// previous position than one block can travel, then the original action
/// blocks are replayed from there.
inline Trajectory perturb(const Trajectory& tr, Perturbation kind, std::size_t t_perturb, const EnvConfig& cfg,
                          Rng& rng) {
  const std::size_t T = tr.length();
  if (!(t_perturb > 1 && t_perturb < T)) {
    throw Error("perturb: t_perturb " + std::to_string(t_perturb) + " outside (1, " + std::to_string(T) + ")");
  }
  Trajectory out = tr;
  const std::size_t px = frame_pixels(cfg);
  out.frames.resize(t_perturb * px);
  if (kind == Perturbation::recolor) {
    for (std::size_t t = t_perturb; t < T; ++t) {
      out.states[t].agent_color_idx = (tr.states[t].agent_color_idx + 1) % kAgentShades.size();
      append_frame(out, out.states[t], cfg);
    }
    return out;
  }
  const double reach = static_cast<double>(cfg.frame_skip) * cfg.max_step * std::sqrt(2.0);
  const Vec2 prev = tr.states[t_perturb - 1].agent;
  Vec2 p;
  do {
    p = sample_any_position(cfg, rng);
  } while (distance(p, prev) <= reach);
  out.states[t_perturb].agent = p;
  append_frame(out, out.states[t_perturb], cfg);
  for (std::size_t t = t_perturb + 1; t < T; ++t) {
    out.states[t] = apply_block(out.states[t - 1], tr, cfg, t - 1);
    append_frame(out, out.states[t], cfg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary container

inline constexpr char kDatasetMagic[9] = "LEWMDATA";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<char> dataset_bytes(const Dataset& ds) {
  io::Writer w;
  w.bytes(kDatasetMagic, 8);
  w.u32(kDatasetVersion);
  KeyValues kv;
  ds.config.write(kv);
  w.str(kv.serialize());
  w.u64(ds.seed);
  w.u64(ds.trajectories.size());
  for (const auto& tr : ds.trajectories) {
    w.u64(tr.episode_seed);
    w.u64(tr.length());
    for (const auto& s : tr.states) {
      w.f64(s.agent.x);
      w.f64(s.agent.y);
      w.f64(s.goal.x);
      w.f64(s.goal.y);
      w.f64(static_cast<double>(s.agent_color_idx));
    }
    w.bytes(tr.frames.data(), tr.frames.size());
    for (float a : tr.action_blocks) w.f32(a);
  }
  return w.buffer();
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  io::Writer w;
  const auto bytes = dataset_bytes(ds);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline Dataset load_dataset_bytes(std::vector<char> bytes) {
  io::Reader r(std::move(bytes));
  r.expect_magic(kDatasetMagic);
  const auto version = r.u32();
  if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version));
  Dataset ds;
  const KeyValues kv = KeyValues::parse(r.str());
  ds.config.read(kv);
  kv.require_all_consumed();
  ds.config.validate();
  ds.seed = r.u64();
  const std::uint64_t n = r.u64();
  const std::size_t px = frame_pixels(ds.config);
  const std::size_t bw = block_width(ds.config);
  for (std::uint64_t i = 0; i < n; ++i) {
    Trajectory tr;
    tr.episode_seed = r.u64();
    const std::uint64_t T = r.u64();
    if (T == 0) throw FormatError("empty trajectory in dataset");
    tr.states.resize(T);
    for (auto& s : tr.states) {
      s.agent.x = r.f64();
      s.agent.y = r.f64();
      s.goal.x = r.f64();
      s.goal.y = r.f64();
      s.agent_color_idx = static_cast<std::uint32_t>(r.f64());
    }
    tr.frames.resize(T * px);
    r.bytes(tr.frames.data(), tr.frames.size());
    tr.action_blocks.resize((T - 1) * bw);
    for (float& a : tr.action_blocks) a = r.f32();
    ds.trajectories.push_back(std::move(tr));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after dataset");
  return ds;
}

inline Dataset load_dataset(const std::string& path) { return load_dataset_bytes(io::read_file(path)); }

/// Frame t of a trajectory de-quantized to [0, 1].
inline std::vector<double> frame_values(const Trajectory& tr, const EnvConfig& cfg, std::size_t t) {
  const std::size_t px = frame_pixels(cfg);
  std::vector<double> out(px);
  for (std::size_t i = 0; i < px; ++i) out[i] = tr.frames[t * px + i] / 255.0;
  return out;
}

/// Frames [begin, begin + count) as rows of pixels in [0, 1].
inline Array frame_rows(const Trajectory& tr, const EnvConfig& cfg, std::size_t begin, std::size_t count) {
  if (begin + count > tr.length()) throw ShapeError("frame_rows: range past the end of the trajectory");
  const std::size_t px = frame_pixels(cfg);
  Array out = Array::matrix(count, px);
  for (std::size_t i = 0; i < count * px; ++i) out[i] = tr.frames[begin * px + i] / 255.0;
  return out;
}

inline Array frame_rows(const Trajectory& tr, const EnvConfig& cfg) { return frame_rows(tr, cfg, 0, tr.length()); }

/// Action blocks [begin, begin + count) divided by max_step, one block per row.
inline Array action_rows(const Trajectory& tr, const EnvConfig& cfg, std::size_t begin, std::size_t count) {
  if (begin + count + 1 > tr.length()) throw ShapeError("action_rows: range past the last action block");
  const std::size_t bw = block_width(cfg);
  Array out = Array::matrix(count, bw);
  for (std::size_t i = 0; i < count * bw; ++i) out[i] = tr.action_blocks[begin * bw + i] / cfg.max_step;
  return out;
}

}  // namespace lewm
