#pragma once

// Two rooms in the unit square separated by a vertical wall with one door.
// A point agent moves by clipped 2-D actions; collisions are resolved per
// axis by cancelling the blocked component.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lewm/array.hpp"
#include "lewm/kv.hpp"
#include "lewm/rng.hpp"

namespace lewm {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

inline double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct EnvConfig {
  double wall_x = 0.5;
  double wall_half_thickness = 0.02;
  double door_center_y = 0.5;
  double door_half_width = 0.3;
  double agent_radius = 0.03;
  double dot_radius = 0.08;  // drawn size only; collisions use agent_radius
  double max_step = 0.01;
  std::size_t render_size = 32;
  std::size_t frame_skip = 5;
  double success_radius = 0.05;
  double noise_scale = 0.6;

  void validate() const {
    if (!(max_step > 0.0)) throw Error("EnvConfig: max_step must be > 0");
    if (!(door_center_y - door_half_width > 0.0 && door_center_y + door_half_width < 1.0)) {
      throw Error("EnvConfig: door opening must lie strictly inside (0, 1)");
    }
    if (!(door_half_width > agent_radius)) throw Error("EnvConfig: door narrower than the agent");
    if (!(agent_radius > 0.0 && wall_x - wall_half_thickness - 2 * agent_radius > 0.0 &&
          wall_x + wall_half_thickness + 2 * agent_radius < 1.0)) {
      throw Error("EnvConfig: wall leaves no room on one side");
    }
    if (!(dot_radius > 0.0)) throw Error("EnvConfig: dot_radius must be > 0");
    if (render_size < 4) throw Error("EnvConfig: render_size must be >= 4");
    if (frame_skip < 1) throw Error("EnvConfig: frame_skip must be >= 1");
    if (!(success_radius > 0.0)) throw Error("EnvConfig: success_radius must be > 0");
    if (!(noise_scale >= 0.0)) throw Error("EnvConfig: noise_scale must be >= 0");
  }

  void write(KeyValues& kv, const std::string& p = "env.") const {
    kv.set(p + "wall_x", wall_x);
    kv.set(p + "wall_half_thickness", wall_half_thickness);
    kv.set(p + "door_center_y", door_center_y);
    kv.set(p + "door_half_width", door_half_width);
    kv.set(p + "agent_radius", agent_radius);
    kv.set(p + "dot_radius", dot_radius);
    kv.set(p + "max_step", max_step);
    kv.set_size(p + "render_size", render_size);
    kv.set_size(p + "frame_skip", frame_skip);
    kv.set(p + "success_radius", success_radius);
    kv.set(p + "noise_scale", noise_scale);
  }

  void read(const KeyValues& kv, const std::string& p = "env.") {
    kv.read(p + "wall_x", wall_x);
    kv.read(p + "wall_half_thickness", wall_half_thickness);
    kv.read(p + "door_center_y", door_center_y);
    kv.read(p + "door_half_width", door_half_width);
    kv.read(p + "agent_radius", agent_radius);
    kv.read(p + "dot_radius", dot_radius);
    kv.read(p + "max_step", max_step);
    kv.read_size(p + "render_size", render_size);
    kv.read_size(p + "frame_skip", frame_skip);
    kv.read(p + "success_radius", success_radius);
    kv.read(p + "noise_scale", noise_scale);
  }

  // Derived geometry for the agent centre.
  double slab_lo() const { return wall_x - wall_half_thickness - agent_radius; }
  double slab_hi() const { return wall_x + wall_half_thickness + agent_radius; }
  bool in_door_gap(double y) const { return std::abs(y - door_center_y) <= door_half_width - agent_radius; }

  friend bool operator==(const EnvConfig&, const EnvConfig&) = default;
};

inline constexpr std::array<double, 2> kAgentShades{0.75, 0.35};

struct RoomWorldState {
  Vec2 agent;
  Vec2 goal;
  std::uint32_t agent_color_idx = 0;
  friend bool operator==(const RoomWorldState&, const RoomWorldState&) = default;
};

/// -1 for the left room, +1 for the right room (the wall centre counts as right).
inline int room_of(double x, const EnvConfig& cfg) { return x < cfg.wall_x ? -1 : 1; }

inline bool is_valid_position(Vec2 p, const EnvConfig& cfg) {
  const double r = cfg.agent_radius;
  if (p.x < r || p.x > 1.0 - r || p.y < r || p.y > 1.0 - r) return false;
  const bool in_slab = p.x > cfg.slab_lo() && p.x < cfg.slab_hi();
  return !in_slab || cfg.in_door_gap(p.y);
}

inline Vec2 clip_action(Vec2 a, const EnvConfig& cfg) {
  return {std::clamp(a.x, -cfg.max_step, cfg.max_step), std::clamp(a.y, -cfg.max_step, cfg.max_step)};
}

/// One low-level transition. The x component is applied first, then y; a
/// component whose motion would enter the wall is cancelled.
inline RoomWorldState step(const RoomWorldState& s, Vec2 action, const EnvConfig& cfg) {
  const Vec2 a = clip_action(action, cfg);
  const double r = cfg.agent_radius;
  RoomWorldState next = s;

  double nx = std::clamp(s.agent.x + a.x, r, 1.0 - r);
  if (!cfg.in_door_gap(s.agent.y)) {
    const double lo = std::min(s.agent.x, nx), hi = std::max(s.agent.x, nx);
    if (hi > cfg.slab_lo() && lo < cfg.slab_hi()) nx = s.agent.x;
  }
  next.agent.x = nx;

  double ny = std::clamp(s.agent.y + a.y, r, 1.0 - r);
  const bool in_slab = nx > cfg.slab_lo() && nx < cfg.slab_hi();
  if (in_slab && !cfg.in_door_gap(ny)) ny = s.agent.y;
  next.agent.y = ny;
  return next;
}

/// Grayscale frame, row-major, row 0 at the top (y = 1). The wall is 1.0,
/// the agent is an anti-aliased disk whose shade depends on its colour index.
inline std::vector<double> render(const RoomWorldState& s, const EnvConfig& cfg) {
  const std::size_t n = cfg.render_size;
  const double px = 1.0 / static_cast<double>(n);
  const double shade = kAgentShades[s.agent_color_idx % kAgentShades.size()];
  std::vector<double> img(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double y = 1.0 - (static_cast<double>(i) + 0.5) * px;
    for (std::size_t j = 0; j < n; ++j) {
      const double x = (static_cast<double>(j) + 0.5) * px;
      double v = 0.0;
      if (std::abs(x - cfg.wall_x) < cfg.wall_half_thickness &&
          std::abs(y - cfg.door_center_y) > cfg.door_half_width) {
        v = 1.0;
      }
      const double d = std::hypot(x - s.agent.x, y - s.agent.y);
      const double alpha = std::clamp((cfg.dot_radius - d) / px + 0.5, 0.0, 1.0);
      if (alpha > 0.0) v = v * (1.0 - alpha) + shade * alpha;
      img[i * n + j] = v;
    }
  }
  return img;
}

inline std::vector<std::uint8_t> quantize_frame(const std::vector<double>& img) {
  std::vector<std::uint8_t> out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img[i], 0.0, 1.0) * 255.0));
  }
  return out;
}

inline std::vector<std::uint8_t> render_u8(const RoomWorldState& s, const EnvConfig& cfg) {
  return quantize_frame(render(s, cfg));
}

/// Uniform valid position inside the given room (-1 left, +1 right).
inline Vec2 sample_position(int room, const EnvConfig& cfg, Rng& rng) {
  const double r = cfg.agent_radius;
  const double lo = room < 0 ? r : cfg.slab_hi();
  const double hi = room < 0 ? cfg.slab_lo() : 1.0 - r;
  return {rng.uniform(lo, hi), rng.uniform(r, 1.0 - r)};
}

/// Uniform valid position anywhere (rejection sampling over the square).
inline Vec2 sample_any_position(const EnvConfig& cfg, Rng& rng) {
  const double r = cfg.agent_radius;
  for (;;) {
    Vec2 p{rng.uniform(r, 1.0 - r), rng.uniform(r, 1.0 - r)};
    if (is_valid_position(p, cfg)) return p;
  }
}

inline bool reached_goal(const RoomWorldState& s, const EnvConfig& cfg) {
  return distance(s.agent, s.goal) <= cfg.success_radius;
}

/// Noise-free heuristic: head for the door while in the other room (for the
/// exit on the goal side once inside the doorway), then for the goal. The
/// displacement is capped at max_step in norm.
inline Vec2 heuristic_direction(const RoomWorldState& s, const EnvConfig& cfg) {
  Vec2 target = s.goal;
  const int goal_room = room_of(s.goal.x, cfg);
  const bool in_slab = s.agent.x > cfg.slab_lo() && s.agent.x < cfg.slab_hi();
  if (in_slab) {
    target = {goal_room < 0 ? cfg.slab_lo() - 1e-3 : cfg.slab_hi() + 1e-3, cfg.door_center_y};
  } else if (room_of(s.agent.x, cfg) != goal_room) {
    target = {cfg.wall_x, cfg.door_center_y};
  }
  Vec2 d{target.x - s.agent.x, target.y - s.agent.y};
  const double n = std::hypot(d.x, d.y);
  if (n > cfg.max_step) {
    d.x *= cfg.max_step / n;
    d.y *= cfg.max_step / n;
  }
  return d;
}

/// Heuristic plus Gaussian noise of std noise_scale * max_step, clipped.
inline Vec2 heuristic_policy(const RoomWorldState& s, const EnvConfig& cfg, Rng& rng) {
  Vec2 a = heuristic_direction(s, cfg);
  const double sd = cfg.noise_scale * cfg.max_step;
  a.x += sd * rng.normal();
  a.y += sd * rng.normal();
  return clip_action(a, cfg);
}

}  // namespace lewm
