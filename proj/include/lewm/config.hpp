#pragma once

// Every setting of a run in one flat "section.key = value" text file.
// Keys absent from a file keep their defaults; unknown keys are rejected.

#include <fstream>
#include <sstream>
#include <string>

#include "lewm/env.hpp"
#include "lewm/eval.hpp"
#include "lewm/kv.hpp"
#include "lewm/losses.hpp"
#include "lewm/planner.hpp"
#include "lewm/sigreg.hpp"
#include "lewm/train.hpp"
#include "lewm/worldmodel.hpp"

namespace lewm {

struct DataConfig {
  std::size_t n_episodes = 2000;
  std::size_t max_len = 300;  // low-level steps per episode

  void write(KeyValues& kv, const std::string& p = "data.") const {
    kv.set_size(p + "n_episodes", n_episodes);
    kv.set_size(p + "max_len", max_len);
  }
  void read(const KeyValues& kv, const std::string& p = "data.") {
    kv.read_size(p + "n_episodes", n_episodes);
    kv.read_size(p + "max_len", max_len);
  }
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct ProbeConfig {
  ProbeOptions options;
  std::size_t max_frames = 4000;

  void write(KeyValues& kv, const std::string& p = "probe.") const {
    kv.set(p + "ridge", options.ridge);
    kv.set_size(p + "hidden", options.hidden);
    kv.set_size(p + "train_steps", options.train_steps);
    kv.set(p + "learning_rate", options.learning_rate);
    kv.set(p + "test_fraction", options.test_fraction);
    kv.set_size(p + "max_frames", max_frames);
  }
  void read(const KeyValues& kv, const std::string& p = "probe.") {
    kv.read(p + "ridge", options.ridge);
    kv.read_size(p + "hidden", options.hidden);
    kv.read_size(p + "train_steps", options.train_steps);
    kv.read(p + "learning_rate", options.learning_rate);
    kv.read(p + "test_fraction", options.test_fraction);
    kv.read_size(p + "max_frames", max_frames);
  }
  bool operator==(const ProbeConfig& o) const {
    return options.ridge == o.options.ridge && options.hidden == o.options.hidden &&
           options.train_steps == o.options.train_steps && options.learning_rate == o.options.learning_rate &&
           options.test_fraction == o.options.test_fraction && max_frames == o.max_frames;
  }
};

// Stream ids for seeds derived from the run seed.
enum SeedStream : std::uint64_t {
  kSeedData = 1,
  kSeedModel = 2,
  kSeedTrain = 3,
  kSeedControl = 4,
  kSeedVoe = 5,
  kSeedProbe = 6,
};

struct RunConfig {
  std::uint64_t seed = 0;
  EnvConfig env;
  DataConfig data;
  WorldModelConfig model;
  TrainConfig train;
  EppsPulleyConfig sigreg;
  PldmCoefficients pldm;
  CemConfig cem;
  ControlProtocol control;
  VoeConfig voe;
  ProbeConfig probe;
  std::size_t straighten_trajectories = 64;

  std::uint64_t stream_seed(SeedStream s) const { return derive_seed(seed, s); }

  /// Train config with its seed filled in from the run seed.
  TrainConfig resolved_train() const {
    TrainConfig t = train;
    t.seed = stream_seed(kSeedTrain);
    return t;
  }

  void validate() const {
    env.validate();
    model.validate();
    train.validate();
    sigreg.validate();
    pldm.validate();
    cem.validate();
    if (model.obs_height != env.render_size || model.obs_width != env.render_size || model.obs_channels != 1) {
      throw Error("config: model observation " + std::to_string(model.obs_height) + "x" +
                  std::to_string(model.obs_width) + "x" + std::to_string(model.obs_channels) +
                  " does not match the env's " + std::to_string(env.render_size) + "x" +
                  std::to_string(env.render_size) + " grayscale frames");
    }
    if (model.frame_skip != env.frame_skip) throw Error("config: model.frame_skip differs from env.frame_skip");
    if (model.action_dim != 2) throw Error("config: model.action_dim must be 2 for the built-in env");
    if (control.exec_blocks == 0 || control.exec_blocks > cem.horizon) {
      throw Error("config: control.exec_blocks must be in [1, cem.horizon]");
    }
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("run.seed", seed);
    env.write(kv);
    data.write(kv);
    model.write(kv);
    train.write(kv);
    sigreg.write(kv);
    pldm.write(kv);
    cem.write(kv);
    control.write(kv);
    voe.write(kv);
    probe.write(kv);
    kv.set_size("eval.straighten_trajectories", straighten_trajectories);
    return kv;
  }

  std::string serialize() const { return to_kv().serialize(); }

  static RunConfig parse(std::string_view text) {
    const KeyValues kv = KeyValues::parse(text);
    RunConfig c;
    kv.read("run.seed", c.seed);
    c.env.read(kv);
    c.data.read(kv);
    c.model.read(kv);
    c.train.read(kv);
    c.sigreg.read(kv);
    c.pldm.read(kv);
    c.cem.read(kv);
    c.control.read(kv);
    c.voe.read(kv);
    c.probe.read(kv);
    kv.read_size("eval.straighten_trajectories", c.straighten_trajectories);
    kv.require_all_consumed();
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f << serialize();
    if (!f) throw Error("write to '" + path + "' failed");
  }

  bool operator==(const RunConfig& o) const { return serialize() == o.serialize(); }
};

}  // namespace lewm
