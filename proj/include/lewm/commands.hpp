#pragma once

// The operations behind the command-line tool. Each writes its artifacts
// plus the resolved config into the output location and throws on failure;
// UsageError marks bad invocations (exit code 1), anything else is a runtime
// failure (exit code 2).

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "lewm/checkpoint.hpp"
#include "lewm/config.hpp"
#include "lewm/dataset.hpp"
#include "lewm/eval.hpp"
#include "lewm/planner.hpp"
#include "lewm/train.hpp"

namespace lewm {

class UsageError : public Error {
 public:
  using Error::Error;
};

namespace fs = std::filesystem;

namespace detail {

inline std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  return f;
}

inline void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory '" + dir.string() + "': " + ec.message());
}

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// Timestamps live only in this sidecar so every other artifact is a pure
// function of (config, seed).
class RunInfo {
 public:
  RunInfo(fs::path dir, std::string command) : dir_(std::move(dir)), command_(std::move(command)) {
    started_ = utc_now();
    t0_ = std::chrono::steady_clock::now();
  }
  void finish() const {
    auto f = open_out(dir_ / "run_info.txt");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    f << "command = " << command_ << "\nstarted = " << started_ << "\nfinished = " << utc_now()
      << "\nwall_seconds = " << format_double(secs) << "\n";
  }

 private:
  fs::path dir_;
  std::string command_;
  std::string started_;
  std::chrono::steady_clock::time_point t0_;
};

inline Dataset load_matching_dataset(const RunConfig& cfg, const std::string& path) {
  Dataset ds = load_dataset(path);
  if (!(ds.config == cfg.env)) {
    KeyValues a, b;
    ds.config.write(a);
    cfg.env.write(b);
    throw Error("dataset '" + path + "' was generated with a different env config:\n" + a.serialize() +
                "configured:\n" + b.serialize());
  }
  return ds;
}

inline WorldModel load_matching_model(const RunConfig& cfg, const std::string& path) {
  WorldModel m = load_checkpoint(path);
  const auto& mc = m.config();
  if (mc.obs_size() != frame_pixels(cfg.env) || mc.frame_skip != cfg.env.frame_skip) {
    throw Error("checkpoint '" + path + "' does not match the configured env (observation size or frame_skip)");
  }
  return m;
}

inline std::string checkpoint_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%08zu.ckpt", step);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline Dataset cmd_generate(const RunConfig& cfg, const std::string& out_path) {
  cfg.validate();
  if (cfg.data.n_episodes == 0) throw UsageError("generate: --episodes must be >= 1");
  Dataset ds = generate_dataset(cfg.env, cfg.data.n_episodes, cfg.data.max_len, cfg.stream_seed(kSeedData));
  const fs::path p(out_path);
  if (p.has_parent_path()) detail::make_dir(p.parent_path());
  save_dataset(ds, out_path);
  return ds;
}

struct TrainSummary {
  std::size_t steps = 0;
  LossRow last;
  std::vector<StraighteningRow> straightening;
};

/// Trains from a fresh model. out_dir receives config.txt, train_log.csv,
/// checkpoints/step_N.ckpt, model.ckpt, straightening.csv and run_info.txt.
inline TrainSummary cmd_train(const RunConfig& cfg, const std::string& dataset_path, const std::string& out_dir,
                              std::ostream* progress = nullptr) {
  cfg.validate();
  const Dataset data = detail::load_matching_dataset(cfg, dataset_path);
  const fs::path dir(out_dir);
  detail::make_dir(dir / "checkpoints");
  detail::RunInfo info(dir, "train");
  cfg.save((dir / "config.txt").string());

  WorldModel model(cfg.model, cfg.stream_seed(kSeedModel));
  const TrainConfig tc = cfg.resolved_train();
  Trainer trainer(model, data, tc, cfg.sigreg, cfg.pldm);
  const std::size_t n = trainer.total_steps();
  if (n == 0) throw UsageError("train: the configuration yields zero training steps");

  auto log = detail::open_out(dir / "train_log.csv");
  write_log_header(log, tc.loss);
  TrainSummary summary;
  auto snapshot = [&](std::size_t step) {
    save_checkpoint(model, (dir / "checkpoints" / detail::checkpoint_name(step)).string());
    const auto seqs = latent_sequences(model, data, cfg.straighten_trajectories);
    summary.straightening.push_back({step, straightening(seqs)});
  };
  snapshot(0);
  for (std::size_t s = 0; s < n; ++s) {
    summary.last = trainer.step();
    write_log_row(log, summary.last);
    const std::size_t done = s + 1;
    if ((tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0) || done == n) snapshot(done);
    if (progress && (done % 100 == 0 || done == n)) {
      *progress << "step " << done << "/" << n << " total " << format_double(summary.last.total) << "\n";
    }
  }
  summary.steps = n;
  save_checkpoint(model, (dir / "model.ckpt").string());
  auto sf = detail::open_out(dir / "straightening.csv");
  write_straightening_csv(sf, summary.straightening);
  info.finish();
  return summary;
}

/// Control evaluation; out_dir receives config.txt, control.csv,
/// control_summary.csv and, when verbose, one plan trace per planning call.
inline ControlReport cmd_plan_eval(const RunConfig& cfg, const std::string& checkpoint,
                                   const std::string& dataset_path, const std::string& out_dir, bool verbose = false) {
  cfg.validate();
  WorldModel model = detail::load_matching_model(cfg, checkpoint);
  const Dataset data = detail::load_matching_dataset(cfg, dataset_path);
  const fs::path dir(out_dir);
  detail::make_dir(dir);
  detail::RunInfo info(dir, "plan-eval");
  cfg.save((dir / "config.txt").string());
  EpisodePlanObserver observer;
  if (verbose) {
    detail::make_dir(dir / "plans");
    observer = [&dir](std::size_t e, std::size_t k, const PlanResult& r) {
      auto f = detail::open_out(dir / "plans" / ("episode_" + std::to_string(e) + "_plan_" + std::to_string(k) + ".csv"));
      write_plan_trace(f, r);
    };
  }
  const ControlReport rep = evaluate_control(model, data, cfg.cem, cfg.control, cfg.stream_seed(kSeedControl), observer);
  auto f = detail::open_out(dir / "control.csv");
  write_control_csv(f, rep);
  auto s = detail::open_out(dir / "control_summary.csv");
  s << "episodes,successes,success_rate,standard_error\n"
    << rep.episodes.size() << ',' << rep.successes << ',' << format_double(rep.success_rate()) << ','
    << format_double(rep.standard_error()) << '\n';
  info.finish();
  return rep;
}

enum class Suite { probe, voe, straighten, stats };

inline Suite parse_suite(const std::string& s) {
  if (s == "probe") return Suite::probe;
  if (s == "voe") return Suite::voe;
  if (s == "straighten") return Suite::straighten;
  if (s == "stats") return Suite::stats;
  throw UsageError("unknown suite '" + s + "' (expected probe, voe, straighten or stats)");
}

/// Latent sequences stored as CSV rows "sequence,t,z0,z1,...", sorted by
/// sequence then t.
inline std::vector<Array> read_latent_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open latents '" + path + "'");
  std::string line;
  std::vector<std::vector<std::vector<double>>> seqs;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (trim(line).empty() || line.rfind("sequence", 0) == 0) continue;
    std::vector<double> vals;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) vals.push_back(parse_double(trim(cell), "latents"));
    if (vals.size() < 3) throw FormatError("latents line " + std::to_string(line_no) + ": expected sequence,t,z...");
    const auto s = static_cast<std::size_t>(vals[0]);
    if (s >= seqs.size()) seqs.resize(s + 1);
    seqs[s].emplace_back(vals.begin() + 2, vals.end());
  }
  std::vector<Array> out;
  for (const auto& rows : seqs) {
    if (rows.empty()) continue;
    Array z = Array::matrix(rows.size(), rows[0].size());
    for (std::size_t t = 0; t < rows.size(); ++t) {
      if (rows[t].size() != z.cols()) throw FormatError("latents: ragged rows in '" + path + "'");
      for (std::size_t j = 0; j < z.cols(); ++j) z(t, j) = rows[t][j];
    }
    out.push_back(std::move(z));
  }
  return out;
}

struct EvalRequest {
  Suite suite = Suite::probe;
  std::vector<std::string> checkpoints;  // straighten accepts several
  std::string dataset;
  std::string latents;        // straighten: stored sequences instead of checkpoints
  bool noise_targets = false;  // probe: replace positions by seeded noise
};

/// Writes <suite>.csv (plus surprise.csv for voe) into out_dir.
inline void cmd_eval(const RunConfig& cfg, const EvalRequest& req, const std::string& out_dir) {
  cfg.validate();
  const fs::path dir(out_dir);
  detail::make_dir(dir);
  detail::RunInfo info(dir, "eval");
  cfg.save((dir / "config.txt").string());

  if (req.suite == Suite::straighten) {
    std::vector<StraighteningRow> rows;
    if (!req.latents.empty()) {
      rows.push_back({0, straightening(read_latent_csv(req.latents))});
    } else {
      if (req.checkpoints.empty()) throw UsageError("eval straighten: give --latents or at least one --checkpoint");
      if (req.dataset.empty()) throw UsageError("eval straighten: --data is required with checkpoints");
      const Dataset data = detail::load_matching_dataset(cfg, req.dataset);
      for (std::size_t i = 0; i < req.checkpoints.size(); ++i) {
        WorldModel m = detail::load_matching_model(cfg, req.checkpoints[i]);
        std::size_t step = i;
        const std::string stem = fs::path(req.checkpoints[i]).stem().string();
        if (stem.rfind("step_", 0) == 0) step = static_cast<std::size_t>(parse_u64(stem.substr(5), "checkpoint step"));
        rows.push_back({step, straightening(latent_sequences(m, data, cfg.straighten_trajectories))});
      }
    }
    auto f = detail::open_out(dir / "straightening.csv");
    write_straightening_csv(f, rows);
    info.finish();
    return;
  }

  if (req.checkpoints.size() != 1) throw UsageError("eval: exactly one --checkpoint is required");
  if (req.dataset.empty()) throw UsageError("eval: --data is required");
  WorldModel model = detail::load_matching_model(cfg, req.checkpoints[0]);
  const Dataset data = detail::load_matching_dataset(cfg, req.dataset);

  switch (req.suite) {
    case Suite::probe: {
      FrameSample fsamp = embed_frames(model, data, cfg.probe.max_frames);
      std::string target = "agent_xy";
      if (req.noise_targets) {
        Rng rng(derive_seed(cfg.stream_seed(kSeedProbe), 99));
        for (double& v : fsamp.positions.storage()) v = rng.normal();
        target = "noise";
      }
      const std::uint64_t split = cfg.stream_seed(kSeedProbe);
      std::vector<ProbeResult> rows{
          fit_probe(fsamp.embeddings, fsamp.positions, ProbeKind::linear, split, target, cfg.probe.options).result,
          fit_probe(fsamp.embeddings, fsamp.positions, ProbeKind::nonlinear, split, target, cfg.probe.options).result};
      auto f = detail::open_out(dir / "probe.csv");
      write_probe_csv(f, rows);
      break;
    }
    case Suite::voe: {
      const VoeReport rep = voe_test(model, data, cfg.voe, cfg.stream_seed(kSeedVoe));
      auto f = detail::open_out(dir / "voe.csv");
      write_voe_csv(f, rep);
      auto s = detail::open_out(dir / "surprise.csv");
      write_surprise_csv(s, rep);
      break;
    }
    case Suite::stats: {
      const FrameSample fsamp = embed_frames(model, data, cfg.probe.max_frames);
      auto f = detail::open_out(dir / "stats.csv");
      write_stats_csv(f, embedding_stats(fsamp.embeddings));
      break;
    }
    case Suite::straighten:
      break;
  }
  info.finish();
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { lambda, projections, knots, embed_dim };

inline SweepAxis parse_axis(const std::string& s) {
  if (s == "lambda") return SweepAxis::lambda;
  if (s == "projections") return SweepAxis::projections;
  if (s == "knots") return SweepAxis::knots;
  if (s == "embed_dim") return SweepAxis::embed_dim;
  throw UsageError("unknown sweep axis '" + s + "' (expected lambda, projections, knots or embed_dim)");
}

inline RunConfig apply_axis(RunConfig cfg, SweepAxis axis, const std::string& value) {
  switch (axis) {
    case SweepAxis::lambda: cfg.train.lambda_loss = parse_double(value, "lambda"); break;
    case SweepAxis::projections: cfg.train.num_projections = parse_u64(value, "projections"); break;
    case SweepAxis::knots: cfg.sigreg.knot_count = parse_u64(value, "knots"); break;
    case SweepAxis::embed_dim: cfg.model.embed_dim = parse_u64(value, "embed_dim"); break;
  }
  return cfg;
}

struct SweepRow {
  std::string value;
  TrainSummary train;
  double final_total = 0.0;
  std::vector<double> final_components;  // mean over the last logged steps
  double mean_std = 0.0;
  double probe_r = 0.0;
  double success_rate = -1.0;  // -1 when control was not evaluated
};

/// Trains and evaluates one run per value under out_dir/<axis>_<value>/ and
/// writes out_dir/sweep.csv.
inline std::vector<SweepRow> cmd_sweep(const RunConfig& base, const std::string& axis_name,
                                       const std::vector<std::string>& values, const std::string& dataset_path,
                                       const std::string& out_dir, bool with_control = false,
                                       std::ostream* progress = nullptr) {
  const SweepAxis axis = parse_axis(axis_name);
  if (values.empty()) throw UsageError("sweep: --values must list at least one value");
  const fs::path dir(out_dir);
  detail::make_dir(dir);
  detail::RunInfo info(dir, "sweep " + axis_name);
  base.save((dir / "config.txt").string());
  std::vector<SweepRow> rows;
  for (const auto& v : values) {
    const RunConfig cfg = apply_axis(base, axis, v);
    const fs::path sub = dir / (axis_name + "_" + v);
    if (progress) *progress << "sweep " << axis_name << " = " << v << "\n";
    SweepRow row;
    row.value = v;
    row.train = cmd_train(cfg, dataset_path, sub.string(), progress);

    // Average the tail of the log to smooth per-step noise.
    std::ifstream lf(sub / "train_log.csv");
    std::string line;
    std::getline(lf, line);
    std::vector<std::vector<double>> tail;
    while (std::getline(lf, line)) {
      std::vector<double> vals;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) vals.push_back(parse_double(cell, "log"));
      tail.push_back(std::move(vals));
    }
    const std::size_t k = std::min<std::size_t>(10, tail.size());
    row.final_components.assign(tail.back().size() - 3, 0.0);
    for (std::size_t i = tail.size() - k; i < tail.size(); ++i) {
      row.final_total += tail[i][2] / static_cast<double>(k);
      for (std::size_t c = 3; c < tail[i].size(); ++c) row.final_components[c - 3] += tail[i][c] / static_cast<double>(k);
    }

    WorldModel model = load_checkpoint((sub / "model.ckpt").string());
    const Dataset data = detail::load_matching_dataset(cfg, dataset_path);
    const FrameSample fsamp = embed_frames(model, data, cfg.probe.max_frames);
    row.mean_std = embedding_stats(fsamp.embeddings).mean_std();
    row.probe_r = fit_probe(fsamp.embeddings, fsamp.positions, ProbeKind::linear, cfg.stream_seed(kSeedProbe),
                            "agent_xy", cfg.probe.options)
                      .result.pearson_r;
    if (with_control) {
      row.success_rate = evaluate_control(model, data, cfg.cem, cfg.control, cfg.stream_seed(kSeedControl)).success_rate();
    }
    rows.push_back(std::move(row));
  }
  auto f = detail::open_out(dir / "sweep.csv");
  f << "axis,value,steps,final_total";
  for (const auto& c : loss_columns(base.train.loss)) f << ",final_" << c;
  f << ",mean_std,probe_r,success_rate\n";
  for (const auto& r : rows) {
    f << axis_name << ',' << r.value << ',' << r.train.steps << ',' << format_double(r.final_total);
    for (double c : r.final_components) f << ',' << format_double(c);
    f << ',' << format_double(r.mean_std) << ',' << format_double(r.probe_r) << ',';
    if (r.success_rate >= 0.0) f << format_double(r.success_rate);
    f << '\n';
  }
  info.finish();
  return rows;
}

}  // namespace lewm
