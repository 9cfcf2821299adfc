#pragma once

// Mini-batch training on fixed-length windows cut from dataset trajectories.
// One epoch visits every window once in a seeded order; the trailing partial
// batch is dropped.

#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "lewm/dataset.hpp"
#include "lewm/losses.hpp"
#include "lewm/optimizer.hpp"
#include "lewm/sigreg.hpp"
#include "lewm/worldmodel.hpp"

namespace lewm {

enum class LossKind { lewm, pldm };

inline const char* to_string(LossKind k) { return k == LossKind::lewm ? "lewm" : "pldm"; }

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "lewm") return LossKind::lewm;
  if (s == "pldm") return LossKind::pldm;
  throw Error("unknown loss '" + s + "' (expected lewm or pldm)");
}

struct TrainConfig {
  LossKind loss = LossKind::lewm;
  double lambda_loss = 0.1;
  std::size_t num_projections = 1024;
  std::size_t batch_size = 128;
  std::size_t sub_traj_len = 4;
  std::size_t epochs = 10;
  std::size_t max_steps = 0;  // 0: no cap beyond the epoch count
  double learning_rate = 1e-3;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t idm_hidden = 64;
  std::uint64_t seed = 0;  // filled from the run seed; not part of the text form

  void validate() const {
    if (!(lambda_loss >= 0.0)) throw Error("TrainConfig: lambda_loss must be >= 0");
    if (batch_size < 2) throw Error("TrainConfig: batch_size must be >= 2");
    if (sub_traj_len < 2) throw Error("TrainConfig: sub_traj_len must be >= 2");
    if (num_projections == 0) throw Error("TrainConfig: num_projections must be >= 1");
    if (!(learning_rate > 0.0)) throw Error("TrainConfig: learning_rate must be > 0");
  }

  void write(KeyValues& kv, const std::string& p = "train.") const {
    kv.set(p + "loss", to_string(loss));
    kv.set(p + "lambda", lambda_loss);
    kv.set_size(p + "num_projections", num_projections);
    kv.set_size(p + "batch_size", batch_size);
    kv.set_size(p + "sub_traj_len", sub_traj_len);
    kv.set_size(p + "epochs", epochs);
    kv.set_size(p + "max_steps", max_steps);
    kv.set(p + "learning_rate", learning_rate);
    kv.set_size(p + "checkpoint_every", checkpoint_every);
    kv.set_size(p + "idm_hidden", idm_hidden);
  }
  void read(const KeyValues& kv, const std::string& p = "train.") {
    if (auto* v = kv.find(p + "loss")) loss = parse_loss_kind(*v);
    kv.read(p + "lambda", lambda_loss);
    kv.read_size(p + "num_projections", num_projections);
    kv.read_size(p + "batch_size", batch_size);
    kv.read_size(p + "sub_traj_len", sub_traj_len);
    kv.read_size(p + "epochs", epochs);
    kv.read_size(p + "max_steps", max_steps);
    kv.read(p + "learning_rate", learning_rate);
    kv.read_size(p + "checkpoint_every", checkpoint_every);
    kv.read_size(p + "idm_hidden", idm_hidden);
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct Window {
  std::size_t trajectory = 0;
  std::size_t start = 0;
};

inline std::vector<Window> all_windows(const Dataset& data, std::size_t len) {
  std::vector<Window> w;
  for (std::size_t i = 0; i < data.trajectories.size(); ++i) {
    const std::size_t T = data.trajectories[i].length();
    for (std::size_t s = 0; s + len <= T; ++s) w.push_back({i, s});
  }
  return w;
}

/// Observations (steps*B x pixels) and normalized action blocks
/// ((steps-1)*B x block) for a batch of windows, time-major.
struct WindowBatch {
  Array obs;
  Array actions;
  std::size_t steps = 0;
  std::size_t batch = 0;
};

inline WindowBatch gather_windows(const Dataset& data, const std::vector<Window>& windows, std::size_t len) {
  const EnvConfig& env = data.config;
  const std::size_t B = windows.size(), px = frame_pixels(env), bw = block_width(env);
  WindowBatch wb{Array::matrix(len * B, px), Array::matrix((len - 1) * B, bw), len, B};
  for (std::size_t i = 0; i < B; ++i) {
    const Trajectory& tr = data.trajectories[windows[i].trajectory];
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t f = windows[i].start + t;
      double* dst = wb.obs.storage().data() + (t * B + i) * px;
      for (std::size_t k = 0; k < px; ++k) dst[k] = tr.frames[f * px + k] / 255.0;
      if (t + 1 < len) {
        double* a = wb.actions.storage().data() + (t * B + i) * bw;
        for (std::size_t k = 0; k < bw; ++k) a[k] = tr.action_blocks[f * bw + k] / env.max_step;
      }
    }
  }
  return wb;
}

struct LossRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double total = 0.0;
  std::vector<double> components;
};

inline std::vector<std::string> loss_columns(LossKind k) {
  if (k == LossKind::lewm) return {"pred", "sigreg"};
  return pldm_component_names();
}

inline void write_log_header(std::ostream& os, LossKind k) {
  os << "step,epoch,total";
  for (const auto& c : loss_columns(k)) os << ',' << c;
  os << '\n';
}

inline void write_log_row(std::ostream& os, const LossRow& r) {
  os << r.step << ',' << r.epoch << ',' << format_double(r.total);
  for (double v : r.components) os << ',' << format_double(v);
  os << '\n';
}

/// Owns the optimizer state; one call to step() is one parameter update.
class Trainer {
 public:
  Trainer(WorldModel& model, const Dataset& data, TrainConfig cfg, EppsPulleyConfig ep = {},
          PldmCoefficients pldm = {})
      : model_(model), data_(data), cfg_(std::move(cfg)), ep_(ep), pldm_(pldm),
        adam_(AdamConfig{cfg_.learning_rate}), idm_adam_(AdamConfig{cfg_.learning_rate}) {
    cfg_.validate();
    ep_.validate();
    const auto& mc = model_.config();
    if (mc.obs_size() != frame_pixels(data_.config) || mc.frame_skip != data_.config.frame_skip ||
        mc.action_dim != 2) {
      throw Error("Trainer: model expects " + std::to_string(mc.obs_size()) + " pixels and frame_skip " +
                  std::to_string(mc.frame_skip) + ", dataset has " + std::to_string(frame_pixels(data_.config)) +
                  " and " + std::to_string(data_.config.frame_skip));
    }
    if (cfg_.sub_traj_len <= mc.history_len) {
      throw Error("Trainer: sub_traj_len must exceed history_len");
    }
    windows_ = all_windows(data_, cfg_.sub_traj_len);
    if (windows_.size() < cfg_.batch_size) {
      throw Error("Trainer: dataset yields " + std::to_string(windows_.size()) + " windows, fewer than one batch of " +
                  std::to_string(cfg_.batch_size));
    }
    if (cfg_.loss == LossKind::pldm && pldm_.mu > 0.0) {
      idm_ = InverseDynamics(mc.embed_dim, mc.block_dim(), cfg_.idm_hidden, derive_seed(cfg_.seed, 7));
    }
  }

  std::size_t steps_per_epoch() const { return windows_.size() / cfg_.batch_size; }

  std::size_t total_steps() const {
    const std::size_t n = cfg_.epochs * steps_per_epoch();
    return cfg_.max_steps > 0 ? std::min(n, cfg_.max_steps) : n;
  }

  std::size_t steps_done() const { return step_; }
  const TrainConfig& config() const { return cfg_; }

  /// Loss on one batch of windows with gradients applied.
  LossRow step() {
    const std::size_t spe = steps_per_epoch();
    const std::size_t epoch = step_ / spe, in_epoch = step_ % spe;
    if (in_epoch == 0 || order_epoch_ != epoch) shuffle(epoch);
    std::vector<Window> batch(order_.begin() + static_cast<std::ptrdiff_t>(in_epoch * cfg_.batch_size),
                              order_.begin() + static_cast<std::ptrdiff_t>((in_epoch + 1) * cfg_.batch_size));
    const WindowBatch wb = gather_windows(data_, batch, cfg_.sub_traj_len);

    Graph g;
    const auto& mc = model_.config();
    const std::size_t B = wb.batch, L = wb.steps, H = mc.history_len;
    EmbeddingBatch eb;
    eb.Z = model_.encode(g, g.constant(wb.obs), Mode::train);
    eb.steps = L;
    eb.batch = B;
    eb.history = H;
    std::vector<Var> hist;
    for (std::size_t h = 0; h < H; ++h) hist.push_back(slice_rows(eb.Z, h * B, (L - H) * B));
    Var acts = g.constant(wb.actions);
    eb.Z_pred = model_.predict(g, hist, slice_rows(acts, (H - 1) * B, (L - H) * B), Mode::train);

    LossTerms terms;
    if (cfg_.loss == LossKind::lewm) {
      const auto U = directions_for_step(cfg_.num_projections, mc.embed_dim, derive_seed(cfg_.seed, 3), step_);
      terms = lewm_loss(eb, U, ep_, cfg_.lambda_loss);
    } else {
      terms = pldm_loss(eb, &acts, idm_ ? &*idm_ : nullptr, pldm_);
    }
    g.backward(terms.total);
    adam_.step(model_.params());
    if (idm_) idm_adam_.step(idm_->params());

    LossRow row{step_, epoch, terms.total.value().item(), {}};
    for (const auto& [name, v] : terms.components) row.components.push_back(v.value().item());
    ++step_;
    return row;
  }

 private:
  void shuffle(std::size_t epoch) {
    order_ = windows_;
    Rng rng(derive_seed(cfg_.seed, 1000 + epoch));
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.index(i)]);
    order_epoch_ = epoch;
  }

  WorldModel& model_;
  const Dataset& data_;
  TrainConfig cfg_;
  EppsPulleyConfig ep_;
  PldmCoefficients pldm_;
  Adam adam_;
  Adam idm_adam_;
  std::optional<InverseDynamics> idm_;
  std::vector<Window> windows_;
  std::vector<Window> order_;
  std::size_t order_epoch_ = static_cast<std::size_t>(-1);
  std::size_t step_ = 0;
};

using StepCallback = std::function<void(const LossRow&)>;

/// Runs every configured step; the callback sees each logged row.
inline std::vector<LossRow> train(WorldModel& model, const Dataset& data, const TrainConfig& cfg,
                                  const EppsPulleyConfig& ep = {}, const PldmCoefficients& pldm = {},
                                  const StepCallback& on_step = {}) {
  Trainer t(model, data, cfg, ep, pldm);
  std::vector<LossRow> log;
  const std::size_t n = t.total_steps();
  log.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    log.push_back(t.step());
    if (on_step) on_step(log.back());
  }
  return log;
}

}  // namespace lewm
