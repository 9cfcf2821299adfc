#pragma once

// Desk-scale encoder / predictor pair. Both networks are fully connected and
// end in a projector: one affine layer followed by per-feature batch
// standardization with learned scale and shift (running statistics in eval).

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lewm/autograd.hpp"
#include "lewm/kv.hpp"
#include "lewm/rng.hpp"

namespace lewm {

enum class Mode { train, eval };

struct WorldModelConfig {
  std::size_t obs_height = 32;
  std::size_t obs_width = 32;
  std::size_t obs_channels = 1;
  std::size_t embed_dim = 32;
  std::vector<std::size_t> encoder_hidden{256, 256};
  std::vector<std::size_t> predictor_hidden{256, 256};
  std::size_t history_len = 1;
  std::size_t action_dim = 2;
  std::size_t frame_skip = 5;
  double norm_eps = 1e-8;
  double norm_momentum = 0.1;

  std::size_t obs_size() const { return obs_height * obs_width * obs_channels; }
  std::size_t block_dim() const { return action_dim * frame_skip; }

  void validate() const {
    if (embed_dim < 2) throw Error("WorldModelConfig: embed_dim must be >= 2");
    if (history_len < 1) throw Error("WorldModelConfig: history_len must be >= 1");
    if (frame_skip < 1) throw Error("WorldModelConfig: frame_skip must be >= 1");
    if (action_dim < 1) throw Error("WorldModelConfig: action_dim must be >= 1");
    if (obs_size() == 0) throw Error("WorldModelConfig: observation size must be > 0");
    if (!(norm_eps > 0.0)) throw Error("WorldModelConfig: norm_eps must be > 0");
    if (!(norm_momentum > 0.0 && norm_momentum <= 1.0)) throw Error("WorldModelConfig: norm_momentum must be in (0, 1]");
  }

  void write(KeyValues& kv, const std::string& p = "model.") const {
    kv.set_size(p + "obs_height", obs_height);
    kv.set_size(p + "obs_width", obs_width);
    kv.set_size(p + "obs_channels", obs_channels);
    kv.set_size(p + "embed_dim", embed_dim);
    kv.set(p + "encoder_hidden", format_sizes(encoder_hidden));
    kv.set(p + "predictor_hidden", format_sizes(predictor_hidden));
    kv.set_size(p + "history_len", history_len);
    kv.set_size(p + "action_dim", action_dim);
    kv.set_size(p + "frame_skip", frame_skip);
    kv.set(p + "norm_eps", norm_eps);
    kv.set(p + "norm_momentum", norm_momentum);
  }

  void read(const KeyValues& kv, const std::string& p = "model.") {
    kv.read_size(p + "obs_height", obs_height);
    kv.read_size(p + "obs_width", obs_width);
    kv.read_size(p + "obs_channels", obs_channels);
    kv.read_size(p + "embed_dim", embed_dim);
    kv.read(p + "encoder_hidden", encoder_hidden);
    kv.read(p + "predictor_hidden", predictor_hidden);
    kv.read_size(p + "history_len", history_len);
    kv.read_size(p + "action_dim", action_dim);
    kv.read_size(p + "frame_skip", frame_skip);
    kv.read(p + "norm_eps", norm_eps);
    kv.read(p + "norm_momentum", norm_momentum);
  }

  friend bool operator==(const WorldModelConfig&, const WorldModelConfig&) = default;
};

namespace nn {

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias.
inline void add_linear(ParameterSet& ps, Rng& rng, const std::string& name, std::size_t in, std::size_t out) {
  Array w = Array::matrix(in, out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (double& v : w.storage()) v = rng.uniform(-bound, bound);
  ps.add(name + ".weight", std::move(w));
  ps.add(name + ".bias", Array::matrix(1, out));
}

inline Var linear(Graph& g, ParameterSet& ps, const std::string& name, Var x) {
  return add_row(matmul(x, g.parameter(ps.at(name + ".weight"))), g.parameter(ps.at(name + ".bias")));
}

inline void add_projector(ParameterSet& ps, Rng& rng, const std::string& name, std::size_t dim) {
  add_linear(ps, rng, name, dim, dim);
  ps.add(name + ".scale", Array::matrix(1, dim, 1.0));
  ps.add(name + ".shift", Array::matrix(1, dim, 0.0));
  ps.add(name + ".running_mean", Array::matrix(1, dim, 0.0), false);
  ps.add(name + ".running_var", Array::matrix(1, dim, 1.0), false);
}

/// Affine layer then batch standardization. In train mode the batch
/// statistics are used (and optionally folded into the running estimates);
/// in eval mode the running estimates are used.
inline Var projector(Graph& g, ParameterSet& ps, const std::string& name, Var x, Mode mode, double eps,
                     double momentum, bool update_stats) {
  Var y = linear(g, ps, name, x);
  Var normed;
  if (mode == Mode::train) {
    normed = batch_standardize(y, eps);
    if (update_stats) {
      const Array& v = y.value();
      const std::size_t n = v.rows(), d = v.cols();
      Array& rm = ps.at(name + ".running_mean").value;
      Array& rv = ps.at(name + ".running_var").value;
      for (std::size_t j = 0; j < d; ++j) {
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += v(i, j);
        mu /= static_cast<double>(n);
        double ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) ss += (v(i, j) - mu) * (v(i, j) - mu);
        const double unbiased = ss / static_cast<double>(n - 1);
        rm[j] = (1.0 - momentum) * rm[j] + momentum * mu;
        rv[j] = (1.0 - momentum) * rv[j] + momentum * unbiased;
      }
    }
  } else {
    const Array& rm = ps.at(name + ".running_mean").value;
    const Array& rv = ps.at(name + ".running_var").value;
    Array neg_mean = rm;
    Array inv_std = rv;
    for (double& v : neg_mean.storage()) v = -v;
    for (double& v : inv_std.storage()) v = 1.0 / std::sqrt(v + eps);
    normed = mul_row(add_row(y, g.constant(std::move(neg_mean))), g.constant(std::move(inv_std)));
  }
  return add_row(mul_row(normed, g.parameter(ps.at(name + ".scale"))), g.parameter(ps.at(name + ".shift")));
}

}  // namespace nn

/// Encoder, predictor and their projectors, plus the named parameters.
class WorldModel {
 public:
  WorldModel() = default;

  WorldModel(WorldModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    std::size_t in = cfg_.obs_size();
    for (std::size_t i = 0; i < cfg_.encoder_hidden.size(); ++i) {
      nn::add_linear(params_, rng, "encoder.l" + std::to_string(i), in, cfg_.encoder_hidden[i]);
      in = cfg_.encoder_hidden[i];
    }
    nn::add_linear(params_, rng, "encoder.out", in, cfg_.embed_dim);
    nn::add_projector(params_, rng, "encoder.proj", cfg_.embed_dim);

    // First predictor layer split into latent and action blocks; the action
    // block starts at zero so conditioning is switched on by training.
    const std::size_t zin = cfg_.history_len * cfg_.embed_dim;
    const std::size_t first = cfg_.predictor_hidden.empty() ? cfg_.embed_dim : cfg_.predictor_hidden[0];
    Array wz = Array::matrix(zin, first);
    const double bound = 1.0 / std::sqrt(static_cast<double>(zin + cfg_.block_dim()));
    for (double& v : wz.storage()) v = rng.uniform(-bound, bound);
    params_.add("predictor.in.weight_z", std::move(wz));
    params_.add("predictor.in.weight_a", Array::matrix(cfg_.block_dim(), first));
    params_.add("predictor.in.bias", Array::matrix(1, first));
    in = first;
    for (std::size_t i = 1; i < cfg_.predictor_hidden.size(); ++i) {
      nn::add_linear(params_, rng, "predictor.l" + std::to_string(i), in, cfg_.predictor_hidden[i]);
      in = cfg_.predictor_hidden[i];
    }
    if (!cfg_.predictor_hidden.empty()) nn::add_linear(params_, rng, "predictor.out", in, cfg_.embed_dim);
    nn::add_projector(params_, rng, "predictor.proj", cfg_.embed_dim);
  }

  WorldModel(WorldModelConfig cfg, ParameterSet params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
  }

  const WorldModelConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// obs: n x obs_size pixels in [0, 1] -> n x embed_dim.
  Var encode(Graph& g, Var obs, Mode mode, bool update_stats = true) {
    if (obs.value().rank() != 2 || obs.cols() != cfg_.obs_size()) {
      throw ShapeError("encode: observation batch " + shape_str(obs.value().shape()) + " does not match " +
                       std::to_string(cfg_.obs_size()) + " pixels per frame");
    }
    Var h = obs;
    for (std::size_t i = 0; i < cfg_.encoder_hidden.size(); ++i) {
      h = silu(nn::linear(g, params_, "encoder.l" + std::to_string(i), h));
    }
    h = nn::linear(g, params_, "encoder.out", h);
    return nn::projector(g, params_, "encoder.proj", h, mode, cfg_.norm_eps, cfg_.norm_momentum, update_stats);
  }

  /// history: history_len matrices (n x embed_dim), oldest first;
  /// actions: n x block_dim normalized action blocks -> n x embed_dim.
  Var predict(Graph& g, const std::vector<Var>& history, Var actions, Mode mode, bool update_stats = true) {
    if (history.size() != cfg_.history_len) {
      throw ShapeError("predict: history length " + std::to_string(history.size()) + " != configured " +
                       std::to_string(cfg_.history_len));
    }
    if (actions.cols() != cfg_.block_dim()) {
      throw ShapeError("predict: action block width " + std::to_string(actions.cols()) + " != " +
                       std::to_string(cfg_.block_dim()));
    }
    for (const Var& z : history) {
      if (z.cols() != cfg_.embed_dim || z.rows() != actions.rows()) {
        throw ShapeError("predict: latent " + shape_str(z.value().shape()) + " vs actions " +
                         shape_str(actions.value().shape()));
      }
    }
    Var zin = history.size() == 1 ? history[0] : concat_cols(history);
    Var h = add_row(add(matmul(zin, g.parameter(params_.at("predictor.in.weight_z"))),
                        matmul(actions, g.parameter(params_.at("predictor.in.weight_a")))),
                    g.parameter(params_.at("predictor.in.bias")));
    if (!cfg_.predictor_hidden.empty()) {
      h = silu(h);
      for (std::size_t i = 1; i < cfg_.predictor_hidden.size(); ++i) {
        h = silu(nn::linear(g, params_, "predictor.l" + std::to_string(i), h));
      }
      h = nn::linear(g, params_, "predictor.out", h);
    }
    return nn::projector(g, params_, "predictor.proj", h, mode, cfg_.norm_eps, cfg_.norm_momentum, update_stats);
  }

  // Value-level conveniences (eval mode, no gradient bookkeeping needed).

  Array encode(const Array& obs, Mode mode = Mode::eval) {
    Graph g;
    return encode(g, g.constant(obs), mode).value();
  }

  Array predict(const std::vector<Array>& history, const Array& actions, Mode mode = Mode::eval) {
    Graph g;
    std::vector<Var> h;
    for (const auto& z : history) h.push_back(g.constant(z));
    return predict(g, h, g.constant(actions), mode).value();
  }

  /// Autoregressive eval-mode rollout. z_history holds history_len latent
  /// batches (oldest first); returns one predicted batch per action block.
  std::vector<Array> rollout(std::vector<Array> z_history, const std::vector<Array>& action_blocks) {
    if (action_blocks.empty()) throw Error("rollout: horizon must be >= 1");
    std::vector<Array> out;
    out.reserve(action_blocks.size());
    for (const Array& a : action_blocks) {
      Array next = predict(z_history, a, Mode::eval);
      z_history.erase(z_history.begin());
      z_history.push_back(next);
      out.push_back(std::move(next));
    }
    return out;
  }

 private:
  WorldModelConfig cfg_;
  ParameterSet params_;
};

}  // namespace lewm
