#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "conbat/common/rng.hpp"
#include "conbat/model/model.hpp"

namespace conbat::check {

/// Parameters with every entry drawn from normal(0, stddev), so the network
/// is far from its near-linear initialization.
inline model::Params random_params(const model::ModelConfig& cfg, std::uint64_t seed, double stddev = 0.3) {
  auto p = model::init_params(cfg, seed);
  Rng rng(mix_seed(seed, 77));
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (auto& v : p.tensor(i).storage()) v = static_cast<float>(rng.normal() * stddev);
  }
  return p;
}

inline ad::Tensor<double> random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  ad::Tensor<double> t(ad::Shape{rows, cols});
  for (auto& v : t.storage()) v = rng.uniform(-1.0, 1.0);
  return t;
}

struct ForwardRows {
  std::vector<std::vector<double>> by_token;  // every output attached to a token position
};

/// All outputs of a full forward pass, grouped by the token position they
/// belong to: hidden rows, and per-step heads on the state or action token.
inline ForwardRows forward_rows(const model::ModelConfig& cfg, const model::ParamSet<double>& params,
                                const ad::Tensor<double>& obs, const ad::Tensor<double>& act) {
  ad::Tape<double> tape;
  model::Binder<double> b(tape, params);
  const auto e = model::encode(b, cfg, tape.constant(obs), tape.constant(act));
  const auto& hidden = tape.value(e.hidden);
  ForwardRows out;
  out.by_token.resize(hidden.rows());
  for (std::size_t r = 0; r < hidden.rows(); ++r) {
    for (std::size_t c = 0; c < hidden.cols(); ++c) out.by_token[r].push_back(hidden.at(r, c));
  }
  auto attach = [&](ad::Var v, std::size_t stride, std::size_t offset) {
    const auto& t = tape.value(v);
    for (std::size_t r = 0; r < t.rows(); ++r) {
      for (std::size_t c = 0; c < t.cols(); ++c) out.by_token[stride * r + offset].push_back(t.at(r, c));
    }
  };
  attach(model::policy_head(b, e.state_emb), 2, 0);
  attach(model::critic_head(b, cfg, e.state_emb), 2, 0);
  if (cfg.has_world()) attach(model::world_head(b, cfg, e.state_emb, e.action_emb), 2, 1);
  attach(model::future_critic_head(b, cfg, e.state_emb, e.action_emb, e.action_tokens), 2, 1);
  return out;
}

/// Largest change at any position before the perturbed token, over every
/// token position of a full window.
inline double max_causality_violation(const model::ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const auto params = random_params(cfg, seed).cast<double>();
  const auto obs = random_matrix(cfg.seq_len, cfg.obs_dim, rng);
  const auto act = random_matrix(cfg.seq_len, cfg.act_dim, rng);
  const auto base = forward_rows(cfg, params, obs, act);
  double worst = 0.0;
  for (std::size_t token = 0; token < 2 * cfg.seq_len; ++token) {
    auto o = obs;
    auto a = act;
    if (token % 2 == 0) {
      for (std::size_t c = 0; c < cfg.obs_dim; ++c) o.at(token / 2, c) += rng.uniform(0.5, 1.5);
    } else {
      for (std::size_t c = 0; c < cfg.act_dim; ++c) a.at(token / 2, c) += rng.uniform(0.5, 1.5);
    }
    const auto moved = forward_rows(cfg, params, o, a);
    for (std::size_t r = 0; r < token; ++r) {
      for (std::size_t c = 0; c < base.by_token[r].size(); ++c) {
        worst = std::max(worst, std::abs(base.by_token[r][c] - moved.by_token[r][c]));
      }
    }
  }
  return worst;
}

}  // namespace conbat::check
