#pragma once

#include <cstdint>

#include "conbat/common/rng.hpp"
#include "conbat/data/dataset.hpp"

namespace conbat::check {

inline data::Trajectory synthetic_trajectory(std::uint32_t id, std::size_t len, bool crashed, Rng& rng,
                                             std::size_t obs_dim = 2, std::size_t act_dim = 1) {
  data::Trajectory t;
  t.id = id;
  t.crashed = crashed;
  t.label = crashed ? data::Label::unsafe : data::Label::safe;
  for (std::size_t s = 0; s < len; ++s) {
    for (std::size_t d = 0; d < obs_dim; ++d) t.observations.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
    for (std::size_t d = 0; d < act_dim; ++d) t.actions.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
    t.positions.push_back(static_cast<float>(rng.uniform(0.0, 10.0)));
    t.positions.push_back(static_cast<float>(rng.uniform(0.0, 10.0)));
  }
  return t;
}

inline data::TrajectorySet synthetic_set(std::size_t n, std::size_t len, double unsafe_share, std::uint64_t seed,
                                         std::size_t obs_dim = 2, std::size_t act_dim = 1) {
  Rng rng(seed);
  data::TrajectorySet set;
  set.env = data::EnvKind::f110;
  set.source = "synthetic";
  set.obs_dim = obs_dim;
  set.act_dim = act_dim;
  set.seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    const bool crashed = rng.uniform() < unsafe_share;
    set.trajectories.push_back(synthetic_trajectory(static_cast<std::uint32_t>(i), len, crashed, rng, obs_dim, act_dim));
  }
  return set;
}

}  // namespace conbat::check
