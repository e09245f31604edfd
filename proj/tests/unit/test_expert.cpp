#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <tuple>

#include "conbat/common/error.hpp"
#include "conbat/common/rng.hpp"
#include "conbat/expert/expert.hpp"

namespace {

using namespace conbat;
using namespace conbat::expert;

sim::Track long_straight() {
  return sim::Track({{0, 0}, {200, 0}, {200, 20}, {0, 20}, {0, 0}}, 1.0);
}

struct Toy {
  double x = 0.0;
  double v = 0.0;
};

// Full enumeration of grid^h with the same ranking rule as the search.
SearchResult brute_force(const Toy& root, const std::vector<double>& grid, int horizon,
                         const std::vector<double>& bump) {
  SearchResult best;
  bool have = false;
  std::vector<std::size_t> seq(static_cast<std::size_t>(horizon), 0);
  const std::size_t total = static_cast<std::size_t>(std::pow(grid.size(), horizon));
  for (std::size_t code = 0; code < total; ++code) {
    std::size_t c = code;
    for (int d = horizon - 1; d >= 0; --d) {
      seq[static_cast<std::size_t>(d)] = c % grid.size();
      c /= grid.size();
    }
    Toy s = root;
    double cost = 0.0, viol = 0.0;
    for (int d = 0; d < horizon; ++d) {
      const double a = grid[seq[static_cast<std::size_t>(d)]];
      s.v += a;
      s.x += s.v;
      cost += std::abs(s.x - 1.0) + bump[seq[static_cast<std::size_t>(d)]];
      viol = std::max(viol, std::abs(s.x) - 2.0);
    }
    const bool safe = viol <= 0.0;
    SearchResult r{grid[seq[0]], seq[0], cost, std::max(viol, 0.0), safe};
    auto better = [&](const SearchResult& x, const SearchResult& y) {
      if (x.safe != y.safe) return x.safe;
      if (!x.safe && x.violation != y.violation) return x.violation < y.violation;
      if (x.cost != y.cost) return x.cost < y.cost;
      if (std::abs(x.action) != std::abs(y.action)) return std::abs(x.action) < std::abs(y.action);
      return x.action_index < y.action_index;
    };
    if (!have || better(r, best)) {
      best = r;
      have = true;
    }
  }
  return best;
}

TEST(TreeSearch, MatchesBruteForceOnToySystem) {
  const std::vector<double> grid{-0.3, 0.0, 0.3};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const Toy root{rng.uniform(-2.0, 2.0), rng.uniform(-0.5, 0.5)};
    std::vector<double> bump(grid.size());
    for (auto& b : bump) b = rng.uniform(0.0, 0.2);
    struct Node {
      Toy s;
      std::size_t last;
    };
    auto expand = [&](const Node& n, double a) {
      Node c = n;
      c.s.v += a;
      c.s.x += c.s.v;
      c.last = static_cast<std::size_t>(std::find(grid.begin(), grid.end(), a) - grid.begin());
      return c;
    };
    auto stage = [&](const Node& n) {
      return std::make_tuple(std::abs(n.s.x - 1.0) + bump[n.last], std::max(0.0, std::abs(n.s.x) - 2.0), false);
    };
    const auto got = tree_search(Node{root, 0}, std::span<const double>(grid), {3, 512}, expand, stage);
    const auto want = brute_force(root, grid, 3, bump);
    EXPECT_EQ(got.action_index, want.action_index) << "seed " << seed;
    EXPECT_NEAR(got.cost, want.cost, 1e-12);
    EXPECT_EQ(got.safe, want.safe);
  }
}

TEST(TreeSearch, ZeroCostTieBreaksToSmallestSteer) {
  const std::vector<double> grid{0.3, -0.3, 0.0, 0.1};
  auto expand = [](int s, double) { return s; };
  auto stage = [](int) { return std::make_tuple(0.0, 0.0, false); };
  const auto r = tree_search(0, std::span<const double>(grid), {3, 512}, expand, stage);
  EXPECT_EQ(r.action, 0.0);
  EXPECT_EQ(r.action_index, 2u);
}

TEST(TreeSearch, EqualMagnitudeTieGoesToLowerIndex) {
  const std::vector<double> grid{0.3, -0.3};
  auto expand = [](int s, double) { return s; };
  auto stage = [](int) { return std::make_tuple(1.0, 0.0, false); };
  EXPECT_EQ(tree_search(0, std::span<const double>(grid), {2, 512}, expand, stage).action_index, 0u);
}

TEST(TreeSearch, AllUnsafeReturnsMinViolation) {
  const std::vector<double> grid{-1.0, 0.0, 1.0};
  auto expand = [](double s, double a) { return s + a; };
  // Every state violates; violation shrinks as the state moves right.
  auto stage = [](double s) { return std::make_tuple(0.0, 10.0 - s, false); };
  const auto r = tree_search(0.0, std::span<const double>(grid), {3, 512}, expand, stage);
  EXPECT_FALSE(r.safe);
  EXPECT_EQ(r.action, 1.0);
  EXPECT_DOUBLE_EQ(r.violation, 9.0);
}

TEST(TreeSearch, EmptyGridThrows) {
  const std::vector<double> grid;
  auto expand = [](int s, double) { return s; };
  auto stage = [](int) { return std::make_tuple(0.0, 0.0, false); };
  EXPECT_THROW(tree_search(0, std::span<const double>(grid), {3, 512}, expand, stage), UsageError);
}

TEST(TreeSearch, BeamPruningKeepsBestBranchOnToySystem) {
  const std::vector<double> grid{-0.3, 0.0, 0.3};
  auto expand = [](double s, double a) { return s + a; };
  auto stage = [](double s) { return std::make_tuple(std::abs(s - 0.6), 0.0, false); };
  const auto full = tree_search(0.0, std::span<const double>(grid), {4, 512}, expand, stage);
  const auto pruned = tree_search(0.0, std::span<const double>(grid), {4, 4}, expand, stage);
  EXPECT_EQ(full.action, 0.3);
  EXPECT_EQ(pruned.action, 0.3);
}

TEST(PlanStepF1, StraightCorridorSteersStraight) {
  const auto track = long_straight();
  auto cfg = default_f1_expert();
  cfg.action_grid = {-0.3, 0.0, 0.3};
  cfg.horizon = 3;
  const sim::F1Params params;
  const auto state = sim::f1_place(track, 50.0, 0.0, 0.0);
  const auto r = plan_step_f1(track, params, state, 0.0, cfg);
  EXPECT_EQ(r.action, 0.0);
  EXPECT_TRUE(r.safe);

  // Oracle: roll all 27 sequences; only the all-zero sequence keeps the car
  // exactly on the centerline with full progress.
  double best_dev = 1e9;
  double best_first = 99.0;
  for (int code = 0; code < 27; ++code) {
    int c = code;
    auto s = state;
    double dev = 0.0;
    double first = 0.0;
    for (int d = 0; d < 3; ++d) {
      const double a = cfg.action_grid[static_cast<std::size_t>(c % 3)];
      c /= 3;
      if (d == 0) first = a;
      for (int k = 0; k < cfg.hold_steps; ++k) {
        const auto step = sim::f1_step(s, a, params, track);
        s = step.state;
        dev += std::abs(step.obs.lateral_offset) + std::abs(step.obs.rel_angle);
      }
    }
    if (dev < best_dev) {
      best_dev = dev;
      best_first = first;
    }
  }
  EXPECT_EQ(best_first, 0.0);
  EXPECT_LT(best_dev, 1e-12);
}

TEST(PlanStepF1, SteersTowardOffsetGoal) {
  const auto track = long_straight();
  const auto state = sim::f1_place(track, 50.0, 0.0, 0.0);
  const auto r = plan_step_f1(track, {}, state, 0.5, default_f1_expert());
  EXPECT_GT(r.action, 0.0);
}

TEST(PlanStepF1, EmptyGridThrows) {
  const auto track = long_straight();
  auto cfg = default_f1_expert();
  cfg.action_grid.clear();
  EXPECT_THROW(plan_step_f1(track, {}, sim::f1_place(track, 50.0, 0.0, 0.0), 0.0, cfg), UsageError);
}

TEST(ExpertConfig, ValidateRejectsBadValues) {
  auto cfg = default_f1_expert();
  EXPECT_NO_THROW(validate(cfg, sim::kF1SteerLimit));
  auto bad = cfg;
  bad.horizon = 0;
  EXPECT_THROW(validate(bad, sim::kF1SteerLimit), UsageError);
  bad = cfg;
  bad.action_grid.clear();
  EXPECT_THROW(validate(bad, sim::kF1SteerLimit), UsageError);
  bad = cfg;
  bad.action_grid.push_back(1.5);
  EXPECT_THROW(validate(bad, sim::kF1SteerLimit), UsageError);
  bad = cfg;
  bad.safety_margin = -0.1;
  EXPECT_THROW(validate(bad, sim::kF1SteerLimit), UsageError);
  bad.unsafe_mode = true;
  EXPECT_NO_THROW(validate(bad, sim::kF1SteerLimit));
  EXPECT_NO_THROW(validate(default_mushr_expert(), sim::kMushrSteerLimit));
}

void expect_labels_match_crashes(const data::TrajectorySet& set) {
  for (std::size_t i = 0; i < set.trajectories.size(); ++i) {
    const auto& t = set.trajectories[i];
    const std::size_t len = set.length(i);
    EXPECT_EQ(t.label == data::Label::unsafe, t.crashed);
    if (set.env == data::EnvKind::f110) {
      for (std::size_t s = 0; s < len; ++s) {
        const bool out = std::abs(t.observations[s * 2]) > 1.0f;
        EXPECT_EQ(out, t.crashed && s + 1 == len) << "traj " << i << " step " << s;
      }
    }
  }
}

TEST(GenerateDataset, NoUnsafeFractionMeansNoCrashes) {
  GenerateConfig g;
  g.n_traj = 8;
  g.unsafe_fraction = 0.0;
  g.seed = 3;
  const auto set = generate_dataset(g);
  EXPECT_EQ(set.count(data::Label::safe), 8u);
  for (std::size_t i = 0; i < set.trajectories.size(); ++i) {
    EXPECT_FALSE(set.trajectories[i].crashed);
    EXPECT_EQ(set.length(i), 100u);
  }
  expect_labels_match_crashes(set);
}

TEST(GenerateDataset, ExactUnsafeCountAndCrashAtFinalStep) {
  GenerateConfig g;
  g.n_traj = 20;
  g.unsafe_fraction = 0.3;
  g.seed = 11;
  GenerateStats stats;
  const auto set = generate_dataset(g, &stats);
  EXPECT_EQ(set.count(data::Label::unsafe), 6u);
  EXPECT_EQ(set.count(data::Label::safe), 14u);
  EXPECT_EQ(stats.attempts, 20u + stats.retries);
  for (std::size_t i = 0; i < set.trajectories.size(); ++i) {
    EXPECT_LE(set.length(i), 100u);
    EXPECT_EQ(set.trajectories[i].id, i);
  }
  expect_labels_match_crashes(set);
}

TEST(GenerateDataset, ReproducibleFromSeed) {
  GenerateConfig g;
  g.n_traj = 6;
  g.seed = 5;
  const auto a = generate_dataset(g);
  const auto b = generate_dataset(g);
  ASSERT_EQ(a.trajectories.size(), b.trajectories.size());
  for (std::size_t i = 0; i < a.trajectories.size(); ++i) {
    EXPECT_EQ(a.trajectories[i].observations, b.trajectories[i].observations);
    EXPECT_EQ(a.trajectories[i].actions, b.trajectories[i].actions);
    EXPECT_EQ(a.trajectories[i].positions, b.trajectories[i].positions);
  }
  g.seed = 6;
  const auto c = generate_dataset(g);
  EXPECT_NE(a.trajectories[0].observations, c.trajectories[0].observations);
}

TEST(GenerateDataset, RejectsBadArguments) {
  GenerateConfig g;
  g.n_traj = 0;
  EXPECT_THROW(generate_dataset(g), UsageError);
  g.n_traj = 2;
  g.unsafe_fraction = 1.5;
  EXPECT_THROW(generate_dataset(g), UsageError);
}

TEST(GenerateDataset, MushrScansAndCrashes) {
  GenerateConfig g;
  g.env = data::EnvKind::mushr;
  g.n_traj = 4;
  g.unsafe_fraction = 0.5;
  g.seed = 2;
  const auto set = generate_dataset(g);
  EXPECT_EQ(set.obs_dim, 1440u);
  EXPECT_EQ(set.count(data::Label::unsafe), 2u);
  const sim::MushrParams params;
  for (std::size_t i = 0; i < set.trajectories.size(); ++i) {
    const auto& t = set.trajectories[i];
    const std::size_t len = set.length(i);
    EXPECT_LE(len, 160u);
    for (std::size_t s = 0; s < len; ++s) {
      double min_r = 1e9;
      for (std::size_t k = 0; k < sim::kLidarBeams; ++k) {
        const double x = t.observations[s * 1440 + 2 * k], y = t.observations[s * 1440 + 2 * k + 1];
        min_r = std::min(min_r, std::hypot(x, y));
      }
      const bool hit = min_r < params.collision_radius;
      EXPECT_EQ(hit, t.crashed && s + 1 == len) << "traj " << i << " step " << s;
    }
  }
}

}  // namespace
