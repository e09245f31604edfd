#include "conbat/expert/expert.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <numbers>
#include <queue>

#include "conbat/common/parallel.hpp"
#include "conbat/common/rng.hpp"

namespace conbat::expert {

namespace {

constexpr double kF1LateralWeight = 1.0;
constexpr double kF1HeadingWeight = 0.2;
constexpr double kF1ProgressWeight = 1.0;
constexpr double kF1UnsafeGoal = 2.0;

constexpr double kMushrPassClearance = 0.35;
constexpr double kMushrPreferredClearance = 0.8;
constexpr double kMushrClearanceWeight = 4.0;
constexpr double kMushrGoalRadius = 0.5;
constexpr double kUnreachable = 1e4;
constexpr double kMushrStartClearance = 0.6;
constexpr double kMushrGoalMin = 9.0;
constexpr double kMushrGoalMax = 13.0;

struct Stage {
  double cost;
  double violation;
  bool dead;
};

}  // namespace

ExpertConfig default_f1_expert() {
  ExpertConfig cfg;
  cfg.action_grid = {-0.6, -0.2, 0.0, 0.2, 0.6};
  cfg.safety_margin = 0.3;
  cfg.hold_steps = 4;
  return cfg;
}

ExpertConfig default_mushr_expert() {
  ExpertConfig cfg;
  cfg.action_grid = {-0.34, -0.12, 0.0, 0.12, 0.34};
  cfg.safety_margin = 0.3;
  cfg.hold_steps = 3;
  return cfg;
}

void validate(const ExpertConfig& cfg, double action_limit) {
  if (cfg.horizon < 1) throw UsageError("expert: horizon must be >= 1");
  if (cfg.action_grid.empty()) throw UsageError("expert: action grid is empty");
  if (cfg.replan_every < 1 || cfg.hold_steps < 1) throw UsageError("expert: replan_every and hold_steps must be >= 1");
  if (cfg.beam_width < 1) throw UsageError("expert: beam_width must be >= 1");
  for (double a : cfg.action_grid) {
    if (!(std::abs(a) <= action_limit)) {
      throw UsageError("expert: grid action " + std::to_string(a) + " outside [-" + std::to_string(action_limit) +
                       ", " + std::to_string(action_limit) + "]");
    }
  }
  if (!cfg.unsafe_mode && cfg.safety_margin < 0.0) throw UsageError("expert: safety_margin must be >= 0");
}

SearchResult plan_step_f1(const sim::Track& track, const sim::F1Params& params, const sim::CarStateF1& state,
                          double goal_lateral, const ExpertConfig& cfg) {
  struct Node {
    sim::CarStateF1 car;
    double progress;
    double lateral;
    double rel_angle;
    bool crashed;
  };
  const double limit = track.half_width() - cfg.safety_margin;
  auto expand = [&](const Node& n, double steer) {
    Node c = n;
    for (int k = 0; k < cfg.hold_steps; ++k) {
      const auto r = sim::f1_step(c.car, steer, params, track);
      double delta = r.state.arc_progress - c.car.arc_progress;
      if (delta > 0.5 * track.length()) delta -= track.length();
      if (delta < -0.5 * track.length()) delta += track.length();
      c.progress += delta;
      c.car = r.state;
      c.lateral = r.obs.lateral_offset;
      c.rel_angle = r.obs.rel_angle;
      if (r.crashed) {
        c.crashed = true;
        break;
      }
    }
    return c;
  };
  auto stage = [&](const Node& n) {
    // Degraded runs drop the heading term so the car commits to the wall.
    const double heading_weight = cfg.unsafe_mode ? 0.0 : kF1HeadingWeight;
    const double cost = -kF1ProgressWeight * n.progress + kF1LateralWeight * std::abs(n.lateral - goal_lateral) +
                        heading_weight * std::abs(n.rel_angle);
    return Stage{cost, std::max(0.0, std::abs(n.lateral) - limit), n.crashed};
  };
  const auto obs = sim::f1_observe(state, track);
  const Node root{state, 0.0, obs.lateral_offset, obs.rel_angle, false};
  return tree_search(root, std::span<const double>(cfg.action_grid), {cfg.horizon, cfg.beam_width}, expand, stage);
}

double MushrField::clearance_at(double x, double y) const {
  const auto ix = grid->cell_x(x), iy = grid->cell_y(y);
  if (grid->occupied(ix, iy)) return 0.0;
  return clearance[static_cast<std::size_t>(iy) * grid->width() + static_cast<std::size_t>(ix)];
}

double MushrField::geodesic_at(double x, double y) const {
  const auto ix = grid->cell_x(x), iy = grid->cell_y(y);
  if (grid->occupied(ix, iy)) return kUnreachable;
  return geodesic[static_cast<std::size_t>(iy) * grid->width() + static_cast<std::size_t>(ix)];
}

MushrField make_mushr_field(const sim::OccupancyGrid& grid, std::vector<double> clearance, double goal_x,
                            double goal_y, double min_clearance) {
  MushrField f;
  f.grid = &grid;
  f.clearance = std::move(clearance);
  f.goal_x = goal_x;
  f.goal_y = goal_y;
  const std::size_t w = grid.width(), h = grid.height();
  f.geodesic.assign(w * h, kUnreachable);
  const auto gx = grid.cell_x(goal_x), gy = grid.cell_y(goal_y);
  if (grid.occupied(gx, gy)) throw DataError("mushr field: goal is inside an occupied cell");
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> queue;
  const std::size_t goal = static_cast<std::size_t>(gy) * w + static_cast<std::size_t>(gx);
  f.geodesic[goal] = 0.0;
  queue.push({0.0, goal});
  const double res = grid.resolution();
  const int dx[8] = {1, -1, 0, 0, 1, 1, -1, -1};
  const int dy[8] = {0, 0, 1, -1, 1, -1, 1, -1};
  while (!queue.empty()) {
    const auto [d, idx] = queue.top();
    queue.pop();
    if (d > f.geodesic[idx]) continue;
    const auto x = static_cast<long long>(idx % w), y = static_cast<long long>(idx / w);
    for (int k = 0; k < 8; ++k) {
      const long long nx = x + dx[k], ny = y + dy[k];
      if (grid.occupied(nx, ny)) continue;
      const std::size_t nidx = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
      if (f.clearance[nidx] < min_clearance) continue;
      const double nd = d + res * (k < 4 ? 1.0 : std::numbers::sqrt2);
      if (nd < f.geodesic[nidx]) {
        f.geodesic[nidx] = nd;
        queue.push({nd, nidx});
      }
    }
  }
  return f;
}

SearchResult plan_step_mushr(const MushrField& field, const sim::MushrParams& params, const sim::PoseMushr& pose,
                             const ExpertConfig& cfg, bool seek_walls) {
  struct Node {
    sim::PoseMushr pose;
    double clearance;
    bool crashed;
  };
  const double keep = params.collision_radius + cfg.safety_margin;
  auto expand = [&](const Node& n, double steer) {
    Node c = n;
    const double clipped = std::clamp(steer, -sim::kMushrSteerLimit, sim::kMushrSteerLimit);
    for (int k = 0; k < cfg.hold_steps; ++k) {
      // Kinematics only; clearance comes from the distance field rather than a scan.
      const double heading = c.pose.heading + (params.speed / params.wheelbase) * std::tan(clipped) * params.dt;
      c.pose = {c.pose.x + params.speed * params.dt * std::cos(heading),
                c.pose.y + params.speed * params.dt * std::sin(heading), wrap_angle(heading)};
      c.clearance = field.clearance_at(c.pose.x, c.pose.y);
      if (c.clearance < params.collision_radius) {
        c.crashed = true;
        break;
      }
    }
    return c;
  };
  auto stage = [&](const Node& n) {
    const double goal = field.geodesic_at(n.pose.x, n.pose.y);
    const double clear_term = seek_walls ? kMushrClearanceWeight * n.clearance
                                         : kMushrClearanceWeight * std::max(0.0, kMushrPreferredClearance - n.clearance);
    const double cost = (seek_walls ? 0.1 * goal : goal) + clear_term;
    return Stage{cost, std::max(0.0, keep - n.clearance), n.crashed};
  };
  const Node root{pose, field.clearance_at(pose.x, pose.y), false};
  return tree_search(root, std::span<const double>(cfg.action_grid), {cfg.horizon, cfg.beam_width}, expand, stage);
}

MushrWorld make_mushr_world(sim::OccupancyGrid grid) {
  MushrWorld w{std::move(grid), {}, {}};
  w.clearance = sim::distance_transform(w.grid);
  for (std::size_t i = 0; i < w.clearance.size(); ++i) {
    if (w.clearance[i] >= kMushrStartClearance) w.open_cells.push_back(i);
  }
  if (w.open_cells.empty()) throw DataError("mushr: map has no open space");
  return w;
}

std::optional<MushrTask> sample_mushr_task(const MushrWorld& world, Rng& rng) {
  const auto& grid = world.grid;
  auto cell_point = [&](std::size_t idx) { return grid.cell_center(idx % grid.width(), idx / grid.width()); };
  const Vec2 goal = cell_point(world.open_cells[rng.uniform_index(world.open_cells.size())]);
  MushrTask task{make_mushr_field(grid, world.clearance, goal.x, goal.y, kMushrPassClearance), {}};
  std::vector<std::size_t> starts;
  for (std::size_t idx : world.open_cells) {
    const double g = task.field.geodesic[idx];
    if (g >= kMushrGoalMin && g <= kMushrGoalMax) starts.push_back(idx);
  }
  if (starts.empty()) return std::nullopt;
  const Vec2 start = cell_point(starts[rng.uniform_index(starts.size())]);
  // Face downhill on the geodesic field.
  double best_heading = 0.0, best_value = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 16; ++k) {
    const double a = -std::numbers::pi + k * std::numbers::pi / 8.0;
    const double v = task.field.geodesic_at(start.x + 0.5 * std::cos(a), start.y + 0.5 * std::sin(a));
    if (v < best_value) {
      best_value = v;
      best_heading = a;
    }
  }
  task.start = {start.x, start.y, wrap_angle(best_heading + rng.uniform(-0.3, 0.3))};
  return task;
}

namespace {

struct RunOutcome {
  data::Trajectory traj;
  bool ok = false;
  std::string diagnostic;
};

void push_row(data::Trajectory& t, std::span<const float> obs, double action, double x, double y) {
  t.observations.insert(t.observations.end(), obs.begin(), obs.end());
  t.actions.push_back(static_cast<float>(action));
  t.positions.push_back(static_cast<float>(x));
  t.positions.push_back(static_cast<float>(y));
}

RunOutcome run_f1(const sim::Track& track, const GenerateConfig& gen, bool unsafe, Rng& rng) {
  const sim::F1Params params;
  ExpertConfig cfg = default_f1_expert();
  const std::size_t max_len = gen.max_len ? gen.max_len : 100;
  auto state = sim::f1_place(track, rng.uniform(0.0, track.length()), rng.uniform(-0.3, 0.3), rng.uniform(-0.1, 0.1));
  double goal = rng.uniform(-0.5, 0.5);
  std::size_t next_goal = 15 + rng.uniform_index(21);
  const std::size_t switch_step = 30 + rng.uniform_index(41);
  const double bad_margin = rng.uniform(-0.5, -0.05);
  const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;

  RunOutcome out;
  auto& t = out.traj;
  auto obs = sim::f1_observe(state, track);
  double action = 0.0;
  for (std::size_t step = 0;; ++step) {
    if (step == next_goal) {
      goal = rng.uniform(-0.5, 0.5);
      next_goal += 15 + rng.uniform_index(21);
    }
    const bool degraded = unsafe && step >= switch_step;
    cfg.safety_margin = degraded ? bad_margin : default_f1_expert().safety_margin;
    cfg.unsafe_mode = degraded;
    if (step % static_cast<std::size_t>(cfg.replan_every) == 0) {
      action = plan_step_f1(track, params, state, degraded ? side * kF1UnsafeGoal : goal, cfg).action;
    }
    const float row[2] = {static_cast<float>(obs.lateral_offset), static_cast<float>(obs.rel_angle)};
    push_row(t, row, action, state.position.x, state.position.y);
    if (step + 1 >= max_len) break;
    const auto r = sim::f1_step(state, action, params, track);
    state = r.state;
    obs = r.obs;
    if (r.crashed) {
      const float crash_row[2] = {static_cast<float>(obs.lateral_offset), static_cast<float>(obs.rel_angle)};
      push_row(t, crash_row, action, state.position.x, state.position.y);
      t.crashed = true;
      break;
    }
  }
  t.label = t.crashed ? data::Label::unsafe : data::Label::safe;
  out.ok = t.crashed == unsafe;
  if (!out.ok) out.diagnostic = unsafe ? "degraded run did not crash" : "expert crashed in safe mode";
  return out;
}


void push_scan(std::vector<float>& buf, const sim::LidarScan& scan) {
  buf.clear();
  for (const auto& p : scan.points) {
    buf.push_back(static_cast<float>(p.x));
    buf.push_back(static_cast<float>(p.y));
  }
}

RunOutcome run_mushr(const MushrWorld& world, const GenerateConfig& gen, bool unsafe, Rng& rng) {
  const sim::MushrParams params;
  const auto& grid = world.grid;
  ExpertConfig cfg = default_mushr_expert();
  const std::size_t max_len = gen.max_len ? gen.max_len : 160;
  RunOutcome out;

  auto task = sample_mushr_task(world, rng);
  if (!task) {
    out.diagnostic = "no start cell 9-13 m from sampled goal";
    return out;
  }
  const auto& field = task->field;
  sim::PoseMushr pose = task->start;
  const std::size_t switch_step = 20 + rng.uniform_index(41);
  const double bad_margin = rng.uniform(-0.3, -0.1);

  auto sensed = sim::mushr_sense(grid, pose, params);
  if (sensed.crashed) {
    out.diagnostic = "start pose already in collision";
    return out;
  }
  auto& t = out.traj;
  std::vector<float> row;
  double action = 0.0;
  bool reached = false;
  for (std::size_t step = 0;; ++step) {
    const bool degraded = unsafe && step >= switch_step;
    cfg.safety_margin = degraded ? bad_margin : default_mushr_expert().safety_margin;
    cfg.unsafe_mode = degraded;
    if (step % static_cast<std::size_t>(cfg.replan_every) == 0) {
      action = plan_step_mushr(field, params, pose, cfg, degraded).action;
    }
    push_scan(row, sensed.scan);
    push_row(t, row, action, pose.x, pose.y);
    if (step + 1 >= max_len) break;
    if (!degraded && field.geodesic_at(pose.x, pose.y) < kMushrGoalRadius) {
      reached = true;
      break;
    }
    sensed = sim::mushr_step(grid, pose, action, params);
    pose = sensed.pose;
    if (sensed.crashed) {
      push_scan(row, sensed.scan);
      push_row(t, row, action, pose.x, pose.y);
      t.crashed = true;
      break;
    }
  }
  (void)reached;
  t.label = t.crashed ? data::Label::unsafe : data::Label::safe;
  out.ok = t.crashed == unsafe;
  if (!out.ok) out.diagnostic = unsafe ? "degraded run did not crash" : "expert crashed in safe mode";
  return out;
}

}  // namespace

data::TrajectorySet generate_dataset(const GenerateConfig& gen, GenerateStats* stats) {
  if (gen.n_traj < 1) throw UsageError("generate_dataset: n_traj must be >= 1");
  if (!(gen.unsafe_fraction >= 0.0 && gen.unsafe_fraction <= 1.0)) {
    throw UsageError("generate_dataset: unsafe_fraction must be in [0, 1]");
  }
  if (gen.max_attempts < 1) throw UsageError("generate_dataset: max_attempts must be >= 1");

  data::TrajectorySet set;
  set.env = gen.env;
  set.seed = gen.seed;
  set.act_dim = 1;

  // Which indices run in unsafe mode: a seeded permutation's prefix.
  const auto n_unsafe = static_cast<std::size_t>(std::llround(static_cast<double>(gen.n_traj) * gen.unsafe_fraction));
  std::vector<std::size_t> order(gen.n_traj);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng picker(mix_seed(gen.seed, 0xfeed));
  picker.shuffle(std::span<std::size_t>(order));
  std::vector<std::uint8_t> unsafe(gen.n_traj, 0);
  for (std::size_t i = 0; i < n_unsafe; ++i) unsafe[order[i]] = 1;

  std::vector<RunOutcome> results(gen.n_traj);
  std::vector<std::size_t> attempts(gen.n_traj, 0);
  std::vector<std::vector<std::string>> notes(gen.n_traj);

  std::optional<sim::Track> track;
  std::optional<MushrWorld> world;
  if (gen.env == data::EnvKind::f110) {
    set.source = gen.source.empty() ? "playground" : gen.source;
    set.obs_dim = 2;
    track = sim::resolve_track(set.source);
  } else {
    set.source = gen.source.empty() ? "office" : gen.source;
    set.obs_dim = 2 * sim::kLidarBeams;
    world.emplace(make_mushr_world(sim::resolve_map(set.source)));
  }

  parallel_for(gen.n_traj, [&](std::size_t i) {
    Rng rng(mix_seed(gen.seed, i));
    for (int attempt = 0; attempt < gen.max_attempts; ++attempt) {
      ++attempts[i];
      RunOutcome r;
      try {
        r = gen.env == data::EnvKind::f110 ? run_f1(*track, gen, unsafe[i], rng) : run_mushr(*world, gen, unsafe[i], rng);
      } catch (const Error& e) {
        r.diagnostic = std::string("simulator failure: ") + e.what();
      }
      if (r.ok) {
        results[i] = std::move(r);
        return;
      }
      notes[i].push_back("trajectory " + std::to_string(i) + " attempt " + std::to_string(attempt) + ": " +
                         r.diagnostic);
    }
    throw NumericError("generate_dataset: trajectory " + std::to_string(i) + " failed after " +
                       std::to_string(gen.max_attempts) + " attempts");
  });

  for (std::size_t i = 0; i < gen.n_traj; ++i) {
    results[i].traj.id = static_cast<std::uint32_t>(i);
    set.trajectories.push_back(std::move(results[i].traj));
    if (stats) {
      stats->attempts += attempts[i];
      stats->retries += attempts[i] - 1;
      for (auto& n : notes[i]) stats->diagnostics.push_back(std::move(n));
    }
  }
  set.validate();
  return set;
}

}  // namespace conbat::expert
