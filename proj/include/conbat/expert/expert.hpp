#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "conbat/common/rng.hpp"
#include "conbat/data/dataset.hpp"
#include "conbat/expert/tree_search.hpp"
#include "conbat/sim/f110.hpp"
#include "conbat/sim/mushr.hpp"

namespace conbat::expert {

struct ExpertConfig {
  int horizon = 3;
  std::vector<double> action_grid;
  double safety_margin = 0.3;  // meters kept from the edge or wall
  int replan_every = 1;        // sim steps between plans
  bool unsafe_mode = false;
  int hold_steps = 4;          // sim steps each tree level holds its action
  std::size_t beam_width = 512;
};

ExpertConfig default_f1_expert();
ExpertConfig default_mushr_expert();
void validate(const ExpertConfig& cfg, double action_limit);

/// Tracks a lateral offset goal while making progress along the track.
SearchResult plan_step_f1(const sim::Track& track, const sim::F1Params& params, const sim::CarStateF1& state,
                          double goal_lateral, const ExpertConfig& cfg);

/// Precomputed fields for planning toward one goal on a map.
struct MushrField {
  const sim::OccupancyGrid* grid = nullptr;
  std::vector<double> clearance;  // meters to nearest wall, per cell
  std::vector<double> geodesic;   // meters to goal through passable cells, per cell
  double goal_x = 0.0;
  double goal_y = 0.0;

  double clearance_at(double x, double y) const;
  double geodesic_at(double x, double y) const;
};

/// 8-connected shortest paths from the goal through cells at least
/// `min_clearance` from a wall.
MushrField make_mushr_field(const sim::OccupancyGrid& grid, std::vector<double> clearance, double goal_x,
                            double goal_y, double min_clearance);

/// seek_walls flips the clearance term so the planner steers into walls.
SearchResult plan_step_mushr(const MushrField& field, const sim::MushrParams& params, const sim::PoseMushr& pose,
                             const ExpertConfig& cfg, bool seek_walls);

/// A map with its clearance field and the open cells used for starts and goals.
struct MushrWorld {
  sim::OccupancyGrid grid;
  std::vector<double> clearance;
  std::vector<std::size_t> open_cells;
};

MushrWorld make_mushr_world(sim::OccupancyGrid grid);

struct MushrTask {
  MushrField field;
  sim::PoseMushr start;
};

/// Random goal, and a start 9 to 13 m of path away facing downhill.
/// Empty when no start cell lies in that band.
std::optional<MushrTask> sample_mushr_task(const MushrWorld& world, Rng& rng);

struct GenerateConfig {
  data::EnvKind env = data::EnvKind::f110;
  std::size_t n_traj = 100;
  double unsafe_fraction = 0.3;
  std::uint64_t seed = 0;
  std::string source;        // track or map; empty = built-in default
  std::size_t max_len = 0;   // 0 = environment default (F1 100, MuSHR 160)
  int max_attempts = 50;     // per trajectory
};

struct GenerateStats {
  std::size_t attempts = 0;
  std::size_t retries = 0;
  std::vector<std::string> diagnostics;
};

/// Exactly round(n * unsafe_fraction) trajectories are generated in unsafe
/// mode and end in a crash; the rest are safe and never crash.
data::TrajectorySet generate_dataset(const GenerateConfig& cfg, GenerateStats* stats = nullptr);

}  // namespace conbat::expert
