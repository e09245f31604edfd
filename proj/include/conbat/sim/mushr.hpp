#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "conbat/common/geometry.hpp"

namespace conbat::sim {

inline constexpr std::size_t kLidarBeams = 720;
inline constexpr double kLidarStepDeg = 0.5;
inline constexpr double kMushrSteerLimit = 0.34;

/// Binary occupancy grid. Cell (0,0) has its lower-left corner at origin;
/// x grows with column index, y with row index.
class OccupancyGrid {
 public:
  OccupancyGrid(std::size_t width, std::size_t height, double resolution, Vec2 origin,
                std::vector<std::uint8_t> occupied);

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  double resolution() const { return resolution_; }
  Vec2 origin() const { return origin_; }

  /// Out-of-range cells count as occupied.
  bool occupied(long long ix, long long iy) const;
  bool occupied_at(Vec2 p) const;
  long long cell_x(double x) const;
  long long cell_y(double y) const;
  Vec2 cell_center(std::size_t ix, std::size_t iy) const;
  bool inside(Vec2 p) const;

  const std::vector<std::uint8_t>& cells() const { return occupied_; }

 private:
  std::size_t width_;
  std::size_t height_;
  double resolution_;
  Vec2 origin_;
  std::vector<std::uint8_t> occupied_;
};

struct PoseMushr {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
};

/// Sensor-frame hit points, one per beam; beam k points at heading + k*0.5deg - 180deg.
struct LidarScan {
  std::array<Vec2, kLidarBeams> points{};

  double min_range() const;
};

double beam_angle(std::size_t k);

/// Per-beam DDA traversal to the first occupied cell, clamped to max_range.
/// Throws when the pose itself is in an occupied cell.
LidarScan raycast(const OccupancyGrid& grid, const PoseMushr& pose, double max_range);

/// Reference: marches each beam in steps of resolution/10.
LidarScan raycast_dense(const OccupancyGrid& grid, const PoseMushr& pose, double max_range);

struct MushrParams {
  double speed = 1.0;
  double wheelbase = 0.3;
  double dt = 0.1;
  double collision_radius = 0.2;
  double max_range = 10.0;
};

struct MushrStepResult {
  PoseMushr pose;
  LidarScan scan;
  bool crashed = false;
  bool clipped = false;
};

MushrStepResult mushr_step(const OccupancyGrid& grid, const PoseMushr& pose, double steer, const MushrParams& params);

/// Scan at a pose plus the crash predicate, without moving.
MushrStepResult mushr_sense(const OccupancyGrid& grid, const PoseMushr& pose, const MushrParams& params);

/// Accepts the .pgm or the .json sidecar; the other file shares the stem.
OccupancyGrid load_map(const std::filesystem::path& path);
void save_map(const OccupancyGrid& grid, const std::filesystem::path& pgm_path);

/// Corridors-and-rooms floor plan, about 30 x 70 m at 0.1 m cells.
OccupancyGrid make_office_map();

/// Name of a built-in map ("office") or a map file path.
OccupancyGrid resolve_map(const std::string& name_or_path);

/// Euclidean distance in meters from each cell center to the nearest
/// occupied cell center (0 for occupied cells). Row-major, width*height.
std::vector<double> distance_transform(const OccupancyGrid& grid);

}  // namespace conbat::sim
