#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "conbat/common/geometry.hpp"

namespace conbat::sim {

inline constexpr double kF1SteerLimit = 1.0;

/// Closed centerline loop with constant half width. The last point repeats
/// the first.
class Track {
 public:
  Track(std::vector<Vec2> centerline, double half_width);

  struct Projection {
    double arc = 0.0;      // meters along the centerline, in [0, length)
    double lateral = 0.0;  // signed, left of travel direction positive
    double tangent = 0.0;  // centerline heading at the projection, radians
    Vec2 point;
  };

  /// Nearest point on the centerline.
  Projection project(Vec2 p) const;
  /// Nearest point among segments within `window` meters of arc `hint`.
  /// Used while stepping, where the car moves a few centimeters per step.
  Projection project_near(Vec2 p, double hint, double window = 1.0) const;
  /// Centerline point and heading at a given arc position (wraps).
  Projection at_arc(double arc) const;

  const std::vector<Vec2>& centerline() const { return points_; }
  double half_width() const { return half_width_; }
  double length() const { return cumulative_.back(); }

 private:
  void consider_segment(std::size_t i, Vec2 p, double& best, Projection& out) const;
  std::size_t segment_at(double arc) const;

  std::vector<Vec2> points_;
  std::vector<double> cumulative_;
  double half_width_;
};

struct CarStateF1 {
  Vec2 position;
  double heading = 0.0;
  double arc_progress = 0.0;
};

struct ObsF1 {
  double lateral_offset = 0.0;
  double rel_angle = 0.0;
};

struct F1Params {
  double speed = 1.0;
  double wheelbase = 0.3;
  double dt = 0.05;
};

struct F1StepResult {
  CarStateF1 state;
  ObsF1 obs;
  bool crashed = false;
  bool clipped = false;
};

ObsF1 f1_observe(const CarStateF1& state, const Track& track);

/// Places a car on the track at `arc` with the given lateral offset and
/// heading relative to the centerline tangent.
CarStateF1 f1_place(const Track& track, double arc, double lateral, double rel_heading);

F1StepResult f1_step(const CarStateF1& state, double steer, const F1Params& params, const Track& track);

/// Rounded rectangle with a chicane on each long straight.
Track make_playground_track();

/// Built-in tracks by name.
std::map<std::string, Track> f1_tracks();

/// CSV with header `x,y`; the loop must be closed.
Track load_track_csv(const std::filesystem::path& path, double half_width = 1.0);
void save_track_csv(const Track& track, const std::filesystem::path& path);

/// Name of a built-in track or a path to a CSV file.
Track resolve_track(const std::string& name_or_path);

}  // namespace conbat::sim
