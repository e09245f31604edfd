#include "conbat/sim/f110.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "conbat/common/error.hpp"

namespace conbat::sim {

Track::Track(std::vector<Vec2> centerline, double half_width)
    : points_(std::move(centerline)), half_width_(half_width) {
  if (!(half_width_ > 0.0) || !std::isfinite(half_width_)) {
    throw DataError("track: half_width must be positive, got " + std::to_string(half_width_));
  }
  if (points_.size() < 4) throw DataError("track: need at least 3 segments");
  for (const auto& p : points_) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw DataError("track: non-finite point");
  }
  if (norm(points_.front() - points_.back()) > 1e-9) {
    throw DataError("track: polyline is open (first and last points differ)");
  }
  points_.back() = points_.front();
  cumulative_.assign(points_.size(), 0.0);
  for (std::size_t i = 1; i < points_.size(); ++i) {
    const double seg = norm(points_[i] - points_[i - 1]);
    if (seg < 1e-12) throw DataError("track: degenerate segment at index " + std::to_string(i - 1));
    cumulative_[i] = cumulative_[i - 1] + seg;
  }
}

void Track::consider_segment(std::size_t i, Vec2 p, double& best, Projection& out) const {
  const Vec2 a = points_[i];
  const Vec2 seg = points_[i + 1] - a;
  const double len2 = dot(seg, seg);
  const double t = std::clamp(dot(p - a, seg) / len2, 0.0, 1.0);
  const Vec2 q = a + seg * t;
  const Vec2 diff = p - q;
  const double d2 = dot(diff, diff);
  if (d2 < best) {
    best = d2;
    const double side = cross(seg, diff);
    const double dist = std::sqrt(d2);
    out.lateral = side > 0.0 ? dist : (side < 0.0 ? -dist : 0.0);
    out.arc = cumulative_[i] + t * std::sqrt(len2);
    out.tangent = std::atan2(seg.y, seg.x);
    out.point = q;
  }
}

std::size_t Track::segment_at(double arc) const {
  arc = std::fmod(arc, length());
  if (arc < 0.0) arc += length();
  const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), arc);
  const auto i = static_cast<std::size_t>(std::distance(cumulative_.begin(), it));
  return std::clamp<std::size_t>(i, 1, points_.size() - 1) - 1;
}

Track::Projection Track::project(Vec2 p) const {
  if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw NumericError("track: projecting non-finite point");
  double best = std::numeric_limits<double>::infinity();
  Projection out;
  for (std::size_t i = 0; i + 1 < points_.size(); ++i) consider_segment(i, p, best, out);
  if (!std::isfinite(best)) throw NumericError("track: degenerate projection");
  if (out.arc >= length()) out.arc -= length();
  return out;
}

Track::Projection Track::project_near(Vec2 p, double hint, double window) const {
  if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(hint)) {
    throw NumericError("track: projecting non-finite point");
  }
  if (2.0 * window >= length()) return project(p);
  const std::size_t segments = points_.size() - 1;
  const std::size_t first = segment_at(hint - window);
  const std::size_t last = segment_at(hint + window);
  double best = std::numeric_limits<double>::infinity();
  Projection out;
  for (std::size_t i = first;; i = (i + 1) % segments) {
    consider_segment(i, p, best, out);
    if (i == last) break;
  }
  if (!std::isfinite(best)) throw NumericError("track: degenerate projection");
  if (out.arc >= length()) out.arc -= length();
  return out;
}

Track::Projection Track::at_arc(double arc) const {
  arc = std::fmod(arc, length());
  if (arc < 0.0) arc += length();
  const std::size_t i = segment_at(arc);
  const Vec2 seg = points_[i + 1] - points_[i];
  const double t = (arc - cumulative_[i]) / (cumulative_[i + 1] - cumulative_[i]);
  Projection out;
  out.arc = arc;
  out.point = points_[i] + seg * t;
  out.tangent = std::atan2(seg.y, seg.x);
  return out;
}

ObsF1 f1_observe(const CarStateF1& state, const Track& track) {
  const auto proj = track.project(state.position);
  return {proj.lateral, wrap_angle(state.heading - proj.tangent)};
}

CarStateF1 f1_place(const Track& track, double arc, double lateral, double rel_heading) {
  const auto base = track.at_arc(arc);
  const Vec2 normal{-std::sin(base.tangent), std::cos(base.tangent)};
  CarStateF1 s;
  s.position = base.point + normal * lateral;
  s.heading = wrap_angle(base.tangent + rel_heading);
  s.arc_progress = track.project(s.position).arc;
  return s;
}

F1StepResult f1_step(const CarStateF1& state, double steer, const F1Params& params, const Track& track) {
  if (!std::isfinite(state.position.x) || !std::isfinite(state.position.y) || !std::isfinite(state.heading) ||
      !std::isfinite(steer)) {
    throw NumericError("f1_step: non-finite state or action");
  }
  F1StepResult r;
  const double clipped = std::clamp(steer, -kF1SteerLimit, kF1SteerLimit);
  r.clipped = clipped != steer;
  const double heading = state.heading + (params.speed / params.wheelbase) * std::tan(clipped) * params.dt;
  r.state.heading = wrap_angle(heading);
  r.state.position = state.position + Vec2{std::cos(heading), std::sin(heading)} * (params.speed * params.dt);
  const auto proj = track.project_near(r.state.position, state.arc_progress);
  r.state.arc_progress = proj.arc;
  r.obs = {proj.lateral, wrap_angle(r.state.heading - proj.tangent)};
  r.crashed = std::abs(proj.lateral) > track.half_width();
  return r;
}

Track make_playground_track() {
  constexpr double straight = 10.0;
  constexpr double side = 4.0;
  constexpr double radius = 2.0;
  constexpr double chicane_len = 5.0;
  constexpr double chicane_amp = 0.7;
  constexpr double spacing = 0.05;

  std::vector<Vec2> pts;
  Vec2 pen{0.0, 0.0};
  double heading = 0.0;

  auto add_straight = [&](double length, bool chicane) {
    const Vec2 dir{std::cos(heading), std::sin(heading)};
    const Vec2 normal{-dir.y, dir.x};
    const auto n = static_cast<std::size_t>(std::ceil(length / spacing));
    const double c0 = 0.5 * (length - chicane_len);
    for (std::size_t i = 0; i < n; ++i) {
      const double u = length * static_cast<double>(i) / static_cast<double>(n);
      double offset = 0.0;
      if (chicane && u > c0 && u < c0 + chicane_len) {
        offset = chicane_amp * std::sin(2.0 * std::numbers::pi * (u - c0) / chicane_len);
      }
      pts.push_back(pen + dir * u + normal * offset);
    }
    pen = pen + dir * length;
  };
  auto add_left_arc = [&](double angle) {
    const Vec2 center = pen + Vec2{-std::sin(heading), std::cos(heading)} * radius;
    const auto n = static_cast<std::size_t>(std::ceil(radius * angle / spacing));
    for (std::size_t i = 0; i < n; ++i) {
      const double a = heading - std::numbers::pi / 2 + angle * static_cast<double>(i) / static_cast<double>(n);
      pts.push_back(center + Vec2{std::cos(a), std::sin(a)} * radius);
    }
    heading += angle;
    const double a = heading - std::numbers::pi / 2;
    pen = center + Vec2{std::cos(a), std::sin(a)} * radius;
  };

  for (int lap_half = 0; lap_half < 2; ++lap_half) {
    add_straight(straight, true);
    add_left_arc(std::numbers::pi / 2);
    add_straight(side, false);
    add_left_arc(std::numbers::pi / 2);
  }
  pts.push_back(pts.front());
  return Track(std::move(pts), 1.0);
}

std::map<std::string, Track> f1_tracks() {
  std::map<std::string, Track> out;
  out.emplace("playground", make_playground_track());
  return out;
}

Track load_track_csv(const std::filesystem::path& path, double half_width) {
  std::ifstream in(path);
  if (!in) throw DataError("track csv: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("track csv: empty file " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "x,y") throw DataError("track csv: expected header 'x,y' in " + path.string());
  std::vector<Vec2> pts;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw DataError("track csv: row " + std::to_string(row) + " is not 'x,y' in " + path.string());
    }
    try {
      std::size_t used_x = 0, used_y = 0;
      const std::string xs = line.substr(0, comma), ys = line.substr(comma + 1);
      const double x = std::stod(xs, &used_x);
      const double y = std::stod(ys, &used_y);
      if (used_x != xs.size() || used_y != ys.size()) throw std::invalid_argument("trailing");
      pts.push_back({x, y});
    } catch (const std::exception&) {
      throw DataError("track csv: bad number on row " + std::to_string(row) + " in " + path.string());
    }
  }
  try {
    return Track(std::move(pts), half_width);
  } catch (const DataError& e) {
    throw DataError(std::string(e.what()) + " (" + path.string() + ")");
  }
}

void save_track_csv(const Track& track, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("track csv: cannot write " + path.string());
  out << "x,y\n";
  char buf[96];
  for (const auto& p : track.centerline()) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", p.x, p.y);
    out << buf;
  }
}

Track resolve_track(const std::string& name_or_path) {
  auto tracks = f1_tracks();
  if (auto it = tracks.find(name_or_path); it != tracks.end()) return it->second;
  return load_track_csv(name_or_path);
}

}  // namespace conbat::sim
