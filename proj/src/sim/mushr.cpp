#include "conbat/sim/mushr.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <nlohmann/json.hpp>
#include <sstream>

#include "conbat/common/error.hpp"

namespace conbat::sim {

OccupancyGrid::OccupancyGrid(std::size_t width, std::size_t height, double resolution, Vec2 origin,
                             std::vector<std::uint8_t> occupied)
    : width_(width), height_(height), resolution_(resolution), origin_(origin), occupied_(std::move(occupied)) {
  if (!(resolution_ > 0.0) || !std::isfinite(resolution_)) throw DataError("map: resolution must be positive");
  if (width_ < 3 || height_ < 3) throw DataError("map: grid must be at least 3x3 cells");
  if (occupied_.size() != width_ * height_) {
    throw DataError("map: expected " + std::to_string(width_ * height_) + " cells, got " +
                    std::to_string(occupied_.size()));
  }
  for (std::size_t x = 0; x < width_; ++x) {
    if (!occupied_[x] || !occupied_[(height_ - 1) * width_ + x]) throw DataError("map: border is not closed");
  }
  for (std::size_t y = 0; y < height_; ++y) {
    if (!occupied_[y * width_] || !occupied_[y * width_ + width_ - 1]) throw DataError("map: border is not closed");
  }
}

bool OccupancyGrid::occupied(long long ix, long long iy) const {
  if (ix < 0 || iy < 0 || ix >= static_cast<long long>(width_) || iy >= static_cast<long long>(height_)) return true;
  return occupied_[static_cast<std::size_t>(iy) * width_ + static_cast<std::size_t>(ix)] != 0;
}

long long OccupancyGrid::cell_x(double x) const {
  return static_cast<long long>(std::floor((x - origin_.x) / resolution_));
}

long long OccupancyGrid::cell_y(double y) const {
  return static_cast<long long>(std::floor((y - origin_.y) / resolution_));
}

bool OccupancyGrid::occupied_at(Vec2 p) const { return occupied(cell_x(p.x), cell_y(p.y)); }

Vec2 OccupancyGrid::cell_center(std::size_t ix, std::size_t iy) const {
  return {origin_.x + (static_cast<double>(ix) + 0.5) * resolution_,
          origin_.y + (static_cast<double>(iy) + 0.5) * resolution_};
}

bool OccupancyGrid::inside(Vec2 p) const {
  const auto ix = cell_x(p.x), iy = cell_y(p.y);
  return ix >= 0 && iy >= 0 && ix < static_cast<long long>(width_) && iy < static_cast<long long>(height_);
}

double LidarScan::min_range() const {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : points) best = std::min(best, norm(p));
  return best;
}

double beam_angle(std::size_t k) {
  return (static_cast<double>(k) * kLidarStepDeg - 180.0) * std::numbers::pi / 180.0;
}

namespace {

void check_pose(const OccupancyGrid& grid, const PoseMushr& pose) {
  if (!std::isfinite(pose.x) || !std::isfinite(pose.y) || !std::isfinite(pose.heading)) {
    throw NumericError("mushr: non-finite pose");
  }
  if (grid.occupied_at({pose.x, pose.y})) {
    throw DataError("raycast: pose (" + std::to_string(pose.x) + ", " + std::to_string(pose.y) +
                    ") is in an occupied cell");
  }
}

double cast_beam(const OccupancyGrid& grid, Vec2 start, double angle, double max_range) {
  const double res = grid.resolution();
  const double dx = std::cos(angle), dy = std::sin(angle);
  long long ix = grid.cell_x(start.x), iy = grid.cell_y(start.y);
  const Vec2 origin = grid.origin();
  const long long step_x = dx > 0 ? 1 : -1;
  const long long step_y = dy > 0 ? 1 : -1;
  constexpr double inf = std::numeric_limits<double>::infinity();
  const double next_x = origin.x + static_cast<double>(ix + (dx > 0 ? 1 : 0)) * res;
  const double next_y = origin.y + static_cast<double>(iy + (dy > 0 ? 1 : 0)) * res;
  double t_max_x = dx != 0.0 ? (next_x - start.x) / dx : inf;
  double t_max_y = dy != 0.0 ? (next_y - start.y) / dy : inf;
  const double t_delta_x = dx != 0.0 ? res / std::abs(dx) : inf;
  const double t_delta_y = dy != 0.0 ? res / std::abs(dy) : inf;
  while (true) {
    double t;
    if (t_max_x < t_max_y) {
      t = t_max_x;
      t_max_x += t_delta_x;
      ix += step_x;
    } else {
      t = t_max_y;
      t_max_y += t_delta_y;
      iy += step_y;
    }
    if (t >= max_range) return max_range;
    if (grid.occupied(ix, iy)) return std::max(t, 0.0);
  }
}

}  // namespace

LidarScan raycast(const OccupancyGrid& grid, const PoseMushr& pose, double max_range) {
  check_pose(grid, pose);
  const double heading = wrap_angle(pose.heading);
  LidarScan scan;
  for (std::size_t k = 0; k < kLidarBeams; ++k) {
    const double rel = beam_angle(k);
    const double d = cast_beam(grid, {pose.x, pose.y}, heading + rel, max_range);
    scan.points[k] = {d * std::cos(rel), d * std::sin(rel)};
  }
  return scan;
}

LidarScan raycast_dense(const OccupancyGrid& grid, const PoseMushr& pose, double max_range) {
  check_pose(grid, pose);
  const double heading = wrap_angle(pose.heading);
  const double step = grid.resolution() / 10.0;
  LidarScan scan;
  for (std::size_t k = 0; k < kLidarBeams; ++k) {
    const double rel = beam_angle(k);
    const double dx = std::cos(heading + rel), dy = std::sin(heading + rel);
    auto cell = [&](double t) { return std::pair{grid.cell_x(pose.x + t * dx), grid.cell_y(pose.y + t * dy)}; };
    double d = max_range;
    double prev_t = 0.0;
    auto prev = cell(0.0);
    for (double t = step; t < max_range; t += step) {
      const auto cur = cell(t);
      if (cur.first != prev.first && cur.second != prev.second) {
        // Diagonal move between samples: the ray clipped one of the two side
        // cells, possibly for less than a step. Bisect to the first boundary.
        double lo = prev_t, hi = t;
        for (int i = 0; i < 60; ++i) {
          const double mid = 0.5 * (lo + hi);
          (cell(mid) == prev ? lo : hi) = mid;
        }
        const auto side = cell(hi);
        if (side != cur && grid.occupied(side.first, side.second)) {
          d = hi;
          break;
        }
      }
      if (grid.occupied(cur.first, cur.second)) {
        d = t;
        break;
      }
      prev = cur;
      prev_t = t;
    }
    scan.points[k] = {d * std::cos(rel), d * std::sin(rel)};
  }
  return scan;
}

MushrStepResult mushr_sense(const OccupancyGrid& grid, const PoseMushr& pose, const MushrParams& params) {
  if (!std::isfinite(pose.x) || !std::isfinite(pose.y) || !std::isfinite(pose.heading)) {
    throw NumericError("mushr: non-finite pose");
  }
  MushrStepResult r;
  r.pose = pose;
  if (grid.occupied_at({pose.x, pose.y})) {
    r.crashed = true;  // scan stays all zeros: the sensor is inside a wall
    return r;
  }
  r.scan = raycast(grid, pose, params.max_range);
  r.crashed = r.scan.min_range() < params.collision_radius;
  return r;
}

MushrStepResult mushr_step(const OccupancyGrid& grid, const PoseMushr& pose, double steer, const MushrParams& params) {
  if (!std::isfinite(steer)) throw NumericError("mushr_step: non-finite action");
  const double clipped = std::clamp(steer, -kMushrSteerLimit, kMushrSteerLimit);
  const double heading = pose.heading + (params.speed / params.wheelbase) * std::tan(clipped) * params.dt;
  PoseMushr next;
  next.heading = wrap_angle(heading);
  next.x = pose.x + params.speed * params.dt * std::cos(heading);
  next.y = pose.y + params.speed * params.dt * std::sin(heading);
  auto r = mushr_sense(grid, next, params);
  r.clipped = clipped != steer;
  return r;
}

namespace {

std::filesystem::path with_ext(std::filesystem::path p, const char* ext) {
  p.replace_extension(ext);
  return p;
}

std::string read_token(std::istream& in) {
  std::string tok;
  while (true) {
    int c = in.peek();
    if (c == EOF) break;
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      in.get();
      continue;
    }
    tok.push_back(static_cast<char>(in.get()));
  }
  return tok;
}

std::size_t parse_header_int(std::istream& in, const std::string& what, const std::filesystem::path& path) {
  const std::string tok = read_token(in);
  try {
    std::size_t used = 0;
    const long long v = std::stoll(tok, &used);
    if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw DataError("map: bad PGM header field " + what + " '" + tok + "' in " + path.string());
  }
}

}  // namespace

OccupancyGrid load_map(const std::filesystem::path& path) {
  const auto pgm_path = with_ext(path, ".pgm");
  const auto meta_path = with_ext(path, ".json");

  std::ifstream meta_in(meta_path);
  if (!meta_in) throw DataError("map: cannot open metadata " + meta_path.string());
  double resolution = 0.0;
  Vec2 origin;
  try {
    const auto meta = nlohmann::json::parse(meta_in);
    resolution = meta.at("resolution").get<double>();
    origin = {meta.at("origin_x").get<double>(), meta.at("origin_y").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw DataError("map: bad metadata in " + meta_path.string() + ": " + e.what());
  }

  std::ifstream in(pgm_path, std::ios::binary);
  if (!in) throw DataError("map: cannot open " + pgm_path.string());
  if (read_token(in) != "P5") throw DataError("map: not a binary PGM (P5) file: " + pgm_path.string());
  const std::size_t width = parse_header_int(in, "width", pgm_path);
  const std::size_t height = parse_header_int(in, "height", pgm_path);
  const std::size_t maxval = parse_header_int(in, "maxval", pgm_path);
  if (maxval > 255) throw DataError("map: only 8-bit PGM supported: " + pgm_path.string());
  in.get();  // single whitespace before raster
  std::vector<unsigned char> raster(width * height);
  in.read(reinterpret_cast<char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  if (in.gcount() != static_cast<std::streamsize>(raster.size())) {
    throw DataError("map: truncated raster in " + pgm_path.string());
  }
  // Image rows run top to bottom; grid rows run bottom to top.
  std::vector<std::uint8_t> occ(width * height);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      occ[(height - 1 - r) * width + c] = raster[r * width + c] < 128 ? 1 : 0;
    }
  }
  return OccupancyGrid(width, height, resolution, origin, std::move(occ));
}

void save_map(const OccupancyGrid& grid, const std::filesystem::path& pgm_path) {
  const auto pgm = with_ext(pgm_path, ".pgm");
  std::ofstream out(pgm, std::ios::binary);
  if (!out) throw DataError("map: cannot write " + pgm.string());
  out << "P5\n" << grid.width() << " " << grid.height() << "\n255\n";
  std::vector<unsigned char> raster(grid.width() * grid.height());
  for (std::size_t r = 0; r < grid.height(); ++r) {
    for (std::size_t c = 0; c < grid.width(); ++c) {
      raster[r * grid.width() + c] = grid.cells()[(grid.height() - 1 - r) * grid.width() + c] ? 0 : 255;
    }
  }
  out.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  nlohmann::ordered_json meta;
  meta["resolution"] = grid.resolution();
  meta["origin_x"] = grid.origin().x;
  meta["origin_y"] = grid.origin().y;
  std::ofstream meta_out(with_ext(pgm_path, ".json"));
  meta_out << meta.dump(2) << "\n";
}

OccupancyGrid make_office_map() {
  constexpr double res = 0.1;
  constexpr std::size_t width = 300, height = 700;
  std::vector<std::uint8_t> occ(width * height, 1);
  auto carve = [&](double x0, double y0, double x1, double y1) {
    const auto c0 = static_cast<std::size_t>(std::max(1.0, std::round(x0 / res)));
    const auto c1 = static_cast<std::size_t>(std::min<double>(width - 1, std::round(x1 / res)));
    const auto r0 = static_cast<std::size_t>(std::max(1.0, std::round(y0 / res)));
    const auto r1 = static_cast<std::size_t>(std::min<double>(height - 1, std::round(y1 / res)));
    for (std::size_t r = r0; r < r1; ++r) {
      for (std::size_t c = c0; c < c1; ++c) occ[r * width + c] = 0;
    }
  };
  auto fill = [&](double x0, double y0, double x1, double y1) {
    for (auto r = static_cast<std::size_t>(std::round(y0 / res)); r < static_cast<std::size_t>(std::round(y1 / res)); ++r) {
      for (auto c = static_cast<std::size_t>(std::round(x0 / res)); c < static_cast<std::size_t>(std::round(x1 / res)); ++c) {
        occ[r * width + c] = 1;
      }
    }
  };

  constexpr double half = 1.2;  // corridors are 2.4 m wide
  const double vertical[] = {4.0, 15.0, 26.0};
  const double horizontal[] = {4.0, 18.0, 35.0, 52.0, 66.0};
  for (double x : vertical) carve(x - half, 4.0 - half, x + half, 66.0 + half);
  for (double y : horizontal) carve(4.0 - half, y - half, 26.0 + half, y + half);

  // One room per block between corridors, opened by a 1.4 m door.
  int block = 0;
  for (std::size_t i = 0; i + 1 < std::size(vertical); ++i) {
    for (std::size_t j = 0; j + 1 < std::size(horizontal); ++j, ++block) {
      const double x0 = vertical[i] + half + 0.4, x1 = vertical[i + 1] - half - 0.4;
      const double y0 = horizontal[j] + half + 0.4, y1 = horizontal[j + 1] - half - 0.4;
      carve(x0, y0, x1, y1);
      const double mx = 0.5 * (x0 + x1), my = 0.5 * (y0 + y1);
      switch (block % 4) {
        case 0: carve(mx - 0.7, y0 - 0.5, mx + 0.7, y0 + 0.1); break;
        case 1: carve(x1 - 0.1, my - 0.7, x1 + 0.5, my + 0.7); break;
        case 2: carve(mx - 0.7, y1 - 0.1, mx + 0.7, y1 + 0.5); break;
        default: carve(x0 - 0.5, my - 0.7, x0 + 0.1, my + 0.7); break;
      }
      // A desk island in the larger rooms.
      if ((x1 - x0) > 6.0 && (y1 - y0) > 8.0) fill(mx - 1.0, my - 1.5, mx + 1.0, my + 1.5);
    }
  }
  return OccupancyGrid(width, height, res, {0.0, 0.0}, std::move(occ));
}

OccupancyGrid resolve_map(const std::string& name_or_path) {
  if (name_or_path == "office") return make_office_map();
  return load_map(name_or_path);
}

namespace {

constexpr double kFar = 1e20;

// Lower envelope of parabolas rooted at (q, f[q]).
void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<std::size_t>& v,
            std::vector<double>& z) {
  const std::size_t n = f.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::size_t k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  auto sq = [](std::size_t q) { return static_cast<double>(q) * static_cast<double>(q); };
  for (std::size_t q = 1; q < n; ++q) {
    double s = ((f[q] + sq(q)) - (f[v[k]] + sq(v[k]))) / (2.0 * static_cast<double>(q) - 2.0 * static_cast<double>(v[k]));
    while (s <= z[k]) {
      --k;
      s = ((f[q] + sq(q)) - (f[v[k]] + sq(v[k]))) / (2.0 * static_cast<double>(q) - 2.0 * static_cast<double>(v[k]));
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = diff * diff + f[v[k]];
  }
}

}  // namespace

std::vector<double> distance_transform(const OccupancyGrid& grid) {
  const std::size_t w = grid.width(), h = grid.height();
  std::vector<double> sq(w * h);
  for (std::size_t i = 0; i < w * h; ++i) sq[i] = grid.cells()[i] ? 0.0 : kFar;

  const std::size_t n = std::max(w, h);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<std::size_t> v(n);
  // Columns, then rows.
  f.resize(h);
  d.resize(h);
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) f[y] = sq[y * w + x];
    edt_1d(f, d, v, z);
    for (std::size_t y = 0; y < h; ++y) sq[y * w + x] = d[y];
  }
  f.resize(w);
  d.resize(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) f[x] = sq[y * w + x];
    edt_1d(f, d, v, z);
    for (std::size_t x = 0; x < w; ++x) sq[y * w + x] = d[x];
  }
  std::vector<double> out(w * h);
  for (std::size_t i = 0; i < w * h; ++i) out[i] = std::sqrt(sq[i]) * grid.resolution();
  return out;
}

}  // namespace conbat::sim
