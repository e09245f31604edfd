#include "conbat/eval/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "conbat/common/error.hpp"
#include "conbat/common/parallel.hpp"
#include "conbat/sim/f110.hpp"
#include "conbat/sim/mushr.hpp"

namespace conbat::eval {

using ad::Tensor;
using ad::Var;

nlohmann::ordered_json MetricSummary::to_json() const {
  nlohmann::ordered_json j;
  j["collision_rate"] = collision_rate;
  j["atl"] = atl;
  j["n_episodes"] = n_episodes;
  j["max_steps"] = max_steps;
  j["runtime_s"] = runtime_s;
  return j;
}

MetricSummary summarize(const std::vector<deploy::RolloutReport>& reports) {
  if (reports.empty()) throw UsageError("summarize: no episodes");
  MetricSummary m;
  m.n_episodes = reports.size();
  std::size_t crashed = 0, steps = 0;
  for (const auto& r : reports) {
    crashed += r.crashed;
    steps += r.steps_survived;
    m.max_steps = std::max(m.max_steps, r.max_steps);
    m.runtime_s += r.runtime_s;
  }
  const double n = static_cast<double>(reports.size());
  m.collision_rate = 100.0 * static_cast<double>(crashed) / n;
  m.atl = static_cast<double>(steps) / n;
  return m;
}

void write_metrics_json(const MetricSummary& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << m.to_json().dump(2) << '\n';
}

std::size_t Histogram::total() const {
  std::size_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

Histogram histogram(const std::vector<deploy::RolloutReport>& reports, std::size_t bin_width) {
  if (bin_width < 1) throw UsageError("histogram: bin width must be >= 1");
  std::size_t max_steps = 0;
  for (const auto& r : reports) max_steps = std::max({max_steps, r.max_steps, r.steps_survived});
  Histogram h;
  h.bin_width = bin_width;
  h.counts.assign(max_steps / bin_width + 1, 0);
  for (const auto& r : reports) ++h.counts[r.steps_survived / bin_width];
  return h;
}

void write_histogram_csv(const std::vector<std::pair<std::string, Histogram>>& columns,
                         const std::filesystem::path& path) {
  if (columns.empty()) throw UsageError("histogram csv: no columns");
  const std::size_t width = columns.front().second.bin_width;
  std::size_t bins = 0;
  for (const auto& [label, h] : columns) {
    if (h.bin_width != width) throw UsageError("histogram csv: bin widths differ");
    bins = std::max(bins, h.counts.size());
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "bin_start,bin_end";
  for (const auto& [label, h] : columns) out << ',' << label;
  out << '\n';
  for (std::size_t k = 0; k < bins; ++k) {
    out << k * width << ',' << (k + 1) * width;
    for (const auto& [label, h] : columns) out << ',' << (k < h.counts.size() ? h.counts[k] : 0);
    out << '\n';
  }
}

double near_zero_action_fraction(const std::vector<deploy::RolloutReport>& reports, double threshold) {
  std::size_t hits = 0, total = 0;
  for (const auto& r : reports) {
    for (const auto& s : r.steps) {
      ++total;
      hits += std::all_of(s.applied.begin(), s.applied.end(), [&](float a) { return std::abs(a) < threshold; });
    }
  }
  if (total == 0) throw UsageError("no recorded steps; enable the per-step trace");
  return static_cast<double>(hits) / static_cast<double>(total);
}

Bounds env_bounds(data::EnvKind env, const std::string& source) {
  Bounds b;
  if (env == data::EnvKind::f110) {
    const auto track = sim::resolve_track(source.empty() ? "playground" : source);
    const auto& pts = track.centerline();
    b = {pts[0].x, pts[0].y, pts[0].x, pts[0].y};
    for (const auto& p : pts) {
      b.min_x = std::min(b.min_x, p.x);
      b.min_y = std::min(b.min_y, p.y);
      b.max_x = std::max(b.max_x, p.x);
      b.max_y = std::max(b.max_y, p.y);
    }
    const double w = track.half_width();
    return {b.min_x - w, b.min_y - w, b.max_x + w, b.max_y + w};
  }
  const auto grid = sim::resolve_map(source.empty() ? "office" : source);
  const auto o = grid.origin();
  return {o.x, o.y, o.x + static_cast<double>(grid.width()) * grid.resolution(),
          o.y + static_cast<double>(grid.height()) * grid.resolution()};
}

std::vector<CriticSample> critic_samples(const model::Checkpoint& m, const data::TrajectorySet& set) {
  const auto& cfg = m.config;
  if (set.obs_dim != cfg.obs_dim || set.act_dim != cfg.act_dim) {
    throw DataError("cbf map: dataset dims do not match the model");
  }
  std::vector<std::vector<CriticSample>> per_traj(set.trajectories.size());
  parallel_for(set.trajectories.size(), [&](std::size_t i) {
    const auto& t = set.trajectories[i];
    const std::size_t len = t.length(set.obs_dim);
    for (std::size_t start = 0; start < len; start += cfg.seq_len) {
      const std::size_t n = std::min(cfg.seq_len, len - start);
      ad::Tape<float> tape;
      model::Binder<float> b(tape, m.params, [](model::ParamGroup) { return false; });
      const auto rows = [&](const std::vector<float>& src, std::size_t dim) {
        const auto first = src.begin() + static_cast<std::ptrdiff_t>(start * dim);
        return tape.constant(Tensor<float>(ad::Shape{n, dim}, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(n * dim))));
      };
      const auto e = model::encode(b, cfg, rows(t.observations, cfg.obs_dim), rows(t.actions, cfg.act_dim));
      const auto& c = tape.value(model::critic_head(b, cfg, e.state_emb));
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t s = start + r;
        per_traj[i].push_back({t.positions[2 * s], t.positions[2 * s + 1], static_cast<double>(c[r])});
      }
    }
  });
  std::vector<CriticSample> out;
  for (auto& v : per_traj) out.insert(out.end(), v.begin(), v.end());
  return out;
}

std::vector<CbfCell> interpolate_map(const std::vector<CriticSample>& samples, const Bounds& bounds,
                                     const CbfMapConfig& cfg) {
  if (!(cfg.resolution > 0.0) || !(cfg.radius > 0.0)) throw UsageError("cbf map: resolution and radius must be > 0");
  if (!(bounds.max_x > bounds.min_x) || !(bounds.max_y > bounds.min_y)) throw UsageError("cbf map: empty bounds");
  const auto nx = static_cast<std::size_t>(std::ceil((bounds.max_x - bounds.min_x) / cfg.resolution));
  const auto ny = static_cast<std::size_t>(std::ceil((bounds.max_y - bounds.min_y) / cfg.resolution));

  // Buckets one radius wide, so a cell only looks at its 3 x 3 neighborhood.
  std::map<std::pair<long long, long long>, std::vector<std::size_t>> buckets;
  auto bucket_of = [&](double x, double y) {
    return std::pair{static_cast<long long>(std::floor((x - bounds.min_x) / cfg.radius)),
                     static_cast<long long>(std::floor((y - bounds.min_y) / cfg.radius))};
  };
  for (std::size_t i = 0; i < samples.size(); ++i) buckets[bucket_of(samples[i].x, samples[i].y)].push_back(i);

  std::vector<CbfCell> cells;
  cells.reserve(nx * ny);
  const double r2 = cfg.radius * cfg.radius;
  for (std::size_t iy = 0; iy < ny; ++iy) {
    for (std::size_t ix = 0; ix < nx; ++ix) {
      CbfCell cell;
      cell.x = bounds.min_x + (static_cast<double>(ix) + 0.5) * cfg.resolution;
      cell.y = bounds.min_y + (static_cast<double>(iy) + 0.5) * cfg.resolution;
      const auto [bx, by] = bucket_of(cell.x, cell.y);
      double wsum = 0.0, vsum = 0.0, exact_sum = 0.0;
      std::size_t exact = 0;
      for (long long dy = -1; dy <= 1; ++dy) {
        for (long long dx = -1; dx <= 1; ++dx) {
          const auto it = buckets.find({bx + dx, by + dy});
          if (it == buckets.end()) continue;
          for (auto i : it->second) {
            const double ex = samples[i].x - cell.x, ey = samples[i].y - cell.y;
            const double d2 = ex * ex + ey * ey;
            if (d2 > r2) continue;
            ++cell.sample_count;
            if (d2 < 1e-18) {
              ++exact;
              exact_sum += samples[i].value;
            } else {
              wsum += 1.0 / d2;
              vsum += samples[i].value / d2;
            }
          }
        }
      }
      if (exact > 0) {
        cell.value = exact_sum / static_cast<double>(exact);
      } else if (cell.sample_count > 0) {
        cell.value = vsum / wsum;
      }
      cells.push_back(cell);
    }
  }
  return cells;
}

void write_cbf_map_csv(const std::vector<CbfCell>& cells, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(9);
  out << "x,y,value,sample_count\n";
  for (const auto& c : cells) {
    out << c.x << ',' << c.y << ',';
    if (c.value) out << *c.value;
    out << ',' << c.sample_count << '\n';
  }
}

}  // namespace conbat::eval
