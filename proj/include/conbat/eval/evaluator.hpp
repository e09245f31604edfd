#pragma once

#include <cstddef>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "conbat/data/dataset.hpp"
#include "conbat/deploy/deployer.hpp"
#include "conbat/model/model.hpp"

namespace conbat::eval {

struct MetricSummary {
  double collision_rate = 0.0;  // percent of episodes ending in a crash
  double atl = 0.0;             // mean steps survived
  std::size_t n_episodes = 0;
  std::size_t max_steps = 0;
  double runtime_s = 0.0;       // summed over episodes

  nlohmann::ordered_json to_json() const;
};

/// Throws UsageError on an empty report list.
MetricSummary summarize(const std::vector<deploy::RolloutReport>& reports);

void write_metrics_json(const MetricSummary& m, const std::filesystem::path& path);

struct Histogram {
  std::size_t bin_width = 1;
  std::vector<std::size_t> counts;  // bin k covers [k * width, (k + 1) * width)

  std::size_t total() const;
};

/// Bins of trajectory length covering [0, max_steps]; max_steps is the
/// largest over the reports. Throws UsageError when bin_width is 0.
Histogram histogram(const std::vector<deploy::RolloutReport>& reports, std::size_t bin_width);

/// One count column per labelled histogram; shorter ones are padded with 0.
/// All must share a bin width.
void write_histogram_csv(const std::vector<std::pair<std::string, Histogram>>& columns,
                         const std::filesystem::path& path);

/// Fraction of applied actions with every component below `threshold` in magnitude.
double near_zero_action_fraction(const std::vector<deploy::RolloutReport>& reports, double threshold);

struct Bounds {
  double min_x = 0.0, min_y = 0.0, max_x = 0.0, max_y = 0.0;
};

/// Extent of the track (centerline plus width) or map.
Bounds env_bounds(data::EnvKind env, const std::string& source);

struct CriticSample {
  double x = 0.0, y = 0.0, value = 0.0;
};

/// Current-critic value at every step of every trajectory. Steps are
/// encoded in consecutive chunks of the context length.
std::vector<CriticSample> critic_samples(const model::Checkpoint& m, const data::TrajectorySet& set);

struct CbfMapConfig {
  double resolution = 0.25;  // cell size in meters
  double radius = 1.0;       // samples farther than this do not reach a cell
};

struct CbfCell {
  double x = 0.0, y = 0.0;      // cell center
  std::optional<double> value;  // empty when no sample is within the radius
  std::size_t sample_count = 0;
};

/// Inverse-distance (1/d^2) interpolation onto a regular grid over `bounds`.
std::vector<CbfCell> interpolate_map(const std::vector<CriticSample>& samples, const Bounds& bounds,
                                     const CbfMapConfig& cfg);

/// Header `x,y,value,sample_count`; empty cells have an empty value field.
void write_cbf_map_csv(const std::vector<CbfCell>& cells, const std::filesystem::path& path);

}  // namespace conbat::eval
