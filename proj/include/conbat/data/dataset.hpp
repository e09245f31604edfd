#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace conbat::data {

enum class EnvKind { f110, mushr };
enum class Label : std::uint8_t { safe, unsafe };
enum class StepTag : std::uint8_t { safe = 0, unsafe = 1, unlabeled = 2 };

std::string env_name(EnvKind env);
EnvKind parse_env(const std::string& name);

/// One demonstration. Row t holds the observation at step t and the action
/// taken from it. A crashed trajectory ends with the crash state, whose
/// action slot repeats the previous action.
struct Trajectory {
  std::uint32_t id = 0;
  std::vector<float> observations;  // length x obs_dim
  std::vector<float> actions;       // length x act_dim
  std::vector<float> positions;     // length x 2, world xy
  bool crashed = false;
  Label label = Label::safe;
  /// Per-step unsafe events. Empty means "the crash, if any": the final
  /// step of a crashed trajectory is the only event.
  std::vector<std::uint8_t> events;

  std::size_t length(std::size_t obs_dim) const { return obs_dim ? observations.size() / obs_dim : 0; }
  bool has_event(std::size_t step, std::size_t len) const;
};

struct TrajectorySet {
  EnvKind env = EnvKind::f110;
  std::string source;  // track or map name
  std::size_t obs_dim = 0;
  std::size_t act_dim = 0;
  std::uint64_t seed = 0;
  std::string safety_concept = "collision";
  std::vector<Trajectory> trajectories;

  std::size_t length(std::size_t i) const { return trajectories.at(i).length(obs_dim); }
  std::size_t count(Label label) const;
  /// Throws DataError on inconsistent sizes or labels.
  void validate() const;
};

/// dataset.json plus one traj_<id>.bin per trajectory.
void write_dataset(const TrajectorySet& set, const std::filesystem::path& dir);
TrajectorySet read_dataset(const std::filesystem::path& dir);

struct LabeledStateSet {
  std::vector<std::vector<StepTag>> tags;  // per trajectory, per step
  std::size_t n_safe = 0;
  std::size_t n_unsafe = 0;
  std::size_t n_unlabeled = 0;
};

/// For an unsafe event at step u the state at u is unsafe and the 2T-1
/// states before it are unlabeled; every other state is safe.
LabeledStateSet build_safe_sets(const TrajectorySet& set, std::size_t context);

struct WindowRef {
  std::uint32_t traj = 0;
  std::uint32_t start = 0;
  std::uint32_t length = 0;
};

struct WindowOptions {
  std::size_t context = 16;
  bool prefixes = false;  // also emit windows [0, n) for n < context
  std::size_t stride = 1; // distance between full-window starts; the last window is always kept
};

/// Full windows start at 0, stride, ... and always at L-T; a trajectory shorter than T yields one
/// short window covering it. Order is trajectory then start.
std::vector<WindowRef> enumerate_windows(const TrajectorySet& set, const WindowOptions& opts,
                                         std::span<const std::uint32_t> trajectory_ids);
std::vector<WindowRef> enumerate_windows(const TrajectorySet& set, const WindowOptions& opts);

/// Zero-padded view of one window.
struct WindowSample {
  WindowRef ref;
  std::size_t valid = 0;       // unpadded steps
  std::vector<float> obs;      // context x obs_dim
  std::vector<float> actions;  // context x act_dim
  std::vector<StepTag> tags;   // context (padding marked unlabeled)
  std::vector<float> next_obs; // obs_dim; observation after the last valid step
  bool has_next = false;       // next_obs exists in the trajectory
};

WindowSample make_window(const TrajectorySet& set, const LabeledStateSet* labels, const WindowRef& ref,
                         std::size_t context);

/// Shuffled batches over a fixed window list; each epoch reshuffles from
/// (seed, epoch) so batch order is reproducible.
class WindowIterator {
 public:
  WindowIterator(std::vector<WindowRef> windows, std::size_t batch_size, std::uint64_t seed);

  void start_epoch(std::uint64_t epoch);
  /// False once the epoch is exhausted.
  bool next(std::vector<WindowRef>& batch);
  std::size_t size() const { return windows_.size(); }
  std::size_t batches_per_epoch() const;

 private:
  std::vector<WindowRef> windows_;
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t cursor_ = 0;
};

/// Per-step tagging rule used to define a new safety concept.
struct RelabelRule {
  enum class Kind { identity, all_safe, always_unsafe, action_run } kind = Kind::identity;
  std::size_t run_length = 10;  // action_run: minimum run of near-zero actions
  double epsilon = 0.02;        // action_run: |action| below this counts as straight
  bool keep_collisions = true;  // action_run: crash terminals stay unsafe
  std::string name = "identity";
};

RelabelRule not_straight_rule(std::size_t k = 10, double epsilon = 0.02);
/// JSON rule file: {"rule": "identity"|"all_safe"|"always_unsafe"|"action_run", ...}.
RelabelRule load_rule(const std::filesystem::path& path);
RelabelRule parse_rule(const std::string& json_text);

/// Events for one trajectory under a rule.
std::vector<std::uint8_t> rule_events(const RelabelRule& rule, const Trajectory& traj, std::size_t obs_dim,
                                      std::size_t act_dim);

/// Copies the set with new per-step events; observations and actions are untouched.
TrajectorySet relabel(const TrajectorySet& set, const RelabelRule& rule);

}  // namespace conbat::data
