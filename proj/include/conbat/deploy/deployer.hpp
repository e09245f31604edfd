#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "conbat/data/dataset.hpp"
#include "conbat/model/model.hpp"

namespace conbat::deploy {

struct DeployConfig {
  double eta = 0.2;           // rectify when the predicted next score is below this
  double opt_lr = 0.05;
  int opt_steps = 1;          // 0 disables rectification
  double lambda_delta = 0.1;  // weight of |delta a| in the rectification objective
  double rms_alpha = 0.99;
  double rms_eps = 1e-8;
  std::size_t max_steps = 300;
  std::size_t prompt_len = 4;  // expert steps fed before the model takes over
  bool record_trace = false;   // per-step trace in rollout.jsonl
  bool timing = false;         // wall-clock fields in rollout.jsonl

  void validate() const;
  nlohmann::ordered_json to_json() const;
};

/// One closed-loop environment instance. Not thread-safe; make one per rollout.
class Env {
 public:
  struct Step {
    std::vector<float> obs;
    bool crashed = false;
  };

  virtual ~Env() = default;
  virtual std::size_t obs_dim() const = 0;
  virtual std::size_t act_dim() const { return 1; }
  virtual double action_limit() const = 0;
  /// Seeded start; returns the first observation.
  virtual std::vector<float> reset(std::uint64_t seed) = 0;
  /// Safe expert action from the current state, used for the prompt.
  virtual std::vector<float> expert_action() = 0;
  virtual Step step(const std::vector<float>& action) = 0;
  virtual std::array<double, 2> position() const = 0;
};

/// Shared read-only resources (track, map, clearance field) behind cheap
/// per-rollout environments.
class EnvFactory {
 public:
  virtual ~EnvFactory() = default;
  virtual std::unique_ptr<Env> create() const = 0;
  virtual data::EnvKind kind() const = 0;
};

/// source: track/map name or file path; empty selects the built-in default.
std::unique_ptr<EnvFactory> make_env_factory(data::EnvKind kind, const std::string& source);

struct StepRecord {
  std::vector<float> proposed;
  std::vector<float> applied;
  double score_before = 0.0;  // predicted next score for the proposal
  double score_after = 0.0;   // same for the applied action
  bool optimized = false;
  bool fallback = false;      // non-finite gradient; proposal kept
  std::array<double, 2> position{};  // after the step
};

struct RolloutReport {
  std::uint64_t seed = 0;
  std::size_t steps_survived = 0;  // model-controlled steps, prompt excluded
  bool crashed = false;
  bool crashed_in_prompt = false;
  std::size_t max_steps = 0;
  std::size_t rectified = 0;
  std::size_t fallbacks = 0;
  double runtime_s = 0.0;
  std::vector<StepRecord> steps;
};

/// Sliding window of the most recent states and actions.
class Context {
 public:
  Context(std::size_t capacity, std::size_t obs_dim, std::size_t act_dim);

  /// Appends the current observation; its action slot is filled by commit().
  void observe(const std::vector<float>& obs);
  void commit(const std::vector<float>& action);

  std::size_t steps() const { return obs_.size() / obs_dim_; }
  /// Rows [steps, obs_dim] and [steps - 1, act_dim] (the pending action is not included).
  const std::vector<float>& obs() const { return obs_; }
  const std::vector<float>& actions() const { return actions_; }

 private:
  std::size_t capacity_, obs_dim_, act_dim_;
  std::vector<float> obs_;
  std::vector<float> actions_;
};

/// Policy proposal for the last state in the context, clipped to [-limit, limit].
std::vector<float> propose(const model::Checkpoint& m, const Context& ctx, double limit);

/// Predicted next-step score with `action` filled into the pending slot.
double future_score(const model::Checkpoint& m, const Context& ctx, const std::vector<float>& action);

struct Rectified {
  std::vector<float> action;
  double score_before = 0.0;
  double score_after = 0.0;
  bool optimized = false;
  bool fallback = false;
};

/// Identity when the proposal's score is at least eta (or opt_steps is 0);
/// otherwise RMSProp steps on delta a minimizing
/// lambda_delta * |delta a| + relu(eta - score(proposal + delta a)),
/// clipping the action to bounds after every step.
Rectified rectify(const model::Checkpoint& m, const Context& ctx, const std::vector<float>& proposal,
                  const DeployConfig& cfg, double limit);

/// max_steps 0 is accepted here and returns an empty report.
RolloutReport rollout(const EnvFactory& envs, const model::Checkpoint& m, const DeployConfig& cfg,
                      std::uint64_t seed);

/// Episodes seed, seed + 1, ... in parallel; output order follows seeds.
std::vector<RolloutReport> rollout_many(const EnvFactory& envs, const model::Checkpoint& m, const DeployConfig& cfg,
                                        std::uint64_t first_seed, std::size_t episodes);

nlohmann::ordered_json report_json(const RolloutReport& r, const DeployConfig& cfg);
void write_rollouts_jsonl(const std::vector<RolloutReport>& reports, const DeployConfig& cfg,
                          const std::filesystem::path& path);
/// Reads the fields written by write_rollouts_jsonl (trace included when present).
std::vector<RolloutReport> read_rollouts_jsonl(const std::filesystem::path& path);

}  // namespace conbat::deploy
