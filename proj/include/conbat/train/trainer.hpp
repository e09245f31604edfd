#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "conbat/autodiff/optimizer.hpp"
#include "conbat/autodiff/tape.hpp"
#include "conbat/data/dataset.hpp"
#include "conbat/model/model.hpp"

namespace conbat::train {

struct TrainConfig {
  std::size_t batch_size = 32;
  ad::OptimizerConfig optimizer{};  // adam, lr 1e-4
  std::size_t epochs_phase1 = 10;
  std::size_t epochs_phase2 = 10;
  double gamma = 1.0;  // margin of the classification hinge
  double alpha = 0.1;  // allowed per-step decay of the score
  double lambda_c = 1.0;
  double lambda_s = 5.0;
  double lambda_f = 1.0;
  bool include_unsafe_in_phase1 = true;  // unsafe runs feed the world model only
  double unsafe_fraction_used = 1.0;     // share of unsafe trajectories kept for phase 2
  double unsafe_batch_share = 0.25;      // phase 2: extra windows per batch drawn from those with unsafe rows
  std::size_t window_stride = 1;
  std::uint64_t seed = 0;
  double divergence_limit = 1e6;

  /// Throws UsageError.
  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Missing keys keep the values already in `base`; unknown keys raise UsageError.
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
  static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }
};

/// One row of losses.csv.
struct EpochRecord {
  int phase = 1;
  std::size_t epoch = 0;
  double total = 0.0;
  double policy = 0.0;  // phase 1
  double world = 0.0;   // phase 1
  double l_c = 0.0;     // phase 2
  double l_s = 0.0;     // phase 2
  double l_f = 0.0;     // phase 2
  std::size_t batches = 0;
  std::size_t batches_without_unsafe = 0;  // phase 2: unsafe hinge term was defined as 0
};

struct TrainResult {
  model::Checkpoint checkpoint;
  std::vector<EpochRecord> curve;
  std::size_t windows = 0;
};

using ProgressFn = std::function<void(const EpochRecord&)>;

/// Policy, tokenizers, transformer and world model from scratch.
TrainResult train_phase1(const data::TrajectorySet& set, const model::ModelConfig& model_cfg, const TrainConfig& cfg,
                         const ProgressFn& progress = {});

/// Critics only, on top of a phase-1 checkpoint whose other tensors stay
/// bit-identical.
TrainResult train_phase2(const data::TrajectorySet& set, const model::Checkpoint& base, const TrainConfig& cfg,
                         const ProgressFn& progress = {});

void write_losses_csv(const std::vector<EpochRecord>& curve, const std::filesystem::path& path);

/// Trajectory ids used by phase 2: every safe trajectory plus a seeded
/// subsample of round(fraction * n_unsafe) unsafe ones (at least one when
/// the fraction is positive and any exist).
std::vector<std::uint32_t> phase2_trajectories(const data::TrajectorySet& set, double fraction, std::uint64_t seed);

/// Row layout of a stacked critic batch.
struct CbcLayout {
  std::vector<data::StepTag> tags;                             // per row
  std::vector<std::pair<std::size_t, std::size_t>> pairs;      // consecutive rows within one window
};

struct CbcTerms {
  ad::Var l_c, l_s, l_f, total;
  bool unsafe_missing = false;  // no unsafe rows; that half of l_c is 0
};

/// Control-barrier losses on per-row current scores [N, 1] and future
/// scores [N, 1]:
///   l_c: mean over safe rows of relu(gamma - c) + mean over unsafe rows of relu(gamma + c)
///   l_s: mean over pairs with both rows safe of relu((1 - alpha) c_t - c_t+1)
///   l_f: mean over all pairs of |future_t - c_t+1|
template <typename T>
CbcTerms cbc_losses(ad::Tape<T>& tape, ad::Var current, ad::Var future, const CbcLayout& layout,
                    const TrainConfig& cfg);

/// Phase-1 loss of one window: sum of |policy - action| over policy rows
/// divided by `policy_norm`, plus the squared norm of world-model error
/// over rows with a next state divided by `world_norm`. The next-state
/// target tokens are constants.
struct Phase1Terms {
  ad::Var policy, world, total;
  std::size_t policy_rows = 0;
  std::size_t world_rows = 0;
};

template <typename T>
Phase1Terms phase1_window_loss(model::Binder<T>& b, const model::ModelConfig& cfg, const data::WindowSample& w,
                               bool use_policy, double policy_norm, double world_norm);

/// Number of policy and world-model rows a window contributes.
std::pair<std::size_t, std::size_t> phase1_rows(const model::ModelConfig& cfg, const data::WindowSample& w,
                                                bool use_policy);

}  // namespace conbat::train
