#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "conbat/autodiff/grad_check.hpp"
#include "conbat/common/error.hpp"
#include "conbat/common/rng.hpp"
#include "conbat/train/trainer.hpp"
#include "fixtures.hpp"
#include "model_checks.hpp"
#include "temp_dir.hpp"

namespace {

using namespace conbat;
using namespace conbat::train;
using ad::Tensor;
using ad::Var;
using data::StepTag;

model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.d_embed = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.seq_len = 4;
  c.mlp_hidden = 16;
  c.world_hidden = 8;
  c.cbf_units = 8;
  return c;
}

struct Scores {
  std::vector<double> current, future;
};

CbcTerms eval_cbc(ad::Tape<double>& tape, const Scores& s, const CbcLayout& layout, const TrainConfig& cfg) {
  const auto n = s.current.size();
  const Var c = tape.constant(Tensor<double>(ad::Shape{n, 1}, s.current));
  const Var f = tape.constant(Tensor<double>(ad::Shape{n, 1}, s.future));
  return cbc_losses(tape, c, f, layout, cfg);
}

double value(ad::Tape<double>& tape, Var v) { return tape.value(v).item(); }

TEST(CbcLosses, MarginHingeIsZeroAtTheMargins) {
  ad::Tape<double> tape;
  const CbcLayout layout{{StepTag::safe, StepTag::safe, StepTag::unsafe}, {}};
  const auto t = eval_cbc(tape, {{1.0, 1.0, -1.0}, {0.0, 0.0, 0.0}}, layout, TrainConfig{});
  EXPECT_EQ(value(tape, t.l_c), 0.0);
  EXPECT_FALSE(t.unsafe_missing);
}

TEST(CbcLosses, PerSetMeansIgnoreClassImbalance) {
  ad::Tape<double> tape;
  // Every row scores 0, so each set's hinge mean is gamma regardless of its size.
  const CbcLayout layout{{StepTag::safe, StepTag::safe, StepTag::safe, StepTag::unsafe, StepTag::unlabeled}, {}};
  const auto t = eval_cbc(tape, {{0, 0, 0, 0, 0}, {0, 0, 0, 0, 0}}, layout, TrainConfig{});
  EXPECT_DOUBLE_EQ(value(tape, t.l_c), 2.0);
}

TEST(CbcLosses, MissingUnsafeRowsDropThatHalf) {
  ad::Tape<double> tape;
  const CbcLayout layout{{StepTag::safe, StepTag::safe}, {{0, 1}}};
  const auto t = eval_cbc(tape, {{0.5, 0.5}, {0.5, 0.5}}, layout, TrainConfig{});
  EXPECT_TRUE(t.unsafe_missing);
  EXPECT_DOUBLE_EQ(value(tape, t.l_c), 0.5);
}

TEST(CbcLosses, DecayAnchors) {
  TrainConfig cfg;
  {
    ad::Tape<double> tape;
    const CbcLayout layout{{StepTag::safe, StepTag::safe, StepTag::safe}, {{0, 1}, {1, 2}}};
    EXPECT_EQ(value(tape, eval_cbc(tape, {{2, 2, 2}, {2, 2, 2}}, layout, cfg).l_s), 0.0);
  }
  {
    ad::Tape<double> tape;
    const CbcLayout layout{{StepTag::safe, StepTag::safe}, {{0, 1}}};
    EXPECT_NEAR(value(tape, eval_cbc(tape, {{1.0, 0.5}, {0, 0}}, layout, cfg).l_s), 0.4, 1e-12);
  }
}

TEST(CbcLosses, RisingScoresNeverCostDecayLoss) {
  Rng rng(3);
  TrainConfig cfg;
  for (int trial = 0; trial < 50; ++trial) {
    ad::Tape<double> tape;
    const double a = rng.uniform(-2.0, 2.0);
    const double b = std::abs(a) + rng.uniform(0.0, 2.0);  // b >= a and b >= (1 - alpha) a
    const CbcLayout layout{{StepTag::safe, StepTag::safe}, {{0, 1}}};
    EXPECT_EQ(value(tape, eval_cbc(tape, {{a, b}, {0, 0}}, layout, cfg).l_s), 0.0);
  }
}

TEST(CbcLosses, DecayUsesOnlySafePairsAndConsistencyUsesAll) {
  ad::Tape<double> tape;
  const CbcLayout layout{{StepTag::safe, StepTag::unsafe, StepTag::safe}, {{0, 1}, {1, 2}}};
  const auto t = eval_cbc(tape, {{1.0, -3.0, 0.0}, {0.0, 1.0, 0.0}}, layout, TrainConfig{});
  EXPECT_EQ(value(tape, t.l_s), 0.0);
  // |future_0 - current_1| = 3, |future_1 - current_2| = 1.
  EXPECT_DOUBLE_EQ(value(tape, t.l_f), 2.0);
}

TEST(CbcLosses, TotalIsWeightedSum) {
  ad::Tape<double> tape;
  TrainConfig cfg;
  cfg.lambda_c = 0.5;
  cfg.lambda_s = 5.0;
  cfg.lambda_f = 2.0;
  const CbcLayout layout{{StepTag::safe, StepTag::safe, StepTag::unsafe}, {{0, 1}, {1, 2}}};
  const auto t = eval_cbc(tape, {{0.3, -0.2, 0.4}, {0.1, -0.5, 0.2}}, layout, cfg);
  const double expect = 0.5 * value(tape, t.l_c) + 5.0 * value(tape, t.l_s) + 2.0 * value(tape, t.l_f);
  EXPECT_NEAR(value(tape, t.total), expect, 1e-12);
}

TEST(CbcLosses, NonNegativeOnRandomBatches) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(10);
    Scores s;
    CbcLayout layout;
    for (std::size_t r = 0; r < n; ++r) {
      s.current.push_back(rng.uniform(-3.0, 3.0));
      s.future.push_back(rng.uniform(-3.0, 3.0));
      layout.tags.push_back(static_cast<StepTag>(rng.uniform_index(3)));
      if (r + 1 < n) layout.pairs.emplace_back(r, r + 1);
    }
    ad::Tape<double> tape;
    const auto t = eval_cbc(tape, s, layout, TrainConfig{});
    EXPECT_GE(value(tape, t.l_c), 0.0);
    EXPECT_GE(value(tape, t.l_s), 0.0);
    EXPECT_GE(value(tape, t.l_f), 0.0);
  }
}

TEST(CbcLosses, GradientMatchesFiniteDifferences) {
  // Two windows of two steps; scores kept away from the hinge kinks.
  const CbcLayout layout{{StepTag::safe, StepTag::safe, StepTag::unsafe, StepTag::safe}, {{0, 1}, {2, 3}}};
  const Tensor<double> x(ad::Shape{4, 2}, {0.4, 0.7, 0.1, -0.3, -0.6, 0.5, 0.9, 0.2});
  const TrainConfig cfg;
  auto loss = [&](ad::Tape<double>& tape, Var v) {
    const Var c = tape.slice(v, 1, 0, 1);
    const Var f = tape.slice(v, 1, 1, 1);
    return cbc_losses(tape, c, f, layout, cfg).total;
  };
  EXPECT_LT(ad::grad_check(loss, x, 1e-6), 1e-4);
}

TEST(CbcLosses, ShapeErrors) {
  ad::Tape<double> tape;
  const CbcLayout layout{{StepTag::safe}, {{0, 1}}};
  EXPECT_THROW(eval_cbc(tape, {{1.0}, {1.0}}, layout, TrainConfig{}), ShapeError);
  const CbcLayout short_tags{{StepTag::safe}, {}};
  EXPECT_THROW(eval_cbc(tape, {{1.0, 2.0}, {1.0, 2.0}}, short_tags, TrainConfig{}), ShapeError);
}

// One-step window with a constant policy (0.3 against target 0.1) and a
// world model whose output misses the zero next-state token by 0.2 on one channel.
struct OneStep {
  model::ModelConfig cfg = tiny_config();
  model::ParamSet<double> params;
  data::WindowSample w;

  explicit OneStep(double policy_out, double world_err) {
    params = model::init_params(cfg, 1).cast<double>();
    auto zero = [&](const char* name) {
      for (auto& v : params.get(name).storage()) v = 0.0;
    };
    zero("policy.w");
    params.get("policy.b").storage()[0] = policy_out;
    zero("tok_state.w");
    zero("tok_state.b");
    zero("world.fc2.w");
    zero("world.fc2.b");
    params.get("world.fc2.b").storage()[0] = world_err;
    w.valid = 1;
    w.obs = {0.5f, -0.2f};
    w.actions = {0.1f};
    w.tags = {StepTag::safe};
    w.next_obs = {0.4f, 0.1f};
    w.has_next = true;
  }

  std::pair<double, double> loss(bool use_policy) {
    ad::Tape<double> tape;
    model::Binder<double> b(tape, params);
    const auto t = phase1_window_loss(b, cfg, w, use_policy, 1.0, 1.0);
    return {tape.value(t.total).item(), tape.value(t.policy).item()};
  }
};

TEST(Phase1Loss, HandArithmetic) {
  OneStep s(0.3, 0.2);
  EXPECT_NEAR(s.loss(true).first, 0.24, 1e-6);
}

TEST(Phase1Loss, PerfectPredictionIsZero) {
  OneStep s(0.1, 0.0);
  EXPECT_NEAR(s.loss(true).first, 0.0, 1e-7);
}

TEST(Phase1Loss, UnsafeStepsFeedOnlyTheWorldModel) {
  OneStep s(0.3, 0.2);
  const auto [total, policy] = s.loss(false);
  EXPECT_EQ(policy, 0.0);
  EXPECT_NEAR(total, 0.04, 1e-6);
  EXPECT_EQ(phase1_rows(s.cfg, s.w, false).first, 0u);
}

TEST(Phase1Loss, NoWorldTermWithoutWorldModel) {
  OneStep s(0.3, 0.2);
  auto cfg = s.cfg;
  cfg.variant = model::CriticVariant::nw;
  EXPECT_EQ(phase1_rows(cfg, s.w, true), (std::pair<std::size_t, std::size_t>{1, 0}));
}

TEST(TrainConfig, ValidationAndJson) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.gamma = 0.0;
  EXPECT_THROW(bad.validate(), UsageError);
  bad = c;
  bad.alpha = 1.0;
  EXPECT_THROW(bad.validate(), UsageError);
  bad = c;
  bad.lambda_s = -1.0;
  EXPECT_THROW(bad.validate(), UsageError);
  bad = c;
  bad.unsafe_fraction_used = 0.0;
  EXPECT_THROW(bad.validate(), UsageError);
  c.lambda_s = 0.0;
  c.seed = 42;
  EXPECT_NO_THROW(c.validate());
  const auto back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.lambda_s, 0.0);
  EXPECT_EQ(back.seed, 42u);
  EXPECT_THROW(TrainConfig::from_json(nlohmann::json{{"lamda_s", 1.0}}), UsageError);
}

TEST(Phase2Subsample, ReproducibleAndSized) {
  const auto set = check::synthetic_set(200, 5, 0.3, 4);
  std::size_t n_unsafe = 0;
  for (const auto& t : set.trajectories) n_unsafe += t.label == data::Label::unsafe;
  const auto a = phase2_trajectories(set, 0.05, 9);
  EXPECT_EQ(a, phase2_trajectories(set, 0.05, 9));
  std::size_t kept = 0;
  for (auto id : a) kept += set.trajectories[id].label == data::Label::unsafe;
  EXPECT_EQ(kept, static_cast<std::size_t>(std::llround(0.05 * static_cast<double>(n_unsafe))));
  EXPECT_EQ(a.size(), set.trajectories.size() - n_unsafe + kept);
  EXPECT_EQ(phase2_trajectories(set, 1.0, 9).size(), set.trajectories.size());
}

class TinyTraining : public ::testing::Test {
 protected:
  static TrainConfig config() {
    TrainConfig c;
    c.batch_size = 8;
    c.epochs_phase1 = 1;
    c.epochs_phase2 = 2;
    c.optimizer.lr = 1e-3;
    c.seed = 5;
    return c;
  }
  data::TrajectorySet set = check::synthetic_set(12, 10, 0.4, 21);
};

TEST_F(TinyTraining, Phase1IsDeterministicAndRecordsFrozenCritics) {
  const auto a = train_phase1(set, tiny_config(), config());
  const auto b = train_phase1(set, tiny_config(), config());
  EXPECT_TRUE(a.checkpoint.params == b.checkpoint.params);
  EXPECT_EQ(a.checkpoint.phase, 1);
  EXPECT_TRUE(a.checkpoint.is_frozen(model::ParamGroup::critic));
  ASSERT_EQ(a.curve.size(), 1u);
  EXPECT_TRUE(std::isfinite(a.curve[0].total));
  EXPECT_GT(a.windows, 0u);
}

TEST_F(TinyTraining, Phase2LeavesBaseTensorsBitIdentical) {
  const auto p1 = train_phase1(set, tiny_config(), config());
  const auto p2 = train_phase2(set, p1.checkpoint, config());
  const auto& before = p1.checkpoint.params;
  const auto& after = p2.checkpoint.params;
  bool critic_moved = false;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto g = model::param_group(before.name(i));
    if (g == model::ParamGroup::critic || g == model::ParamGroup::critic_future) {
      critic_moved |= !(before.tensor(i).storage() == after.tensor(i).storage());
    } else {
      EXPECT_EQ(before.tensor(i).storage(), after.tensor(i).storage()) << before.name(i);
    }
  }
  EXPECT_TRUE(critic_moved);
  EXPECT_EQ(p2.checkpoint.phase, 2);
  EXPECT_TRUE(p2.checkpoint.is_frozen(model::ParamGroup::backbone));
  ASSERT_EQ(p2.curve.size(), 2u);
  for (const auto& r : p2.curve) {
    EXPECT_EQ(r.phase, 2);
    EXPECT_GE(r.l_c, 0.0);
    EXPECT_GE(r.l_s, 0.0);
    EXPECT_GE(r.l_f, 0.0);
  }
}

TEST_F(TinyTraining, NoSmoothnessWeightIsAcceptedAndRecorded) {
  auto cfg = config();
  cfg.lambda_s = 0.0;
  const auto p1 = train_phase1(set, tiny_config(), config());
  const auto p2 = train_phase2(set, p1.checkpoint, cfg);
  EXPECT_EQ(p2.checkpoint.info.at("phase2").at("train").at("lambda_s").get<double>(), 0.0);
}

TEST_F(TinyTraining, DivergenceAndNonFiniteDataAbort) {
  auto cfg = config();
  cfg.divergence_limit = 1e-9;
  EXPECT_THROW(train_phase1(set, tiny_config(), cfg), NumericError);
  auto broken = set;
  broken.trajectories[0].observations[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(train_phase1(broken, tiny_config(), config()), DataError);
  cfg = config();
  cfg.optimizer.kind = ad::OptimizerKind::sgd;
  cfg.optimizer.lr = 1e30;
  cfg.epochs_phase1 = 3;
  EXPECT_THROW(train_phase1(set, tiny_config(), cfg), NumericError);
}

TEST_F(TinyTraining, Phase2NeedsMatchingPhase1Checkpoint) {
  auto p1 = train_phase1(set, tiny_config(), config());
  auto other = set;
  other.obs_dim = 3;
  EXPECT_THROW(train_phase2(other, p1.checkpoint, config()), DataError);
}

TEST_F(TinyTraining, LossCurveCsv) {
  const auto p1 = train_phase1(set, tiny_config(), config());
  check::TempDir dir("train");
  const auto path = dir / "losses.csv";
  write_losses_csv(p1.curve, path);
  const auto text = check::read_file(path);
  EXPECT_EQ(text.substr(0, text.find('\n')), "phase,epoch,total,policy,world,l_c,l_s,l_f,batches,batches_without_unsafe");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
}

}  // namespace
