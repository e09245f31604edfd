#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "conbat/autodiff/grad_check.hpp"
#include "conbat/common/error.hpp"
#include "conbat/model/model.hpp"
#include "model_checks.hpp"
#include "temp_dir.hpp"

namespace {

using namespace conbat;
using namespace conbat::model;
using ad::Tensor;
using ad::Var;

ModelConfig f1_config(CriticVariant v = CriticVariant::ef) {
  ModelConfig c;
  c.obs_dim = 2;
  c.act_dim = 1;
  c.variant = v;
  return c;
}

TEST(ModelConfig, Validation) {
  auto c = f1_config();
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 7;
  EXPECT_THROW(c.validate(), UsageError);
  c = f1_config();
  c.seq_len = 0;
  EXPECT_THROW(c.validate(), UsageError);
}

TEST(ModelConfig, JsonRoundTripAndUnknownKey) {
  auto c = f1_config(CriticVariant::tf);
  c.obs_dim = 1440;
  const auto back = ModelConfig::from_json(c.to_json());
  EXPECT_EQ(back.obs_dim, 1440u);
  EXPECT_EQ(back.variant, CriticVariant::tf);
  auto j = c.to_json();
  j["dropout"] = 0.1;
  EXPECT_THROW(ModelConfig::from_json(j), DataError);
}

TEST(ModelConfig, VariantNames) {
  for (auto v : {CriticVariant::nw, CriticVariant::cw, CriticVariant::tf, CriticVariant::ef}) {
    EXPECT_EQ(parse_variant(variant_name(v)), v);
  }
  EXPECT_THROW(parse_variant("XX"), UsageError);
}

TEST(Params, CriticParameterCount) {
  const auto p = init_params(f1_config(), 1);
  const std::size_t weights = 64 * 128 + 128 * 128 + 128 * 1;
  const std::size_t biases = 128 + 128 + 1;
  EXPECT_EQ(p.numel(ParamGroup::critic), weights + biases);
  // The future critic reads two embeddings.
  EXPECT_EQ(p.numel(ParamGroup::critic_future), weights + 64 * 128 + biases);
}

TEST(Params, VariantsChangeNameSet) {
  EXPECT_FALSE(init_params(f1_config(CriticVariant::nw), 1).contains("world.fc1.w"));
  EXPECT_FALSE(init_params(f1_config(CriticVariant::cw), 1).contains("critic_future.out.w"));
  EXPECT_TRUE(init_params(f1_config(CriticVariant::tf), 1).contains("critic_future.out.w"));
}

TEST(Params, InitIsSeededAndBounded) {
  const auto a = init_params(f1_config(), 3);
  const auto b = init_params(f1_config(), 3);
  const auto c = init_params(f1_config(), 4);
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == c);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& name = a.name(i);
    for (float v : a.tensor(i).data()) {
      if (name.ends_with(".g")) EXPECT_EQ(v, 1.0f);
      else if (name.ends_with(".b")) EXPECT_EQ(v, 0.0f);
      else EXPECT_LE(std::abs(v), 0.04f + 1e-7f);
    }
  }
}

TEST(Params, ReinitGroupTouchesOnlyThatGroup) {
  const auto base = init_params(f1_config(), 3);
  auto p = base;
  reinit_group(p, f1_config(), ParamGroup::critic, 99);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (param_group(p.name(i)) != ParamGroup::critic) EXPECT_EQ(p.tensor(i), base.tensor(i)) << p.name(i);
  }
  EXPECT_FALSE(p.get("critic.fc1.w") == base.get("critic.fc1.w"));
}

TEST(Tokenize, ZeroObservationGivesBias) {
  const auto cfg = f1_config();
  auto p = check::random_params(cfg, 1).cast<double>();
  ad::Tape<double> tape;
  Binder<double> b(tape, p);
  const Var tok = tokenize_states(b, tape.constant(Tensor<double>({1, 2})));
  EXPECT_EQ(tape.value(tok).shape(), (ad::Shape{1, 64}));
  for (std::size_t c = 0; c < 64; ++c) EXPECT_EQ(tape.value(tok)[c], p.get("tok_state.b")[c]);
}

TEST(Tokenize, AffineInInput) {
  const auto cfg = f1_config();
  auto p = check::random_params(cfg, 2).cast<double>();
  ad::Tape<double> tape;
  Binder<double> b(tape, p);
  const Tensor<double> x({1, 2}, {0.3, -0.7});
  const Tensor<double> x2({1, 2}, {0.6, -1.4});
  const auto& t1 = tape.value(tokenize_states(b, tape.constant(x)));
  const auto& t2 = tape.value(tokenize_states(b, tape.constant(x2)));
  const auto& bias = p.get("tok_state.b");
  for (std::size_t c = 0; c < 64; ++c) EXPECT_NEAR(t2[c] - 2.0 * t1[c], -bias[c], 1e-12);
  const auto& ta = tape.value(tokenize_actions(b, tape.constant(Tensor<double>({1, 1}, {0.5}))));
  EXPECT_EQ(ta.shape(), (ad::Shape{1, 64}));
}

TEST(Tokenize, DimMismatchThrows) {
  const auto cfg = f1_config();
  const auto p = init_params(cfg, 1);
  ad::Tape<float> tape;
  Binder<float> b(tape, p);
  EXPECT_THROW(encode(b, cfg, tape.constant(Tensor<float>({4, 3})), tape.constant(Tensor<float>({4, 1}))),
               ShapeError);
  EXPECT_THROW(encode(b, cfg, tape.constant(Tensor<float>({4, 2})), tape.constant(Tensor<float>({4, 2}))),
               ShapeError);
}

TEST(Encode, FullWindowShapes) {
  const auto cfg = f1_config();
  const auto p = init_params(cfg, 1);
  ad::Tape<float> tape;
  Binder<float> b(tape, p);
  const auto e = encode(b, cfg, tape.constant(Tensor<float>({16, 2})), tape.constant(Tensor<float>({16, 1})));
  EXPECT_EQ(tape.value(e.hidden).shape(), (ad::Shape{32, 64}));
  EXPECT_EQ(tape.value(e.state_emb).shape(), (ad::Shape{16, 64}));
  EXPECT_EQ(tape.value(e.action_emb).shape(), (ad::Shape{16, 64}));
  EXPECT_EQ(tape.value(policy_head(b, e.state_emb)).shape(), (ad::Shape{16, 1}));
  EXPECT_EQ(tape.value(critic_head(b, cfg, e.state_emb)).shape(), (ad::Shape{16, 1}));
  const auto fut = future_critic_head(b, cfg, e.state_emb, e.action_emb, e.action_tokens);
  EXPECT_EQ(tape.value(fut).shape(), (ad::Shape{16, 1}));
}

TEST(Encode, SingleTokenAndOddLength) {
  const auto cfg = f1_config();
  const auto p = init_params(cfg, 1);
  ad::Tape<float> tape;
  Binder<float> b(tape, p);
  const auto one = encode_states_only(b, cfg, tape.constant(Tensor<float>({1, 2}, {0.1f, 0.2f})));
  EXPECT_EQ(tape.value(one.hidden).shape(), (ad::Shape{1, 64}));
  EXPECT_EQ(tape.value(policy_head(b, one.state_emb)).shape(), (ad::Shape{1, 1}));
  const auto odd = encode(b, cfg, tape.constant(Tensor<float>({5, 2})), tape.constant(Tensor<float>({4, 1})));
  EXPECT_EQ(tape.value(odd.hidden).shape(), (ad::Shape{9, 64}));
  const auto fut = future_critic_head(b, cfg, odd.state_emb, odd.action_emb, odd.action_tokens);
  EXPECT_EQ(tape.value(fut).shape(), (ad::Shape{4, 1}));
}

TEST(Encode, OverLengthThrows) {
  const auto cfg = f1_config();
  const auto p = init_params(cfg, 1);
  ad::Tape<float> tape;
  Binder<float> b(tape, p);
  EXPECT_THROW(encode(b, cfg, tape.constant(Tensor<float>({17, 2})), tape.constant(Tensor<float>({17, 1}))),
               ShapeError);
}

class Causality : public ::testing::TestWithParam<CriticVariant> {};

TEST_P(Causality, EarlierOutputsIgnoreLaterTokens) {
  const auto cfg = f1_config(GetParam());
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    EXPECT_LE(check::max_causality_violation(cfg, seed), 1e-6) << "seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllVariants, Causality,
                         ::testing::Values(CriticVariant::nw, CriticVariant::cw, CriticVariant::tf, CriticVariant::ef),
                         [](const auto& info) { return std::string(variant_name(info.param)); });

TEST(Causality, PerturbationReachesLaterOutputs) {
  const auto cfg = f1_config();
  Rng rng(5);
  const auto params = check::random_params(cfg, 5).cast<double>();
  const auto obs = check::random_matrix(16, 2, rng);
  const auto act = check::random_matrix(16, 1, rng);
  auto moved = obs;
  moved.at(3, 0) += 1.0;
  const auto a = check::forward_rows(cfg, params, obs, act);
  const auto b = check::forward_rows(cfg, params, moved, act);
  EXPECT_EQ(a.by_token[5], b.by_token[5]);
  EXPECT_NE(a.by_token[6], b.by_token[6]);
  EXPECT_NE(a.by_token[31], b.by_token[31]);
}

TEST(Heads, CwFutureIsCriticOfWorld) {
  const auto cfg = f1_config(CriticVariant::cw);
  const auto p = check::random_params(cfg, 8);
  Rng rng(8);
  ad::Tape<float> tape;
  Binder<float> b(tape, p);
  const auto e = encode(b, cfg, tape.constant(check::random_matrix(16, 2, rng).cast<float>()),
                        tape.constant(check::random_matrix(16, 1, rng).cast<float>()));
  const auto fut = future_critic_head(b, cfg, e.state_emb, e.action_emb, e.action_tokens);
  const auto direct = critic_head(b, cfg, world_head(b, cfg, e.state_emb, e.action_emb));
  EXPECT_EQ(tape.value(fut), tape.value(direct));
}

TEST(Heads, NwHasNoWorldModel) {
  const auto cfg = f1_config(CriticVariant::nw);
  const auto p = init_params(cfg, 1);
  ad::Tape<float> tape;
  Binder<float> b(tape, p);
  const auto e = encode(b, cfg, tape.constant(Tensor<float>({2, 2})), tape.constant(Tensor<float>({2, 1})));
  EXPECT_THROW(world_head(b, cfg, e.state_emb, e.action_emb), UnsupportedVariantError);
  EXPECT_NO_THROW(future_critic_head(b, cfg, e.state_emb, e.action_emb, e.action_tokens));
}

// d(future score at the last step) / d(last action), through the tokenizer
// and (for EF) the transformer.
double action_gradient_error(CriticVariant v, double* magnitude) {
  const auto cfg = f1_config(v);
  const auto params = check::random_params(cfg, 21).cast<double>();
  Rng rng(21);
  const auto obs = check::random_matrix(6, 2, rng);
  const auto act = check::random_matrix(6, 1, rng);
  auto f = [&](ad::Tape<double>& tape, Var x) {
    Binder<double> b(tape, params);
    const auto e = encode(b, cfg, tape.constant(obs), x);
    const Var fut = future_critic_head(b, cfg, e.state_emb, e.action_emb, e.action_tokens);
    return tape.slice(fut, 0, 5, 1);
  };
  ad::Tape<double> tape;
  const Var x = tape.leaf(act);
  tape.backward(f(tape, x));
  *magnitude = std::abs(tape.grad(x)[5]);
  return ad::grad_check(f, act, 1e-6);
}

TEST(Heads, FutureCriticGradientWrtActionIsNonzero) {
  for (auto v : {CriticVariant::tf, CriticVariant::ef}) {
    double mag = 0.0;
    EXPECT_LT(action_gradient_error(v, &mag), 1e-4) << variant_name(v);
    EXPECT_GT(mag, 1e-6) << variant_name(v);
  }
}

TEST(Heads, EfActionEmbeddingSeesPreviousAction) {
  const auto cfg = f1_config();
  const auto params = check::random_params(cfg, 4).cast<double>();
  Rng rng(4);
  const auto obs = check::random_matrix(8, 2, rng);
  const auto act = check::random_matrix(8, 1, rng);
  auto moved = act;
  moved.at(6, 0) += 0.5;
  auto last_action_emb = [&](const Tensor<double>& a) {
    ad::Tape<double> tape;
    Binder<double> b(tape, params);
    const auto e = encode(b, cfg, tape.constant(obs), tape.constant(a));
    return tape.value(tape.slice(e.action_emb, 0, 7, 1));
  };
  EXPECT_NE(last_action_emb(act), last_action_emb(moved));
}

TEST(Binder, FrozenGroupsGetNoGradient) {
  const auto cfg = f1_config();
  const auto p = init_params(cfg, 1);
  ad::Tape<float> tape;
  Binder<float> b(tape, p, [](ParamGroup g) { return g == ParamGroup::critic; });
  const auto e = encode(b, cfg, tape.constant(Tensor<float>({3, 2}, 0.5f)), tape.constant(Tensor<float>({3, 1})));
  const Var c = critic_head(b, cfg, e.state_emb);
  tape.backward(tape.mean(c));
  for (const auto& [index, var] : b.trainable_bound()) EXPECT_EQ(param_group(p.name(index)), ParamGroup::critic);
  EXPECT_FALSE(tape.requires_grad(b("tok_state.w")));
  EXPECT_EQ(b.trainable_bound().size(), 6u);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  check::TempDir dir("ckpt");
  Checkpoint c;
  c.config = f1_config(CriticVariant::tf);
  c.params = check::random_params(c.config, 9);
  c.phase = 2;
  c.frozen = {"backbone", "policy", "world"};
  c.info["seed"] = 9;
  save_checkpoint(c, dir / "m.ckpt");
  const auto back = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(back.params, c.params);
  EXPECT_EQ(back.config.variant, CriticVariant::tf);
  EXPECT_EQ(back.phase, 2);
  EXPECT_TRUE(back.is_frozen(ParamGroup::backbone));
  EXPECT_FALSE(back.is_frozen(ParamGroup::critic));
  EXPECT_EQ(back.info["seed"], 9);
  save_checkpoint(back, dir / "again.ckpt");
  EXPECT_EQ(check::read_file(dir / "m.ckpt"), check::read_file(dir / "again.ckpt"));
}

TEST(Checkpoint, TruncatedAndCorruptFilesRaiseDataError) {
  check::TempDir dir("ckpt");
  Checkpoint c;
  c.config = f1_config();
  c.params = init_params(c.config, 1);
  save_checkpoint(c, dir / "m.ckpt");
  const auto bytes = check::read_file(dir / "m.ckpt");
  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    check::write_file(dir / "cut.ckpt", bytes.substr(0, cut));
    EXPECT_THROW(load_checkpoint(dir / "cut.ckpt"), DataError) << cut;
  }
  auto bad = bytes;
  bad[4] = 7;  // version
  check::write_file(dir / "ver.ckpt", bad);
  EXPECT_THROW(load_checkpoint(dir / "ver.ckpt"), DataError);
  check::write_file(dir / "tail.ckpt", bytes + "x");
  EXPECT_THROW(load_checkpoint(dir / "tail.ckpt"), DataError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), DataError);
}

TEST(Checkpoint, NameSetMustMatchConfig) {
  check::TempDir dir("ckpt");
  Checkpoint c;
  c.config = f1_config(CriticVariant::nw);
  c.params = init_params(f1_config(CriticVariant::ef), 1);
  EXPECT_THROW(save_checkpoint(c, dir / "m.ckpt"), DataError);

  // Rewrite the metadata of a valid file so it claims a different variant.
  c.params = init_params(c.config, 1);
  save_checkpoint(c, dir / "m.ckpt");
  auto bytes = check::read_file(dir / "m.ckpt");
  const auto pos = bytes.find("\"NW\"");
  ASSERT_NE(pos, std::string::npos);
  bytes.replace(pos, 4, "\"EF\"");
  check::write_file(dir / "swapped.ckpt", bytes);
  EXPECT_THROW(load_checkpoint(dir / "swapped.ckpt"), DataError);
}

TEST(Checkpoint, RejectsNonFiniteParams) {
  check::TempDir dir("ckpt");
  Checkpoint c;
  c.config = f1_config();
  c.params = init_params(c.config, 1);
  c.params.get("policy.w")[0] = std::nanf("");
  EXPECT_THROW(save_checkpoint(c, dir / "m.ckpt"), NumericError);
}

}  // namespace
