#include "conbat/deploy/deployer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>

#include "conbat/common/error.hpp"
#include "conbat/common/parallel.hpp"
#include "conbat/common/rng.hpp"
#include "conbat/expert/expert.hpp"
#include "conbat/sim/f110.hpp"
#include "conbat/sim/mushr.hpp"

namespace conbat::deploy {

using ad::Tensor;
using ad::Var;

void DeployConfig::validate() const {
  if (opt_steps < 0) throw UsageError("deploy: opt_steps must be >= 0");
  if (max_steps < 1) throw UsageError("deploy: max_steps must be >= 1");
  if (!(opt_lr > 0.0)) throw UsageError("deploy: opt_lr must be > 0");
  if (lambda_delta < 0.0) throw UsageError("deploy: lambda_delta must be >= 0");
  if (!std::isfinite(eta)) throw UsageError("deploy: eta must be finite");
  if (!(rms_alpha > 0.0 && rms_alpha < 1.0)) throw UsageError("deploy: rms_alpha must be in (0, 1)");
}

nlohmann::ordered_json DeployConfig::to_json() const {
  nlohmann::ordered_json j;
  j["eta"] = eta;
  j["opt_lr"] = opt_lr;
  j["opt_steps"] = opt_steps;
  j["lambda_delta"] = lambda_delta;
  j["rms_alpha"] = rms_alpha;
  j["max_steps"] = max_steps;
  j["prompt_len"] = prompt_len;
  j["record_trace"] = record_trace;
  j["timing"] = timing;
  return j;
}

namespace {

class F1Env : public Env {
 public:
  explicit F1Env(std::shared_ptr<const sim::Track> track) : track_(std::move(track)) {}

  std::size_t obs_dim() const override { return 2; }
  double action_limit() const override { return sim::kF1SteerLimit; }

  std::vector<float> reset(std::uint64_t seed) override {
    Rng rng(mix_seed(seed, 0xd3));
    state_ = sim::f1_place(*track_, rng.uniform(0.0, track_->length()), rng.uniform(-0.3, 0.3),
                           rng.uniform(-0.1, 0.1));
    return pack(sim::f1_observe(state_, *track_));
  }

  std::vector<float> expert_action() override {
    const auto r = expert::plan_step_f1(*track_, params_, state_, 0.0, expert::default_f1_expert());
    return {static_cast<float>(r.action)};
  }

  Step step(const std::vector<float>& action) override {
    const auto r = sim::f1_step(state_, action.at(0), params_, *track_);
    state_ = r.state;
    return {pack(r.obs), r.crashed};
  }

  std::array<double, 2> position() const override { return {state_.position.x, state_.position.y}; }

 private:
  static std::vector<float> pack(const sim::ObsF1& o) {
    return {static_cast<float>(o.lateral_offset), static_cast<float>(o.rel_angle)};
  }

  std::shared_ptr<const sim::Track> track_;
  sim::F1Params params_;
  sim::CarStateF1 state_;
};

class MushrEnv : public Env {
 public:
  explicit MushrEnv(std::shared_ptr<const expert::MushrWorld> world) : world_(std::move(world)) {}

  std::size_t obs_dim() const override { return 2 * sim::kLidarBeams; }
  double action_limit() const override { return sim::kMushrSteerLimit; }

  std::vector<float> reset(std::uint64_t seed) override {
    Rng rng(mix_seed(seed, 0xd4));
    for (int attempt = 0; attempt < 50 && !task_; ++attempt) task_ = expert::sample_mushr_task(*world_, rng);
    if (!task_) throw DataError("mushr env: could not sample a start and goal");
    pose_ = task_->start;
    const auto s = sim::mushr_sense(world_->grid, pose_, params_);
    return pack(s.scan);
  }

  std::vector<float> expert_action() override {
    const auto r = expert::plan_step_mushr(task_->field, params_, pose_, expert::default_mushr_expert(), false);
    return {static_cast<float>(r.action)};
  }

  Step step(const std::vector<float>& action) override {
    const auto r = sim::mushr_step(world_->grid, pose_, action.at(0), params_);
    pose_ = r.pose;
    return {pack(r.scan), r.crashed};
  }

  std::array<double, 2> position() const override { return {pose_.x, pose_.y}; }

 private:
  static std::vector<float> pack(const sim::LidarScan& scan) {
    std::vector<float> out;
    out.reserve(2 * scan.points.size());
    for (const auto& p : scan.points) {
      out.push_back(static_cast<float>(p.x));
      out.push_back(static_cast<float>(p.y));
    }
    return out;
  }

  std::shared_ptr<const expert::MushrWorld> world_;
  sim::MushrParams params_;
  std::optional<expert::MushrTask> task_;
  sim::PoseMushr pose_;
};

class F1Factory : public EnvFactory {
 public:
  explicit F1Factory(const std::string& source)
      : track_(std::make_shared<const sim::Track>(sim::resolve_track(source.empty() ? "playground" : source))) {}
  std::unique_ptr<Env> create() const override { return std::make_unique<F1Env>(track_); }
  data::EnvKind kind() const override { return data::EnvKind::f110; }

 private:
  std::shared_ptr<const sim::Track> track_;
};

class MushrFactory : public EnvFactory {
 public:
  explicit MushrFactory(const std::string& source)
      : world_(std::make_shared<const expert::MushrWorld>(
            expert::make_mushr_world(sim::resolve_map(source.empty() ? "office" : source)))) {}
  std::unique_ptr<Env> create() const override { return std::make_unique<MushrEnv>(world_); }
  data::EnvKind kind() const override { return data::EnvKind::mushr; }

 private:
  std::shared_ptr<const expert::MushrWorld> world_;
};

}  // namespace

std::unique_ptr<EnvFactory> make_env_factory(data::EnvKind kind, const std::string& source) {
  if (kind == data::EnvKind::f110) return std::make_unique<F1Factory>(source);
  return std::make_unique<MushrFactory>(source);
}

Context::Context(std::size_t capacity, std::size_t obs_dim, std::size_t act_dim)
    : capacity_(capacity), obs_dim_(obs_dim), act_dim_(act_dim) {
  if (capacity_ < 1) throw UsageError("context: capacity must be >= 1");
}

void Context::observe(const std::vector<float>& obs) {
  if (obs.size() != obs_dim_) throw ShapeError("context: observation has " + std::to_string(obs.size()) + " values");
  if (actions_.size() / act_dim_ != steps()) throw UsageError("context: observe() before commit() of the last action");
  if (steps() == capacity_) {
    obs_.erase(obs_.begin(), obs_.begin() + static_cast<std::ptrdiff_t>(obs_dim_));
    actions_.erase(actions_.begin(), actions_.begin() + static_cast<std::ptrdiff_t>(act_dim_));
  }
  obs_.insert(obs_.end(), obs.begin(), obs.end());
}

void Context::commit(const std::vector<float>& action) {
  if (action.size() != act_dim_) throw ShapeError("context: action has " + std::to_string(action.size()) + " values");
  if (actions_.size() / act_dim_ + 1 != steps()) throw UsageError("context: commit() without a pending observation");
  actions_.insert(actions_.end(), action.begin(), action.end());
}

namespace {

Tensor<float> as_tensor(const std::vector<float>& v, std::size_t rows, std::size_t cols) {
  return Tensor<float>(ad::Shape{rows, cols}, std::vector<float>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(rows * cols)));
}

std::vector<float> clip(std::vector<float> a, double limit) {
  for (auto& v : a) v = static_cast<float>(std::clamp(static_cast<double>(v), -limit, limit));
  return a;
}

// Encodes the context with `last_action` in the pending slot and returns the
// last future score. `delta` (optional) is added to the pending action.
Var score_on_tape(ad::Tape<float>& tape, model::Binder<float>& b, const model::ModelConfig& cfg, const Context& ctx,
                  const std::vector<float>& last_action, const Var* delta) {
  const std::size_t n = ctx.steps();
  const Var obs = tape.constant(as_tensor(ctx.obs(), n, cfg.obs_dim));
  Var pending = tape.constant(Tensor<float>(ad::Shape{1, cfg.act_dim}, last_action));
  if (delta) pending = tape.add(pending, *delta);
  const Var actions =
      n > 1 ? tape.concat({tape.constant(as_tensor(ctx.actions(), n - 1, cfg.act_dim)), pending}, 0) : pending;
  const auto e = model::encode(b, cfg, obs, actions);
  const Var fut = model::future_critic_head(b, cfg, e.state_emb, e.action_emb, e.action_tokens);
  return tape.slice(fut, 0, n - 1, 1);
}

model::Binder<float>::Trainable frozen() {
  return [](model::ParamGroup) { return false; };
}

}  // namespace

std::vector<float> propose(const model::Checkpoint& m, const Context& ctx, double limit) {
  const auto& cfg = m.config;
  const std::size_t n = ctx.steps();
  if (n == 0) throw UsageError("propose: empty context");
  ad::Tape<float> tape;
  model::Binder<float> b(tape, m.params, frozen());
  const Var obs = tape.constant(as_tensor(ctx.obs(), n, cfg.obs_dim));
  const auto e = n > 1 ? model::encode(b, cfg, obs, tape.constant(as_tensor(ctx.actions(), n - 1, cfg.act_dim)))
                       : model::encode_states_only(b, cfg, obs);
  const Var pi = model::policy_head(b, tape.slice(e.state_emb, 0, n - 1, 1));
  return clip(tape.value(pi).storage(), limit);
}

double future_score(const model::Checkpoint& m, const Context& ctx, const std::vector<float>& action) {
  ad::Tape<float> tape;
  model::Binder<float> b(tape, m.params, frozen());
  return tape.value(score_on_tape(tape, b, m.config, ctx, action, nullptr)).item();
}

namespace {
Rectified rectify_steps(const model::Checkpoint& m, const Context& ctx, const std::vector<float>& proposal,
                        const DeployConfig& cfg, double limit, Rectified& out);
}  // namespace

Rectified rectify(const model::Checkpoint& m, const Context& ctx, const std::vector<float>& proposal,
                  const DeployConfig& cfg, double limit) {
  Rectified out;
  out.action = proposal;
  if (cfg.opt_steps == 0) return out;
  auto fall_back = [&] {
    std::cerr << "warning: non-finite critic value or gradient, keeping the proposed action\n";
    out.action = proposal;
    out.optimized = false;
    out.fallback = true;
    out.score_after = out.score_before;
    return out;
  };
  try {
    return rectify_steps(m, ctx, proposal, cfg, limit, out);
  } catch (const NumericError&) {
    return fall_back();
  }
}

namespace {

Rectified rectify_steps(const model::Checkpoint& m, const Context& ctx, const std::vector<float>& proposal,
                        const DeployConfig& cfg, double limit, Rectified& out) {
  out.score_before = std::numeric_limits<double>::quiet_NaN();
  out.score_before = future_score(m, ctx, proposal);
  out.score_after = out.score_before;
  if (out.score_before >= cfg.eta) return out;

  const std::size_t act_dim = proposal.size();
  std::vector<double> delta(act_dim, 0.0), sq(act_dim, 0.0);
  for (int k = 0; k < cfg.opt_steps; ++k) {
    ad::Tape<float> tape;
    model::Binder<float> b(tape, m.params, frozen());
    std::vector<float> d32(delta.begin(), delta.end());
    const Var dv = tape.leaf(Tensor<float>(ad::Shape{1, act_dim}, d32));
    const Var score = score_on_tape(tape, b, m.config, ctx, proposal, &dv);
    const Var eta = tape.constant(Tensor<float>(ad::Shape{1}, std::vector<float>{static_cast<float>(cfg.eta)}));
    const Var violation = tape.sum(tape.hinge_relu(tape.add(tape.scale(score, -1.0), eta)));
    const Var loss = tape.add(tape.scale(tape.sum(tape.abs(dv)), cfg.lambda_delta), violation);
    tape.backward(loss);
    const auto g = tape.grad(dv);
    if (!std::all_of(g.data().begin(), g.data().end(), [](float x) { return std::isfinite(x); })) {
      throw NumericError("rectify: non-finite gradient");
    }
    for (std::size_t i = 0; i < act_dim; ++i) {
      sq[i] = cfg.rms_alpha * sq[i] + (1.0 - cfg.rms_alpha) * g[i] * g[i];
      delta[i] -= cfg.opt_lr * g[i] / (std::sqrt(sq[i]) + cfg.rms_eps);
      const double a = std::clamp(proposal[i] + delta[i], -limit, limit);
      delta[i] = a - proposal[i];
    }
  }
  out.optimized = true;
  for (std::size_t i = 0; i < act_dim; ++i) out.action[i] = static_cast<float>(proposal[i] + delta[i]);
  out.action = clip(out.action, limit);
  out.score_after = future_score(m, ctx, out.action);
  return out;
}

}  // namespace

RolloutReport rollout(const EnvFactory& envs, const model::Checkpoint& m, const DeployConfig& cfg,
                      std::uint64_t seed) {
  auto checked = cfg;
  checked.max_steps = std::max<std::size_t>(cfg.max_steps, 1);
  checked.validate();
  const auto start = std::chrono::steady_clock::now();
  RolloutReport rep;
  rep.seed = seed;
  rep.max_steps = cfg.max_steps;
  if (cfg.max_steps == 0) return rep;
  auto env = envs.create();
  if (env->obs_dim() != m.config.obs_dim || env->act_dim() != m.config.act_dim) {
    throw DataError("rollout: environment dims do not match the model");
  }
  const double limit = env->action_limit();
  Context ctx(m.config.seq_len, m.config.obs_dim, m.config.act_dim);
  auto obs = env->reset(seed);

  auto finish = [&] {
    rep.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
  };

  for (std::size_t k = 0; k < cfg.prompt_len; ++k) {
    ctx.observe(obs);
    const auto a = env->expert_action();
    ctx.commit(a);
    const auto s = env->step(a);
    obs = s.obs;
    if (s.crashed) {
      rep.crashed = true;
      rep.crashed_in_prompt = true;
      return finish();
    }
  }

  for (std::size_t t = 0; t < cfg.max_steps; ++t) {
    ctx.observe(obs);
    StepRecord rec;
    rec.proposed = propose(m, ctx, limit);
    const auto r = rectify(m, ctx, rec.proposed, cfg, limit);
    rec.applied = r.action;
    rec.score_before = r.score_before;
    rec.score_after = r.score_after;
    rec.optimized = r.optimized;
    rec.fallback = r.fallback;
    rep.rectified += r.optimized;
    rep.fallbacks += r.fallback;
    ctx.commit(rec.applied);
    const auto s = env->step(rec.applied);
    obs = s.obs;
    rec.position = env->position();
    rep.steps.push_back(std::move(rec));
    rep.steps_survived = t + 1;
    if (s.crashed) {
      rep.crashed = true;
      break;
    }
  }
  return finish();
}

std::vector<RolloutReport> rollout_many(const EnvFactory& envs, const model::Checkpoint& m, const DeployConfig& cfg,
                                        std::uint64_t first_seed, std::size_t episodes) {
  std::vector<RolloutReport> out(episodes);
  parallel_for(episodes, [&](std::size_t i) { out[i] = rollout(envs, m, cfg, first_seed + i); });
  return out;
}

nlohmann::ordered_json report_json(const RolloutReport& r, const DeployConfig& cfg) {
  nlohmann::ordered_json j;
  j["seed"] = r.seed;
  j["steps"] = r.steps_survived;
  j["crashed"] = r.crashed;
  j["crashed_in_prompt"] = r.crashed_in_prompt;
  j["max_steps"] = r.max_steps;
  j["rectified"] = r.rectified;
  j["fallbacks"] = r.fallbacks;
  if (cfg.timing) j["runtime_s"] = r.runtime_s;
  if (cfg.record_trace) {
    auto proposed = nlohmann::ordered_json::array(), applied = nlohmann::ordered_json::array();
    auto before = nlohmann::ordered_json::array(), after = nlohmann::ordered_json::array();
    auto optimized = nlohmann::ordered_json::array(), xy = nlohmann::ordered_json::array();
    for (const auto& s : r.steps) {
      proposed.push_back(s.proposed);
      applied.push_back(s.applied);
      before.push_back(s.score_before);
      after.push_back(s.score_after);
      optimized.push_back(s.optimized);
      xy.push_back(s.position);
    }
    nlohmann::ordered_json trace;
    trace["proposed"] = std::move(proposed);
    trace["applied"] = std::move(applied);
    trace["score_before"] = std::move(before);
    trace["score_after"] = std::move(after);
    trace["optimized"] = std::move(optimized);
    trace["position"] = std::move(xy);
    j["trace"] = std::move(trace);
  }
  return j;
}

void write_rollouts_jsonl(const std::vector<RolloutReport>& reports, const DeployConfig& cfg,
                          const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : reports) out << report_json(r, cfg).dump() << '\n';
}

namespace {
// Non-finite scores are written as null.
double score_or_nan(const nlohmann::json& v) {
  return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
}
}  // namespace

std::vector<RolloutReport> read_rollouts_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<RolloutReport> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      RolloutReport r;
      r.seed = j.at("seed").get<std::uint64_t>();
      r.steps_survived = j.at("steps").get<std::size_t>();
      r.crashed = j.at("crashed").get<bool>();
      r.crashed_in_prompt = j.value("crashed_in_prompt", false);
      r.max_steps = j.at("max_steps").get<std::size_t>();
      r.rectified = j.value("rectified", std::size_t{0});
      r.fallbacks = j.value("fallbacks", std::size_t{0});
      r.runtime_s = j.value("runtime_s", 0.0);
      if (j.contains("trace")) {
        const auto& t = j.at("trace");
        const auto& applied = t.at("applied");
        for (std::size_t k = 0; k < applied.size(); ++k) {
          StepRecord s;
          s.proposed = t.at("proposed").at(k).get<std::vector<float>>();
          s.applied = applied.at(k).get<std::vector<float>>();
          s.score_before = score_or_nan(t.at("score_before").at(k));
          s.score_after = score_or_nan(t.at("score_after").at(k));
          s.optimized = t.at("optimized").at(k).get<bool>();
          s.position = t.at("position").at(k).get<std::array<double, 2>>();
          r.steps.push_back(std::move(s));
        }
      }
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace conbat::deploy
