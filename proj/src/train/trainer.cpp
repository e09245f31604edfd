#include "conbat/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "conbat/common/error.hpp"
#include "conbat/common/parallel.hpp"
#include "conbat/common/rng.hpp"

namespace conbat::train {

using ad::Tensor;
using ad::Var;
using data::StepTag;
using model::ParamGroup;

void TrainConfig::validate() const {
  if (batch_size < 1) throw UsageError("train: batch_size must be >= 1");
  if (!(optimizer.lr > 0.0)) throw UsageError("train: lr must be > 0");
  if (!(gamma > 0.0)) throw UsageError("train: gamma must be > 0");
  if (!(alpha > 0.0 && alpha < 1.0)) throw UsageError("train: alpha must be in (0, 1)");
  if (lambda_c < 0.0 || lambda_s < 0.0 || lambda_f < 0.0) throw UsageError("train: loss weights must be >= 0");
  if (!(unsafe_fraction_used > 0.0 && unsafe_fraction_used <= 1.0)) {
    throw UsageError("train: unsafe_fraction_used must be in (0, 1]");
  }
  if (!(unsafe_batch_share >= 0.0 && unsafe_batch_share <= 1.0)) {
    throw UsageError("train: unsafe_batch_share must be in [0, 1]");
  }
  if (window_stride < 1) throw UsageError("train: window_stride must be >= 1");
  if (!(divergence_limit > 0.0)) throw UsageError("train: divergence_limit must be > 0");
}

nlohmann::ordered_json TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["batch_size"] = batch_size;
  j["optimizer"] = std::string(ad::optimizer_name(optimizer.kind));
  j["lr"] = optimizer.lr;
  j["epochs_phase1"] = epochs_phase1;
  j["epochs_phase2"] = epochs_phase2;
  j["gamma"] = gamma;
  j["alpha"] = alpha;
  j["lambda_c"] = lambda_c;
  j["lambda_s"] = lambda_s;
  j["lambda_f"] = lambda_f;
  j["include_unsafe_in_phase1"] = include_unsafe_in_phase1;
  j["unsafe_fraction_used"] = unsafe_fraction_used;
  j["unsafe_batch_share"] = unsafe_batch_share;
  j["window_stride"] = window_stride;
  j["seed"] = seed;
  j["divergence_limit"] = divergence_limit;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw UsageError("train config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "optimizer") c.optimizer.kind = ad::parse_optimizer(value.get<std::string>());
      else if (key == "lr") c.optimizer.lr = value.get<double>();
      else if (key == "epochs_phase1") c.epochs_phase1 = value.get<std::size_t>();
      else if (key == "epochs_phase2") c.epochs_phase2 = value.get<std::size_t>();
      else if (key == "gamma") c.gamma = value.get<double>();
      else if (key == "alpha") c.alpha = value.get<double>();
      else if (key == "lambda_c") c.lambda_c = value.get<double>();
      else if (key == "lambda_s") c.lambda_s = value.get<double>();
      else if (key == "lambda_f") c.lambda_f = value.get<double>();
      else if (key == "include_unsafe_in_phase1") c.include_unsafe_in_phase1 = value.get<bool>();
      else if (key == "unsafe_fraction_used") c.unsafe_fraction_used = value.get<double>();
      else if (key == "unsafe_batch_share") c.unsafe_batch_share = value.get<double>();
      else if (key == "window_stride") c.window_stride = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "divergence_limit") c.divergence_limit = value.get<double>();
      else throw UsageError("train config: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("train config: bad value for '" + key + "': " + e.what());
    }
  }
  return c;
}

namespace {

template <typename T>
Tensor<T> rows_tensor(const std::vector<float>& src, std::size_t rows, std::size_t cols) {
  Tensor<T> t(ad::Shape{rows, cols});
  for (std::size_t i = 0; i < rows * cols; ++i) t[i] = static_cast<T>(src[i]);
  return t;
}

template <typename T>
Tensor<T> selector(std::size_t width, const std::vector<std::size_t>& cols) {
  Tensor<T> s(ad::Shape{cols.size(), width});
  for (std::size_t r = 0; r < cols.size(); ++r) s.at(r, cols[r]) = T{1};
  return s;
}

template <typename T>
Var zero(ad::Tape<T>& tape) {
  return tape.constant(Tensor<T>::scalar(T{0}));
}

}  // namespace

template <typename T>
CbcTerms cbc_losses(ad::Tape<T>& tape, Var current, Var future, const CbcLayout& layout, const TrainConfig& cfg) {
  const auto& cv = tape.value(current);
  const std::size_t n = cv.numel();
  if (cv.rank() != 2 || cv.cols() != 1 || tape.value(future).shape() != cv.shape()) {
    throw ShapeError("cbc_losses: scores must be [N, 1], got " + ad::shape_str(cv.shape()) + " and " +
                     ad::shape_str(tape.value(future).shape()));
  }
  if (layout.tags.size() != n) {
    throw ShapeError("cbc_losses: " + std::to_string(layout.tags.size()) + " tags for " + std::to_string(n) + " rows");
  }
  for (const auto& [a, b] : layout.pairs) {
    if (a >= n || b >= n) throw ShapeError("cbc_losses: pair index out of range");
  }

  std::size_t n_safe = 0, n_unsafe = 0;
  for (auto tag : layout.tags) {
    n_safe += tag == StepTag::safe;
    n_unsafe += tag == StepTag::unsafe;
  }
  const Var margin = tape.constant(Tensor<T>(ad::Shape{1}, std::vector<T>{static_cast<T>(cfg.gamma)}));
  auto set_mean = [&](Var hinge, StepTag which, std::size_t count) {
    Tensor<T> w(ad::Shape{n, 1});
    for (std::size_t r = 0; r < n; ++r) {
      if (layout.tags[r] == which) w[r] = static_cast<T>(1.0 / static_cast<double>(count));
    }
    return tape.sum(tape.mul(hinge, tape.constant(std::move(w))));
  };

  CbcTerms out;
  const Var safe_term =
      n_safe ? set_mean(tape.hinge_relu(tape.add(tape.scale(current, -1.0), margin)), StepTag::safe, n_safe) : zero(tape);
  const Var unsafe_term =
      n_unsafe ? set_mean(tape.hinge_relu(tape.add(current, margin)), StepTag::unsafe, n_unsafe) : zero(tape);
  out.unsafe_missing = n_unsafe == 0;
  out.l_c = tape.add(safe_term, unsafe_term);

  std::vector<std::size_t> decay_from, decay_to, all_from, all_to;
  for (const auto& [a, b] : layout.pairs) {
    all_from.push_back(a);
    all_to.push_back(b);
    if (layout.tags[a] == StepTag::safe && layout.tags[b] == StepTag::safe) {
      decay_from.push_back(a);
      decay_to.push_back(b);
    }
  }
  if (decay_from.empty()) {
    out.l_s = zero(tape);
  } else {
    const Var now = tape.matmul(tape.constant(selector<T>(n, decay_from)), current);
    const Var next = tape.matmul(tape.constant(selector<T>(n, decay_to)), current);
    out.l_s = tape.mean(tape.hinge_relu(tape.sub(tape.scale(now, 1.0 - cfg.alpha), next)));
  }
  if (all_from.empty()) {
    out.l_f = zero(tape);
  } else {
    const Var predicted = tape.matmul(tape.constant(selector<T>(n, all_from)), future);
    const Var next = tape.matmul(tape.constant(selector<T>(n, all_to)), current);
    out.l_f = tape.l1(predicted, next);
  }
  out.total = tape.add(tape.add(tape.scale(out.l_c, cfg.lambda_c), tape.scale(out.l_s, cfg.lambda_s)),
                       tape.scale(out.l_f, cfg.lambda_f));
  return out;
}

template CbcTerms cbc_losses<float>(ad::Tape<float>&, Var, Var, const CbcLayout&, const TrainConfig&);
template CbcTerms cbc_losses<double>(ad::Tape<double>&, Var, Var, const CbcLayout&, const TrainConfig&);

std::pair<std::size_t, std::size_t> phase1_rows(const model::ModelConfig& cfg, const data::WindowSample& w,
                                                bool use_policy) {
  const std::size_t policy = use_policy ? w.valid : 0;
  const std::size_t world = cfg.has_world() ? w.valid - 1 + (w.has_next ? 1 : 0) : 0;
  return {policy, world};
}

template <typename T>
Phase1Terms phase1_window_loss(model::Binder<T>& b, const model::ModelConfig& cfg, const data::WindowSample& w,
                               bool use_policy, double policy_norm, double world_norm) {
  auto& tape = b.tape();
  const std::size_t v = w.valid;
  const std::size_t d = cfg.d_embed;
  const Var obs = tape.constant(rows_tensor<T>(w.obs, v, cfg.obs_dim));
  const Var act = tape.constant(rows_tensor<T>(w.actions, v, cfg.act_dim));
  const auto e = model::encode(b, cfg, obs, act);

  Phase1Terms out;
  std::tie(out.policy_rows, out.world_rows) = phase1_rows(cfg, w, use_policy);
  out.policy = zero(tape);
  out.world = zero(tape);
  if (out.policy_rows > 0) {
    const Var l1 = tape.l1(model::policy_head(b, e.state_emb), act);
    out.policy = tape.scale(l1, static_cast<double>(v * cfg.act_dim) / policy_norm);
  }
  if (out.world_rows > 0) {
    const std::size_t r = out.world_rows;
    // Targets are the next state tokens, held constant.
    Tensor<T> target(ad::Shape{r, d});
    const auto& tokens = tape.value(e.state_tokens);
    for (std::size_t t = 0; t + 1 < v; ++t) {
      for (std::size_t c = 0; c < d; ++c) target.at(t, c) = tokens.at(t + 1, c);
    }
    if (w.has_next) {
      const Var next_obs = tape.constant(rows_tensor<T>(w.next_obs, 1, cfg.obs_dim));
      const auto& next_tok = tape.value(model::tokenize_states(b, next_obs));
      for (std::size_t c = 0; c < d; ++c) target.at(r - 1, c) = next_tok[c];
    }
    const Var s = r == v ? e.state_emb : tape.slice(e.state_emb, 0, 0, r);
    const Var a = r == v ? e.action_emb : tape.slice(e.action_emb, 0, 0, r);
    const Var err = tape.mse(model::world_head(b, cfg, s, a), tape.constant(std::move(target)));
    out.world = tape.scale(err, static_cast<double>(r * d) / world_norm);
  }
  out.total = tape.add(out.policy, out.world);
  return out;
}

template Phase1Terms phase1_window_loss<float>(model::Binder<float>&, const model::ModelConfig&,
                                               const data::WindowSample&, bool, double, double);
template Phase1Terms phase1_window_loss<double>(model::Binder<double>&, const model::ModelConfig&,
                                                const data::WindowSample&, bool, double, double);

std::vector<std::uint32_t> phase2_trajectories(const data::TrajectorySet& set, double fraction, std::uint64_t seed) {
  std::vector<std::uint32_t> safe, unsafe;
  for (std::size_t i = 0; i < set.trajectories.size(); ++i) {
    (set.trajectories[i].label == data::Label::unsafe ? unsafe : safe).push_back(static_cast<std::uint32_t>(i));
  }
  std::size_t keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(unsafe.size())));
  if (fraction > 0.0 && !unsafe.empty()) keep = std::max<std::size_t>(keep, 1);
  keep = std::min(keep, unsafe.size());
  Rng rng(mix_seed(seed, 0x5eed));
  rng.shuffle(std::span<std::uint32_t>(unsafe));
  unsafe.resize(keep);
  std::vector<std::uint32_t> ids = safe;
  ids.insert(ids.end(), unsafe.begin(), unsafe.end());
  std::sort(ids.begin(), ids.end());
  return ids;
}

namespace {

void check_dims(const data::TrajectorySet& set, const model::ModelConfig& cfg) {
  if (set.obs_dim != cfg.obs_dim || set.act_dim != cfg.act_dim) {
    throw DataError("dataset dims (obs " + std::to_string(set.obs_dim) + ", act " + std::to_string(set.act_dim) +
                    ") do not match the model (obs " + std::to_string(cfg.obs_dim) + ", act " +
                    std::to_string(cfg.act_dim) + ")");
  }
}

// Parameters updated by one phase, in storage order.
struct TrainableSet {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> slot_of;  // param index -> position, npos when frozen
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  TrainableSet(const model::Params& params, const std::function<bool(ParamGroup)>& trainable)
      : slot_of(params.size(), npos) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (trainable(model::param_group(params.name(i)))) {
        slot_of[i] = indices.size();
        indices.push_back(i);
      }
    }
  }

  std::vector<Tensor<float>> zero_grads(const model::Params& params) const {
    std::vector<Tensor<float>> g;
    g.reserve(indices.size());
    for (auto i : indices) g.emplace_back(params.tensor(i).shape());
    return g;
  }

  void collect(const ad::Tape<float>& tape, const model::Binder<float>& b, std::vector<Tensor<float>>& grads) const {
    for (const auto& [index, var] : b.trainable_bound()) grads[slot_of[index]] = tape.grad(var);
  }

  void step(const ad::OptimizerConfig& opt, model::Params& params, const std::vector<Tensor<float>>& grads,
            ad::OptimizerState<float>& state) const {
    std::vector<Tensor<float>*> ptrs;
    ptrs.reserve(indices.size());
    for (auto i : indices) ptrs.push_back(&params.tensor(i));
    ad::optimizer_step<float>(opt, ptrs, grads, state);
  }
};

void check_loss(double loss, const TrainConfig& cfg, int phase, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(loss) || loss > cfg.divergence_limit) {
    throw NumericError("phase " + std::to_string(phase) + " diverged at epoch " + std::to_string(epoch) + ", batch " +
                       std::to_string(batch) + ": loss " + std::to_string(loss) + " (limit " +
                       std::to_string(cfg.divergence_limit) + ")");
  }
}

}  // namespace

TrainResult train_phase1(const data::TrajectorySet& set, const model::ModelConfig& model_cfg, const TrainConfig& cfg,
                         const ProgressFn& progress) {
  cfg.validate();
  model_cfg.validate();
  set.validate();
  check_dims(set, model_cfg);

  std::vector<std::uint32_t> ids;
  for (std::size_t i = 0; i < set.trajectories.size(); ++i) {
    if (cfg.include_unsafe_in_phase1 || set.trajectories[i].label == data::Label::safe) {
      ids.push_back(static_cast<std::uint32_t>(i));
    }
  }
  const auto windows = data::enumerate_windows(set, {.context = model_cfg.seq_len, .stride = cfg.window_stride}, ids);
  if (windows.empty()) throw DataError("phase 1: no training windows");

  TrainResult result;
  result.windows = windows.size();
  auto& ckpt = result.checkpoint;
  ckpt.config = model_cfg;
  ckpt.params = model::init_params(model_cfg, cfg.seed);
  ckpt.phase = 1;
  ckpt.frozen = {"critic", "critic_future"};
  auto trainable = [](ParamGroup g) {
    return g == ParamGroup::backbone || g == ParamGroup::policy || g == ParamGroup::world;
  };
  const TrainableSet train_set(ckpt.params, trainable);
  ad::OptimizerState<float> opt_state;

  data::WindowIterator it(windows, cfg.batch_size, mix_seed(cfg.seed, 1));
  std::vector<data::WindowRef> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs_phase1; ++epoch) {
    it.start_epoch(epoch);
    EpochRecord rec;
    rec.phase = 1;
    rec.epoch = epoch;
    while (it.next(batch)) {
      std::vector<data::WindowSample> samples;
      samples.reserve(batch.size());
      std::vector<std::uint8_t> use_policy;
      double policy_norm = 0.0, world_norm = 0.0;
      for (const auto& ref : batch) {
        samples.push_back(data::make_window(set, nullptr, ref, model_cfg.seq_len));
        use_policy.push_back(set.trajectories[ref.traj].label == data::Label::safe);
        const auto [p, w] = phase1_rows(model_cfg, samples.back(), use_policy.back());
        policy_norm += static_cast<double>(p);
        world_norm += static_cast<double>(w);
      }
      policy_norm = std::max(policy_norm, 1.0);
      world_norm = std::max(world_norm, 1.0);

      std::vector<std::vector<Tensor<float>>> grads(samples.size());
      std::vector<double> policy(samples.size()), world(samples.size());
      parallel_for(samples.size(), [&](std::size_t k) {
        ad::Tape<float> tape;
        model::Binder<float> b(tape, ckpt.params, trainable);
        const auto terms = phase1_window_loss(b, model_cfg, samples[k], use_policy[k], policy_norm, world_norm);
        tape.backward(terms.total);
        grads[k] = train_set.zero_grads(ckpt.params);
        train_set.collect(tape, b, grads[k]);
        policy[k] = tape.value(terms.policy).item();
        world[k] = tape.value(terms.world).item();
      });
      auto total = train_set.zero_grads(ckpt.params);
      double p_sum = 0.0, w_sum = 0.0;
      for (std::size_t k = 0; k < samples.size(); ++k) {
        for (std::size_t q = 0; q < total.size(); ++q) {
          auto& dst = total[q].storage();
          const auto& src = grads[k][q].storage();
          for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += src[e];
        }
        p_sum += policy[k];
        w_sum += world[k];
      }
      check_loss(p_sum + w_sum, cfg, 1, epoch, rec.batches);
      train_set.step(cfg.optimizer, ckpt.params, total, opt_state);
      rec.policy += p_sum;
      rec.world += w_sum;
      ++rec.batches;
    }
    rec.policy /= static_cast<double>(std::max<std::size_t>(rec.batches, 1));
    rec.world /= static_cast<double>(std::max<std::size_t>(rec.batches, 1));
    rec.total = rec.policy + rec.world;
    result.curve.push_back(rec);
    if (progress) progress(rec);
  }

  ckpt.info["seed"] = cfg.seed;
  ckpt.info["epochs"] = cfg.epochs_phase1;
  ckpt.info["windows"] = windows.size();
  ckpt.info["dataset_source"] = set.source;
  ckpt.info["safety_concept"] = set.safety_concept;
  ckpt.info["train"] = cfg.to_json();
  return result;
}

namespace {

struct CachedWindow {
  std::size_t rows = 0;
  std::vector<float> state_emb;
  std::vector<float> action_emb;
  std::vector<float> action_tok;
  std::vector<StepTag> tags;
};

}  // namespace

TrainResult train_phase2(const data::TrajectorySet& set, const model::Checkpoint& base, const TrainConfig& cfg,
                         const ProgressFn& progress) {
  cfg.validate();
  set.validate();
  const auto& model_cfg = base.config;
  check_dims(set, model_cfg);
  if (base.phase < 1) throw UsageError("phase 2 needs a trained phase-1 checkpoint");
  if (model::param_specs(model_cfg).size() != base.params.size()) {
    throw DataError("phase 2: checkpoint parameters do not match its config");
  }

  const auto labels = data::build_safe_sets(set, model_cfg.seq_len);
  const auto ids = phase2_trajectories(set, cfg.unsafe_fraction_used, cfg.seed);
  const auto windows = data::enumerate_windows(set, {.context = model_cfg.seq_len, .stride = cfg.window_stride}, ids);
  if (windows.empty()) throw DataError("phase 2: no training windows");

  TrainResult result;
  result.windows = windows.size();
  auto& ckpt = result.checkpoint;
  ckpt = base;
  ckpt.phase = 2;
  ckpt.frozen = {"backbone", "policy"};
  if (model_cfg.has_world()) ckpt.frozen.push_back("world");
  // Fresh critics so the result does not depend on what the base carried.
  model::reinit_group(ckpt.params, model_cfg, ParamGroup::critic, mix_seed(cfg.seed, 2));
  if (model_cfg.has_future_critic()) {
    model::reinit_group(ckpt.params, model_cfg, ParamGroup::critic_future, mix_seed(cfg.seed, 3));
  }

  // The frozen backbone makes embeddings a pure function of the window.
  const std::size_t d = model_cfg.d_embed;
  std::vector<CachedWindow> cache(windows.size());
  parallel_for(windows.size(), [&](std::size_t k) {
    const auto w = data::make_window(set, &labels, windows[k], model_cfg.seq_len);
    ad::Tape<float> tape;
    model::Binder<float> b(tape, ckpt.params, [](ParamGroup) { return false; });
    const Var obs = tape.constant(rows_tensor<float>(w.obs, w.valid, model_cfg.obs_dim));
    const Var act = tape.constant(rows_tensor<float>(w.actions, w.valid, model_cfg.act_dim));
    const auto e = model::encode(b, model_cfg, obs, act);
    auto& c = cache[k];
    c.rows = w.valid;
    c.state_emb = tape.value(e.state_emb).storage();
    c.action_emb = tape.value(e.action_emb).storage();
    c.action_tok = tape.value(e.action_tokens).storage();
    c.tags.assign(w.tags.begin(), w.tags.begin() + static_cast<std::ptrdiff_t>(w.valid));
  });

  auto trainable = [](ParamGroup g) { return g == ParamGroup::critic || g == ParamGroup::critic_future; };
  const TrainableSet train_set(ckpt.params, trainable);
  ad::OptimizerState<float> opt_state;

  std::vector<data::WindowRef> index_refs(windows.size());
  for (std::size_t k = 0; k < windows.size(); ++k) index_refs[k] = {static_cast<std::uint32_t>(k), 0, 0};
  data::WindowIterator it(index_refs, cfg.batch_size, mix_seed(cfg.seed, 4));
  // Unsafe rows are rare (one per crashed run), so most plain batches have
  // none; top each batch up with windows that do.
  std::vector<std::uint32_t> unsafe_pool;
  for (std::size_t k = 0; k < cache.size(); ++k) {
    if (std::find(cache[k].tags.begin(), cache[k].tags.end(), StepTag::unsafe) != cache[k].tags.end()) {
      unsafe_pool.push_back(static_cast<std::uint32_t>(k));
    }
  }
  const std::size_t extra =
      unsafe_pool.empty() ? 0
                          : static_cast<std::size_t>(std::ceil(cfg.unsafe_batch_share * static_cast<double>(cfg.batch_size)));
  std::vector<data::WindowRef> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs_phase2; ++epoch) {
    it.start_epoch(epoch);
    Rng pick(mix_seed(cfg.seed, 0x900d + epoch));
    EpochRecord rec;
    rec.phase = 2;
    rec.epoch = epoch;
    while (it.next(batch)) {
      for (std::size_t k = 0; k < extra; ++k) batch.push_back({unsafe_pool[pick.uniform_index(unsafe_pool.size())], 0, 0});
      std::size_t n = 0;
      for (const auto& ref : batch) n += cache[ref.traj].rows;
      Tensor<float> s(ad::Shape{n, d}), a(ad::Shape{n, d}), tok(ad::Shape{n, d});
      CbcLayout layout;
      layout.tags.reserve(n);
      std::size_t row = 0;
      for (const auto& ref : batch) {
        const auto& c = cache[ref.traj];
        std::copy(c.state_emb.begin(), c.state_emb.end(), s.storage().begin() + static_cast<std::ptrdiff_t>(row * d));
        std::copy(c.action_emb.begin(), c.action_emb.end(), a.storage().begin() + static_cast<std::ptrdiff_t>(row * d));
        std::copy(c.action_tok.begin(), c.action_tok.end(), tok.storage().begin() + static_cast<std::ptrdiff_t>(row * d));
        layout.tags.insert(layout.tags.end(), c.tags.begin(), c.tags.end());
        for (std::size_t t = 0; t + 1 < c.rows; ++t) layout.pairs.emplace_back(row + t, row + t + 1);
        row += c.rows;
      }
      ad::Tape<float> tape;
      model::Binder<float> b(tape, ckpt.params, trainable);
      const Var sv = tape.constant(std::move(s));
      const Var av = tape.constant(std::move(a));
      const Var tv = tape.constant(std::move(tok));
      const Var current = model::critic_head(b, model_cfg, sv);
      const Var future = model::future_critic_head(b, model_cfg, sv, av, tv);
      const auto terms = cbc_losses(tape, current, future, layout, cfg);
      tape.backward(terms.total);
      auto grads = train_set.zero_grads(ckpt.params);
      train_set.collect(tape, b, grads);
      const double loss = tape.value(terms.total).item();
      check_loss(loss, cfg, 2, epoch, rec.batches);
      train_set.step(cfg.optimizer, ckpt.params, grads, opt_state);
      rec.total += loss;
      rec.l_c += tape.value(terms.l_c).item();
      rec.l_s += tape.value(terms.l_s).item();
      rec.l_f += tape.value(terms.l_f).item();
      rec.batches_without_unsafe += terms.unsafe_missing;
      ++rec.batches;
    }
    const double nb = static_cast<double>(std::max<std::size_t>(rec.batches, 1));
    rec.total /= nb;
    rec.l_c /= nb;
    rec.l_s /= nb;
    rec.l_f /= nb;
    result.curve.push_back(rec);
    if (progress) progress(rec);
  }

  ckpt.info["phase2"] = {{"seed", cfg.seed},
                         {"epochs", cfg.epochs_phase2},
                         {"windows", windows.size()},
                         {"unsafe_fraction_used", cfg.unsafe_fraction_used},
                         {"trajectories", ids.size()},
                         {"safety_concept", set.safety_concept},
                         {"train", cfg.to_json()}};
  return result;
}

void write_losses_csv(const std::vector<EpochRecord>& curve, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "phase,epoch,total,policy,world,l_c,l_s,l_f,batches,batches_without_unsafe\n";
  char line[512];
  for (const auto& r : curve) {
    std::snprintf(line, sizeof line, "%d,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%zu,%zu\n", r.phase, r.epoch, r.total,
                  r.policy, r.world, r.l_c, r.l_s, r.l_f, r.batches, r.batches_without_unsafe);
    out << line;
  }
}

}  // namespace conbat::train
