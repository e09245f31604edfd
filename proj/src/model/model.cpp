#include "conbat/model/model.hpp"

#include <cmath>
#include <fstream>

#include "conbat/common/binary_io.hpp"
#include "conbat/common/error.hpp"
#include "conbat/common/rng.hpp"

namespace conbat::model {

using ad::Shape;
using ad::Tensor;
using ad::Var;

CriticVariant parse_variant(std::string_view name) {
  if (name == "nw" || name == "NW") return CriticVariant::nw;
  if (name == "cw" || name == "CW") return CriticVariant::cw;
  if (name == "tf" || name == "TF") return CriticVariant::tf;
  if (name == "ef" || name == "EF") return CriticVariant::ef;
  throw UsageError("unknown critic variant '" + std::string(name) + "' (expected NW, CW, TF or EF)");
}

std::string_view variant_name(CriticVariant v) {
  switch (v) {
    case CriticVariant::nw: return "NW";
    case CriticVariant::cw: return "CW";
    case CriticVariant::tf: return "TF";
    case CriticVariant::ef: return "EF";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (n_layers < 1) throw UsageError("model: n_layers must be >= 1");
  if (n_heads < 1 || d_embed < 1 || d_embed % n_heads != 0) {
    throw UsageError("model: d_embed (" + std::to_string(d_embed) + ") must be divisible by n_heads (" +
                     std::to_string(n_heads) + ")");
  }
  if (seq_len < 1) throw UsageError("model: seq_len must be >= 1");
  if (obs_dim < 1 || act_dim < 1) throw UsageError("model: obs_dim and act_dim must be >= 1");
  if (mlp_hidden < 1 || world_hidden < 1 || cbf_units < 1) throw UsageError("model: hidden sizes must be >= 1");
  if (cbf_layers < 1) throw UsageError("model: cbf_layers must be >= 1");
}

nlohmann::ordered_json ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["d_embed"] = d_embed;
  j["seq_len"] = seq_len;
  j["obs_dim"] = obs_dim;
  j["act_dim"] = act_dim;
  j["mlp_hidden"] = mlp_hidden;
  j["world_hidden"] = world_hidden;
  j["cbf_layers"] = cbf_layers;
  j["cbf_units"] = cbf_units;
  j["critic_variant"] = std::string(variant_name(variant));
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("model config: expected a JSON object");
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "n_layers") c.n_layers = value.get<std::size_t>();
      else if (key == "n_heads") c.n_heads = value.get<std::size_t>();
      else if (key == "d_embed") c.d_embed = value.get<std::size_t>();
      else if (key == "seq_len") c.seq_len = value.get<std::size_t>();
      else if (key == "obs_dim") c.obs_dim = value.get<std::size_t>();
      else if (key == "act_dim") c.act_dim = value.get<std::size_t>();
      else if (key == "mlp_hidden") c.mlp_hidden = value.get<std::size_t>();
      else if (key == "world_hidden") c.world_hidden = value.get<std::size_t>();
      else if (key == "cbf_layers") c.cbf_layers = value.get<std::size_t>();
      else if (key == "cbf_units") c.cbf_units = value.get<std::size_t>();
      else if (key == "critic_variant") c.variant = parse_variant(value.get<std::string>());
      else throw DataError("model config: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw DataError("model config: bad value for '" + key + "': " + e.what());
    } catch (const UsageError& e) {
      throw DataError(std::string("model config: ") + e.what());
    }
  }
  return c;
}

std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::policy: return "policy";
    case ParamGroup::world: return "world";
    case ParamGroup::critic: return "critic";
    case ParamGroup::critic_future: return "critic_future";
  }
  return "?";
}

ParamGroup parse_group(std::string_view name) {
  for (auto g : {ParamGroup::backbone, ParamGroup::policy, ParamGroup::world, ParamGroup::critic,
                 ParamGroup::critic_future}) {
    if (group_name(g) == name) return g;
  }
  throw DataError("unknown parameter group '" + std::string(name) + "'");
}

ParamGroup param_group(std::string_view n) {
  if (n.starts_with("critic_future.")) return ParamGroup::critic_future;
  if (n.starts_with("critic.")) return ParamGroup::critic;
  if (n.starts_with("world.")) return ParamGroup::world;
  if (n.starts_with("policy.")) return ParamGroup::policy;
  return ParamGroup::backbone;
}

namespace {

void add_linear(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in, std::size_t outdim) {
  out.push_back({prefix + ".w", {in, outdim}, ParamSpec::Init::normal});
  out.push_back({prefix + ".b", {outdim}, ParamSpec::Init::zeros});
}

void add_critic(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in, const ModelConfig& cfg) {
  std::size_t width = in;
  for (std::size_t k = 0; k < cfg.cbf_layers; ++k) {
    add_linear(out, prefix + ".fc" + std::to_string(k + 1), width, cfg.cbf_units);
    width = cfg.cbf_units;
  }
  add_linear(out, prefix + ".out", width, 1);
}

std::string block(std::size_t i, const char* rest) { return "block" + std::to_string(i) + "." + rest; }

}  // namespace

std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_embed;
  std::vector<ParamSpec> out;
  add_linear(out, "tok_state", cfg.obs_dim, d);
  add_linear(out, "tok_action", cfg.act_dim, d);
  out.push_back({"pos", {2 * cfg.seq_len, d}, ParamSpec::Init::normal});
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    out.push_back({block(i, "ln1.g"), {d}, ParamSpec::Init::ones});
    out.push_back({block(i, "ln1.b"), {d}, ParamSpec::Init::zeros});
    add_linear(out, block(i, "attn.qkv"), d, 3 * d);
    add_linear(out, block(i, "attn.out"), d, d);
    out.push_back({block(i, "ln2.g"), {d}, ParamSpec::Init::ones});
    out.push_back({block(i, "ln2.b"), {d}, ParamSpec::Init::zeros});
    add_linear(out, block(i, "mlp.fc1"), d, cfg.mlp_hidden);
    add_linear(out, block(i, "mlp.fc2"), cfg.mlp_hidden, d);
  }
  out.push_back({"ln_f.g", {d}, ParamSpec::Init::ones});
  out.push_back({"ln_f.b", {d}, ParamSpec::Init::zeros});
  add_linear(out, "policy", d, cfg.act_dim);
  if (cfg.has_world()) {
    add_linear(out, "world.fc1", 2 * d, cfg.world_hidden);
    add_linear(out, "world.fc2", cfg.world_hidden, d);
  }
  add_critic(out, "critic", d, cfg);
  if (cfg.has_future_critic()) add_critic(out, "critic_future", 2 * d, cfg);
  return out;
}

template <typename T>
void ParamSet<T>::add(std::string name, Tensor<T> value) {
  if (lookup_.contains(name)) throw DataError("duplicate parameter '" + name + "'");
  lookup_.emplace(name, names_.size());
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
}

template <typename T>
bool ParamSet<T>::contains(std::string_view name) const {
  return lookup_.contains(std::string(name));
}

template <typename T>
std::size_t ParamSet<T>::index(std::string_view name) const {
  const auto it = lookup_.find(std::string(name));
  if (it == lookup_.end()) throw DataError("missing parameter '" + std::string(name) + "'");
  return it->second;
}

template <typename T>
std::size_t ParamSet<T>::numel() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

template <typename T>
std::size_t ParamSet<T>::numel(ParamGroup g) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < size(); ++i) {
    if (param_group(names_[i]) == g) n += tensors_[i].numel();
  }
  return n;
}

template class ParamSet<float>;
template class ParamSet<double>;

namespace {

Tensor<float> draw(const ParamSpec& spec, Rng& rng) {
  Tensor<float> t(spec.shape);
  switch (spec.init) {
    case ParamSpec::Init::zeros: break;
    case ParamSpec::Init::ones: t.fill(1.0f); break;
    case ParamSpec::Init::normal:
      for (auto& v : t.storage()) v = static_cast<float>(rng.truncated_normal(0.02));
      break;
  }
  return t;
}

}  // namespace

Params init_params(const ModelConfig& cfg, std::uint64_t seed) {
  Params p;
  const auto specs = param_specs(cfg);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    // One stream per tensor, so adding a head does not shift the others.
    Rng rng(mix_seed(seed, std::hash<std::string>{}(specs[i].name) ^ i));
    p.add(specs[i].name, draw(specs[i], rng));
  }
  return p;
}

void reinit_group(Params& params, const ModelConfig& cfg, ParamGroup group, std::uint64_t seed) {
  const auto specs = param_specs(cfg);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (param_group(specs[i].name) != group) continue;
    Rng rng(mix_seed(seed, std::hash<std::string>{}(specs[i].name) ^ i));
    params.get(specs[i].name) = draw(specs[i], rng);
  }
}

template <typename T>
Binder<T>::Binder(ad::Tape<T>& tape, const ParamSet<T>& params, Trainable trainable)
    : tape_(tape), params_(params), trainable_(std::move(trainable)), slot_(params.size(), 0) {}

template <typename T>
Var Binder<T>::operator()(std::string_view name) {
  const std::size_t i = params_.index(name);
  if (slot_[i]) return Var{slot_[i] - 1};
  const bool train = !trainable_ || trainable_(param_group(name));
  const Var v = tape_.leaf(params_.tensor(i), train);
  slot_[i] = v.id + 1;
  if (train) trainable_bound_.emplace_back(i, v);
  return v;
}

template class Binder<float>;
template class Binder<double>;

namespace {

template <typename T>
Var linear(Binder<T>& b, Var x, const std::string& prefix) {
  return b.tape().embed_linear(x, b(prefix + ".w"), b(prefix + ".b"));
}

template <typename T>
Var attention(Binder<T>& b, const ModelConfig& cfg, Var x, std::size_t layer) {
  auto& tape = b.tape();
  const std::size_t d = cfg.d_embed, dh = d / cfg.n_heads;
  const Var qkv = linear(b, x, block(layer, "attn.qkv"));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  heads.reserve(cfg.n_heads);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const Var q = tape.slice(qkv, 1, h * dh, dh);
    const Var k = tape.slice(qkv, 1, d + h * dh, dh);
    const Var v = tape.slice(qkv, 1, 2 * d + h * dh, dh);
    Var scores = tape.scale(tape.matmul(q, tape.transpose(k)), scale);
    scores = tape.softmax_lastdim(tape.causal_mask_fill(scores));
    heads.push_back(tape.matmul(scores, v));
  }
  const Var merged = cfg.n_heads == 1 ? heads[0] : tape.concat(heads, 1);
  return linear(b, merged, block(layer, "attn.out"));
}

template <typename T>
Var transformer(Binder<T>& b, const ModelConfig& cfg, Var x) {
  auto& tape = b.tape();
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    const Var h1 = tape.layernorm(x, b(block(i, "ln1.g")), b(block(i, "ln1.b")));
    x = tape.add(x, attention(b, cfg, h1, i));
    const Var h2 = tape.layernorm(x, b(block(i, "ln2.g")), b(block(i, "ln2.b")));
    const Var m = linear(b, tape.gelu(linear(b, h2, block(i, "mlp.fc1"))), block(i, "mlp.fc2"));
    x = tape.add(x, m);
  }
  return tape.layernorm(x, b("ln_f.g"), b("ln_f.b"));
}

// Selection matrix: row r picks column cols[r].
template <typename T>
Tensor<T> selector(std::size_t width, const std::vector<std::size_t>& cols) {
  Tensor<T> s(Shape{cols.size(), width});
  for (std::size_t r = 0; r < cols.size(); ++r) s.at(r, cols[r]) = T{1};
  return s;
}

template <typename T>
Encoding encode_impl(Binder<T>& b, const ModelConfig& cfg, Var obs, const Var* actions) {
  auto& tape = b.tape();
  const auto& ov = tape.value(obs);
  if (ov.rank() != 2 || ov.cols() != cfg.obs_dim) {
    throw ShapeError("encode: observations must be [n, " + std::to_string(cfg.obs_dim) + "], got " +
                     ad::shape_str(ov.shape()));
  }
  Encoding e;
  e.steps = ov.rows();
  if (e.steps < 1 || e.steps > cfg.seq_len) {
    throw ShapeError("encode: " + std::to_string(e.steps) + " steps outside [1, " + std::to_string(cfg.seq_len) +
                     "]");
  }
  if (actions) {
    const auto& av = tape.value(*actions);
    if (av.rank() != 2 || av.cols() != cfg.act_dim) {
      throw ShapeError("encode: actions must be [m, " + std::to_string(cfg.act_dim) + "], got " +
                       ad::shape_str(av.shape()));
    }
    e.actions = av.rows();
    if (e.actions != e.steps && e.actions + 1 != e.steps) {
      throw ShapeError("encode: " + std::to_string(e.actions) + " actions for " + std::to_string(e.steps) +
                       " states");
    }
  }
  const std::size_t n = e.steps, m = e.actions, k = n + m;

  e.state_tokens = tokenize_states(b, obs);
  Var stacked = e.state_tokens;
  if (m > 0) {
    e.action_tokens = tokenize_actions(b, *actions);
    stacked = tape.concat({e.state_tokens, e.action_tokens}, 0);
  }
  std::vector<std::size_t> order(k), state_rows(n), action_rows(m);
  for (std::size_t t = 0; t < n; ++t) {
    order[2 * t] = t;
    state_rows[t] = 2 * t;
  }
  for (std::size_t t = 0; t < m; ++t) {
    order[2 * t + 1] = n + t;
    action_rows[t] = 2 * t + 1;
  }
  Var x = m > 0 ? tape.matmul(tape.constant(selector<T>(k, order)), stacked) : stacked;
  x = tape.add(x, tape.slice(b("pos"), 0, 0, k));
  e.hidden = transformer(b, cfg, x);
  e.state_emb = m > 0 ? tape.matmul(tape.constant(selector<T>(k, state_rows)), e.hidden) : e.hidden;
  if (m > 0) e.action_emb = tape.matmul(tape.constant(selector<T>(k, action_rows)), e.hidden);
  return e;
}

template <typename T>
Var critic_mlp(Binder<T>& b, const ModelConfig& cfg, Var x, const std::string& prefix) {
  auto& tape = b.tape();
  for (std::size_t k = 0; k < cfg.cbf_layers; ++k) x = tape.relu(linear(b, x, prefix + ".fc" + std::to_string(k + 1)));
  return linear(b, x, prefix + ".out");
}

}  // namespace

template <typename T>
Var tokenize_states(Binder<T>& b, Var obs) {
  return linear(b, obs, "tok_state");
}

template <typename T>
Var tokenize_actions(Binder<T>& b, Var actions) {
  return linear(b, actions, "tok_action");
}

template <typename T>
Encoding encode(Binder<T>& b, const ModelConfig& cfg, Var obs, Var actions) {
  return encode_impl(b, cfg, obs, &actions);
}

template <typename T>
Encoding encode_states_only(Binder<T>& b, const ModelConfig& cfg, Var obs) {
  return encode_impl<T>(b, cfg, obs, nullptr);
}

template <typename T>
Var policy_head(Binder<T>& b, Var state_emb) {
  return linear(b, state_emb, "policy");
}

template <typename T>
Var world_head(Binder<T>& b, const ModelConfig& cfg, Var state_emb, Var action_emb) {
  if (!cfg.has_world()) throw UnsupportedVariantError("world model is not part of the NW variant");
  auto& tape = b.tape();
  const Var joint = tape.concat({state_emb, action_emb}, 1);
  return linear(b, tape.gelu(linear(b, joint, "world.fc1")), "world.fc2");
}

template <typename T>
Var critic_head(Binder<T>& b, const ModelConfig& cfg, Var state_emb) {
  return critic_mlp(b, cfg, state_emb, "critic");
}

template <typename T>
Var future_critic_head(Binder<T>& b, const ModelConfig& cfg, Var state_emb, Var action_emb, Var action_tokens) {
  auto& tape = b.tape();
  const std::size_t m = tape.value(action_emb).rows();
  // Action rows may be one short of state rows; align on the first m.
  const Var s = tape.value(state_emb).rows() == m ? state_emb : tape.slice(state_emb, 0, 0, m);
  switch (cfg.variant) {
    case CriticVariant::cw:
      return critic_mlp(b, cfg, world_head(b, cfg, s, action_emb), "critic");
    case CriticVariant::tf:
      return critic_mlp(b, cfg, tape.concat({s, action_tokens}, 1), "critic_future");
    case CriticVariant::nw:
    case CriticVariant::ef:
      break;
  }
  return critic_mlp(b, cfg, tape.concat({s, action_emb}, 1), "critic_future");
}

#define CONBAT_MODEL_INSTANTIATE(T)                                                                 \
  template Var tokenize_states<T>(Binder<T>&, Var);                                                 \
  template Var tokenize_actions<T>(Binder<T>&, Var);                                                \
  template Encoding encode<T>(Binder<T>&, const ModelConfig&, Var, Var);                            \
  template Encoding encode_states_only<T>(Binder<T>&, const ModelConfig&, Var);                     \
  template Var policy_head<T>(Binder<T>&, Var);                                                     \
  template Var world_head<T>(Binder<T>&, const ModelConfig&, Var, Var);                             \
  template Var critic_head<T>(Binder<T>&, const ModelConfig&, Var);                                 \
  template Var future_critic_head<T>(Binder<T>&, const ModelConfig&, Var, Var, Var);

CONBAT_MODEL_INSTANTIATE(float)
CONBAT_MODEL_INSTANTIATE(double)

bool Checkpoint::is_frozen(ParamGroup g) const {
  return std::find(frozen.begin(), frozen.end(), group_name(g)) != frozen.end();
}

namespace {
constexpr char kMagic[4] = {'C', 'B', 'C', 'K'};
}

// Layout (little endian):
//   "CBCK" u32 version u64 meta_len meta_json u32 n_tensors
//   per tensor: u32 name_len name u32 rank u64 dims[rank] f32 data[numel]
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto specs = param_specs(ckpt.config);
  if (specs.size() != ckpt.params.size()) {
    throw DataError("checkpoint: parameter count " + std::to_string(ckpt.params.size()) + " does not match config (" +
                    std::to_string(specs.size()) + ")");
  }
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    for (float v : ckpt.params.tensor(i).data()) {
      if (!std::isfinite(v)) throw NumericError("checkpoint: non-finite value in '" + ckpt.params.name(i) + "'");
    }
  }
  nlohmann::ordered_json meta;
  meta["config"] = ckpt.config.to_json();
  meta["phase"] = ckpt.phase;
  meta["frozen"] = ckpt.frozen;
  meta["info"] = ckpt.info;
  const std::string text = meta.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot write " + path.string());
  io::write_bytes(out, kMagic, 4);
  io::write_u32(out, kCheckpointVersion);
  io::write_u64(out, text.size());
  io::write_bytes(out, text.data(), text.size());
  io::write_u32(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const auto& name = ckpt.params.name(i);
    const auto& t = ckpt.params.tensor(i);
    io::write_u32(out, static_cast<std::uint32_t>(name.size()));
    io::write_bytes(out, name.data(), name.size());
    io::write_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto dim : t.shape()) io::write_u64(out, dim);
    io::write_f32s(out, t.data());
  }
  if (!out) throw DataError("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  io::Reader r(in, path.string());
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (!std::equal(magic, magic + 4, kMagic)) throw DataError(path.string() + ": not a checkpoint (bad magic)");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw DataError(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  }
  const auto meta_len = r.u64("metadata length");
  if (meta_len > (std::uint64_t{1} << 26)) throw DataError(path.string() + ": implausible metadata length");
  std::string text(meta_len, '\0');
  r.bytes(text.data(), text.size(), "metadata");

  Checkpoint ckpt;
  try {
    const auto meta = nlohmann::json::parse(text);
    ckpt.config = ModelConfig::from_json(meta.at("config"));
    ckpt.phase = meta.at("phase").get<int>();
    ckpt.frozen = meta.at("frozen").get<std::vector<std::string>>();
    ckpt.info = meta.at("info");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad checkpoint metadata: " + e.what());
  }
  try {
    ckpt.config.validate();
  } catch (const UsageError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  for (const auto& g : ckpt.frozen) parse_group(g);

  const auto specs = param_specs(ckpt.config);
  const auto count = r.u32("tensor count");
  if (count != specs.size()) {
    throw DataError(path.string() + ": " + std::to_string(count) + " tensors, config implies " +
                    std::to_string(specs.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.u32("tensor name length");
    if (name_len > 4096) throw DataError(path.string() + ": implausible tensor name length");
    std::string name(name_len, '\0');
    r.bytes(name.data(), name.size(), "tensor name");
    const auto rank = r.u32("tensor rank");
    if (rank > 8) throw DataError(path.string() + ": implausible rank for '" + name + "'");
    Shape shape(rank);
    for (auto& dim : shape) dim = r.u64("tensor shape");
    if (name != specs[i].name || shape != specs[i].shape) {
      throw DataError(path.string() + ": tensor " + std::to_string(i) + " is '" + name + "' " + ad::shape_str(shape) +
                      ", expected '" + specs[i].name + "' " + ad::shape_str(specs[i].shape));
    }
    ckpt.params.add(name, Tensor<float>(shape, r.f32s(ad::shape_numel(shape), "tensor data")));
  }
  if (!r.at_end()) throw DataError(path.string() + ": trailing bytes after last tensor");
  return ckpt;
}

}  // namespace conbat::model
