#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "conbat/autodiff/tape.hpp"
#include "conbat/autodiff/tensor.hpp"

namespace conbat::model {

/// Wiring of the future critic.
///   ef: C_f(state emb, action emb)       (default)
///   tf: C_f(state emb, action token)
///   nw: like ef, but the model has no world-model head
///   cw: no C_f; the future score is C(world(state emb, action emb))
enum class CriticVariant : std::uint8_t { nw, cw, tf, ef };

CriticVariant parse_variant(std::string_view name);
std::string_view variant_name(CriticVariant v);

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 8;
  std::size_t d_embed = 64;
  std::size_t seq_len = 16;
  std::size_t obs_dim = 2;
  std::size_t act_dim = 1;
  std::size_t mlp_hidden = 128;   // transformer block MLP
  std::size_t world_hidden = 64;  // world-model MLP
  std::size_t cbf_layers = 2;
  std::size_t cbf_units = 128;
  CriticVariant variant = CriticVariant::ef;

  bool has_world() const { return variant != CriticVariant::nw; }
  bool has_future_critic() const { return variant != CriticVariant::cw; }

  /// Throws UsageError.
  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Missing keys keep defaults; unknown keys raise DataError.
  static ModelConfig from_json(const nlohmann::json& j);
};

enum class ParamGroup : std::uint8_t { backbone, policy, world, critic, critic_future };

std::string_view group_name(ParamGroup g);
ParamGroup parse_group(std::string_view name);
ParamGroup param_group(std::string_view param_name);

struct ParamSpec {
  enum class Init : std::uint8_t { normal, zeros, ones };
  std::string name;
  ad::Shape shape;
  Init init = Init::normal;
};

/// Every tensor the configuration implies, in storage order.
std::vector<ParamSpec> param_specs(const ModelConfig& cfg);

/// Named tensors in a fixed order.
template <typename T>
class ParamSet {
 public:
  void add(std::string name, ad::Tensor<T> value);
  std::size_t size() const { return names_.size(); }
  bool contains(std::string_view name) const;
  std::size_t index(std::string_view name) const;  // throws DataError when absent

  const std::string& name(std::size_t i) const { return names_[i]; }
  const ad::Tensor<T>& tensor(std::size_t i) const { return tensors_[i]; }
  ad::Tensor<T>& tensor(std::size_t i) { return tensors_[i]; }
  const ad::Tensor<T>& get(std::string_view name) const { return tensors_[index(name)]; }
  ad::Tensor<T>& get(std::string_view name) { return tensors_[index(name)]; }
  const std::vector<std::string>& names() const { return names_; }

  std::size_t numel() const;
  std::size_t numel(ParamGroup g) const;

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], tensors_[i].template cast<U>());
    return out;
  }

  bool operator==(const ParamSet&) const = default;

 private:
  std::vector<std::string> names_;
  std::vector<ad::Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

using Params = ParamSet<float>;

/// Weights ~ truncated normal(0, 0.02), biases and shifts zero, gains one.
Params init_params(const ModelConfig& cfg, std::uint64_t seed);
/// Re-draws only the tensors of one group.
void reinit_group(Params& params, const ModelConfig& cfg, ParamGroup group, std::uint64_t seed);

/// Lazily places parameters on a tape. Tensors of groups for which
/// `trainable` is false are added as constants.
template <typename T>
class Binder {
 public:
  using Trainable = std::function<bool(ParamGroup)>;

  Binder(ad::Tape<T>& tape, const ParamSet<T>& params, Trainable trainable = {});

  ad::Var operator()(std::string_view name);
  ad::Tape<T>& tape() { return tape_; }
  const ParamSet<T>& params() const { return params_; }
  /// (param index, var) for every trainable tensor bound so far.
  const std::vector<std::pair<std::size_t, ad::Var>>& trainable_bound() const { return trainable_bound_; }

 private:
  ad::Tape<T>& tape_;
  const ParamSet<T>& params_;
  Trainable trainable_;
  std::vector<std::uint32_t> slot_;  // per param: var id + 1, 0 when unbound
  std::vector<std::pair<std::size_t, ad::Var>> trainable_bound_;
};

struct Encoding {
  ad::Var state_tokens;   // [n, d]
  ad::Var action_tokens;  // [m, d]
  ad::Var state_emb;      // [n, d]
  ad::Var action_emb;     // [m, d]
  ad::Var hidden;         // [n + m, d], interleaved
  std::size_t steps = 0;
  std::size_t actions = 0;
};

template <typename T>
ad::Var tokenize_states(Binder<T>& b, ad::Var obs);
template <typename T>
ad::Var tokenize_actions(Binder<T>& b, ad::Var actions);

/// Runs the causal transformer over s0, a0, s1, a1, ... . `obs` holds n
/// rows (1 <= n <= seq_len) and `actions` holds n or n - 1 rows; with
/// n - 1 the sequence ends on a state token.
template <typename T>
Encoding encode(Binder<T>& b, const ModelConfig& cfg, ad::Var obs, ad::Var actions);
/// Same, without action tokens (single state step or n - 1 == 0).
template <typename T>
Encoding encode_states_only(Binder<T>& b, const ModelConfig& cfg, ad::Var obs);

template <typename T>
ad::Var policy_head(Binder<T>& b, ad::Var state_emb);
/// Predicted next state token. Throws UnsupportedVariantError under nw.
template <typename T>
ad::Var world_head(Binder<T>& b, const ModelConfig& cfg, ad::Var state_emb, ad::Var action_emb);
/// Current-state score, [n, 1].
template <typename T>
ad::Var critic_head(Binder<T>& b, const ModelConfig& cfg, ad::Var state_emb);
/// Next-state score per step, [m, 1], wired per the variant.
template <typename T>
ad::Var future_critic_head(Binder<T>& b, const ModelConfig& cfg, ad::Var state_emb, ad::Var action_emb,
                           ad::Var action_tokens);

struct Checkpoint {
  ModelConfig config;
  Params params;
  int phase = 1;
  std::vector<std::string> frozen;  // group names held fixed while producing this checkpoint
  nlohmann::ordered_json info = nlohmann::ordered_json::object();

  bool is_frozen(ParamGroup g) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws DataError on bad magic, version, truncation or a name set that
/// does not match the stored configuration.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace conbat::model
