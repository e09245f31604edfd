#include "conbat/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "conbat/common/binary_io.hpp"
#include "conbat/common/error.hpp"
#include "conbat/common/rng.hpp"

namespace conbat::data {

namespace {

constexpr char kTrajMagic[4] = {'C', 'B', 'T', 'J'};
constexpr std::uint32_t kTrajVersion = 1;
constexpr int kManifestVersion = 1;

std::string label_name(Label l) { return l == Label::safe ? "safe" : "unsafe"; }

std::string traj_file(std::uint32_t id) { return "traj_" + std::to_string(id) + ".bin"; }

}  // namespace

std::string env_name(EnvKind env) { return env == EnvKind::f110 ? "f110" : "mushr"; }

EnvKind parse_env(const std::string& name) {
  if (name == "f110") return EnvKind::f110;
  if (name == "mushr") return EnvKind::mushr;
  throw UsageError("unknown env '" + name + "' (expected f110 or mushr)");
}

bool Trajectory::has_event(std::size_t step, std::size_t len) const {
  if (!events.empty()) return events[step] != 0;
  return crashed && step + 1 == len;
}

std::size_t TrajectorySet::count(Label label) const {
  return static_cast<std::size_t>(
      std::count_if(trajectories.begin(), trajectories.end(), [&](const auto& t) { return t.label == label; }));
}

void TrajectorySet::validate() const {
  if (obs_dim == 0 || act_dim == 0) throw DataError("dataset: obs_dim and act_dim must be positive");
  for (const auto& t : trajectories) {
    const std::string where = "dataset: trajectory " + std::to_string(t.id);
    if (t.observations.size() % obs_dim != 0) throw DataError(where + ": observation block not a multiple of obs_dim");
    const std::size_t len = t.length(obs_dim);
    if (len == 0) throw DataError(where + ": empty");
    if (t.actions.size() != len * act_dim) throw DataError(where + ": action count does not match observations");
    if (t.positions.size() != len * 2) throw DataError(where + ": position count does not match observations");
    if (!t.events.empty() && t.events.size() != len) throw DataError(where + ": event count does not match length");
    if ((t.label == Label::unsafe) != t.crashed) throw DataError(where + ": label disagrees with crash flag");
    for (float v : t.observations) {
      if (!std::isfinite(v)) throw DataError(where + ": non-finite observation");
    }
    for (float v : t.actions) {
      if (!std::isfinite(v)) throw DataError(where + ": non-finite action");
    }
  }
}

void write_dataset(const TrajectorySet& set, const std::filesystem::path& dir) {
  set.validate();
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "conbat-dataset";
  manifest["version"] = kManifestVersion;
  manifest["env"] = env_name(set.env);
  manifest["source"] = set.source;
  manifest["obs_dim"] = set.obs_dim;
  manifest["act_dim"] = set.act_dim;
  manifest["seed"] = set.seed;
  manifest["safety_concept"] = set.safety_concept;
  manifest["n_traj"] = set.trajectories.size();
  manifest["n_safe"] = set.count(Label::safe);
  manifest["n_unsafe"] = set.count(Label::unsafe);
  auto& entries = manifest["trajectories"] = nlohmann::ordered_json::array();
  for (const auto& t : set.trajectories) {
    const std::size_t len = t.length(set.obs_dim);
    entries.push_back({{"id", t.id}, {"file", traj_file(t.id)}, {"length", len}, {"label", label_name(t.label)}});
    std::ofstream out(dir / traj_file(t.id), std::ios::binary);
    if (!out) throw DataError("dataset: cannot write " + (dir / traj_file(t.id)).string());
    io::write_bytes(out, kTrajMagic, 4);
    io::write_u32(out, kTrajVersion);
    io::write_u32(out, t.id);
    io::write_u32(out, static_cast<std::uint32_t>(len));
    io::write_u32(out, static_cast<std::uint32_t>(set.obs_dim));
    io::write_u32(out, static_cast<std::uint32_t>(set.act_dim));
    io::write_u32(out, (t.crashed ? 1u : 0u) | (t.events.empty() ? 0u : 2u));
    io::write_f32s(out, t.observations);
    io::write_f32s(out, t.actions);
    io::write_f32s(out, t.positions);
    if (!t.events.empty()) io::write_bytes(out, t.events.data(), t.events.size());
  }
  std::ofstream out(dir / "dataset.json");
  if (!out) throw DataError("dataset: cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

TrajectorySet read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "dataset.json";
  std::ifstream in(manifest_path);
  if (!in) throw DataError("dataset: cannot open " + manifest_path.string());
  TrajectorySet set;
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
    if (manifest.at("format").get<std::string>() != "conbat-dataset") throw DataError("not a conbat dataset");
    if (manifest.at("version").get<int>() != kManifestVersion) {
      throw DataError("unsupported version " + manifest.at("version").dump());
    }
    set.env = parse_env(manifest.at("env").get<std::string>());
    set.source = manifest.at("source").get<std::string>();
    set.obs_dim = manifest.at("obs_dim").get<std::size_t>();
    set.act_dim = manifest.at("act_dim").get<std::size_t>();
    set.seed = manifest.at("seed").get<std::uint64_t>();
    set.safety_concept = manifest.at("safety_concept").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("dataset: bad manifest " + manifest_path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw DataError("dataset: bad manifest " + manifest_path.string() + ": " + e.what());
  }

  for (const auto& entry : manifest.at("trajectories")) {
    const auto path = dir / entry.at("file").get<std::string>();
    std::ifstream tin(path, std::ios::binary);
    if (!tin) throw DataError("dataset: cannot open " + path.string());
    io::Reader r(tin, path.string());
    char magic[4];
    r.bytes(magic, 4, "magic");
    if (!std::equal(magic, magic + 4, kTrajMagic)) throw DataError(path.string() + ": bad magic");
    if (r.u32("version") != kTrajVersion) throw DataError(path.string() + ": unsupported version");
    Trajectory t;
    t.id = r.u32("id");
    const std::size_t len = r.u32("length");
    if (r.u32("obs_dim") != set.obs_dim || r.u32("act_dim") != set.act_dim) {
      throw DataError(path.string() + ": dims disagree with manifest");
    }
    const std::uint32_t flags = r.u32("flags");
    t.crashed = flags & 1u;
    t.label = t.crashed ? Label::unsafe : Label::safe;
    t.observations = r.f32s(len * set.obs_dim, "observations");
    t.actions = r.f32s(len * set.act_dim, "actions");
    t.positions = r.f32s(len * 2, "positions");
    if (flags & 2u) {
      t.events.resize(len);
      r.bytes(t.events.data(), len, "events");
    }
    if (!r.at_end()) throw DataError(path.string() + ": trailing bytes");
    if (entry.at("length").get<std::size_t>() != len || entry.at("id").get<std::uint32_t>() != t.id ||
        entry.at("label").get<std::string>() != label_name(t.label)) {
      throw DataError(path.string() + ": header disagrees with manifest entry");
    }
    set.trajectories.push_back(std::move(t));
  }
  set.validate();
  return set;
}

LabeledStateSet build_safe_sets(const TrajectorySet& set, std::size_t context) {
  if (context == 0) throw UsageError("build_safe_sets: context must be >= 1");
  LabeledStateSet out;
  out.tags.reserve(set.trajectories.size());
  const std::size_t guard = 2 * context - 1;
  for (std::size_t i = 0; i < set.trajectories.size(); ++i) {
    const auto& t = set.trajectories[i];
    const std::size_t len = set.length(i);
    std::vector<StepTag> tags(len, StepTag::safe);
    for (std::size_t u = 0; u < len; ++u) {
      if (!t.has_event(u, len)) continue;
      for (std::size_t s = u >= guard ? u - guard : 0; s < u; ++s) {
        if (tags[s] == StepTag::safe) tags[s] = StepTag::unlabeled;
      }
      tags[u] = StepTag::unsafe;
    }
    for (auto tag : tags) {
      if (tag == StepTag::safe) ++out.n_safe;
      else if (tag == StepTag::unsafe) ++out.n_unsafe;
      else ++out.n_unlabeled;
    }
    out.tags.push_back(std::move(tags));
  }
  return out;
}

std::vector<WindowRef> enumerate_windows(const TrajectorySet& set, const WindowOptions& opts,
                                         std::span<const std::uint32_t> trajectory_ids) {
  if (opts.context == 0) throw UsageError("enumerate_windows: context must be >= 1");
  if (opts.stride == 0) throw UsageError("enumerate_windows: stride must be >= 1");
  std::vector<WindowRef> out;
  for (const std::uint32_t i : trajectory_ids) {
    const std::size_t len = set.length(i);
    if (len < opts.context) {
      out.push_back({i, 0, static_cast<std::uint32_t>(len)});
      if (opts.prefixes) {
        for (std::size_t n = 1; n < len; ++n) out.push_back({i, 0, static_cast<std::uint32_t>(n)});
      }
      continue;
    }
    if (opts.prefixes) {
      for (std::size_t n = 1; n < opts.context; ++n) out.push_back({i, 0, static_cast<std::uint32_t>(n)});
    }
    const std::size_t last = len - opts.context;
    for (std::size_t s = 0; s <= last; s += opts.stride) {
      out.push_back({i, static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(opts.context)});
    }
    if (last % opts.stride != 0) {
      out.push_back({i, static_cast<std::uint32_t>(last), static_cast<std::uint32_t>(opts.context)});
    }
  }
  return out;
}

std::vector<WindowRef> enumerate_windows(const TrajectorySet& set, const WindowOptions& opts) {
  std::vector<std::uint32_t> ids(set.trajectories.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::uint32_t>(i);
  return enumerate_windows(set, opts, ids);
}

WindowSample make_window(const TrajectorySet& set, const LabeledStateSet* labels, const WindowRef& ref,
                         std::size_t context) {
  const auto& t = set.trajectories.at(ref.traj);
  const std::size_t len = set.length(ref.traj);
  if (ref.length == 0 || ref.length > context || ref.start + ref.length > len) {
    throw UsageError("make_window: window out of range for trajectory " + std::to_string(t.id));
  }
  WindowSample w;
  w.ref = ref;
  w.valid = ref.length;
  w.obs.assign(context * set.obs_dim, 0.0f);
  w.actions.assign(context * set.act_dim, 0.0f);
  w.tags.assign(context, StepTag::unlabeled);
  std::copy_n(t.observations.begin() + static_cast<std::ptrdiff_t>(ref.start * set.obs_dim), ref.length * set.obs_dim,
              w.obs.begin());
  std::copy_n(t.actions.begin() + static_cast<std::ptrdiff_t>(ref.start * set.act_dim), ref.length * set.act_dim,
              w.actions.begin());
  if (labels) {
    for (std::size_t k = 0; k < ref.length; ++k) w.tags[k] = labels->tags.at(ref.traj).at(ref.start + k);
  }
  const std::size_t after = ref.start + ref.length;
  w.has_next = after < len;
  w.next_obs.assign(set.obs_dim, 0.0f);
  if (w.has_next) {
    std::copy_n(t.observations.begin() + static_cast<std::ptrdiff_t>(after * set.obs_dim), set.obs_dim,
                w.next_obs.begin());
  }
  return w;
}

WindowIterator::WindowIterator(std::vector<WindowRef> windows, std::size_t batch_size, std::uint64_t seed)
    : windows_(std::move(windows)), batch_size_(batch_size), seed_(seed) {
  if (batch_size_ == 0) throw UsageError("window iterator: batch_size must be >= 1");
  start_epoch(0);
}

void WindowIterator::start_epoch(std::uint64_t epoch) {
  order_.resize(windows_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  Rng rng(mix_seed(seed_, epoch));
  rng.shuffle(std::span<std::size_t>(order_));
  cursor_ = 0;
}

bool WindowIterator::next(std::vector<WindowRef>& batch) {
  batch.clear();
  if (cursor_ >= order_.size()) return false;
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  for (; cursor_ < end; ++cursor_) batch.push_back(windows_[order_[cursor_]]);
  return true;
}

std::size_t WindowIterator::batches_per_epoch() const { return (windows_.size() + batch_size_ - 1) / batch_size_; }

RelabelRule not_straight_rule(std::size_t k, double epsilon) {
  RelabelRule r;
  r.kind = RelabelRule::Kind::action_run;
  r.run_length = k;
  r.epsilon = epsilon;
  r.keep_collisions = true;
  r.name = "not_straight";
  return r;
}

RelabelRule parse_rule(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("rule: invalid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("rule") || !j["rule"].is_string()) {
    throw DataError("rule: expected an object with a string 'rule' field");
  }
  RelabelRule r;
  const std::string kind = j["rule"].get<std::string>();
  r.name = j.value("name", kind);
  auto allow_only = [&](std::initializer_list<const char*> keys) {
    for (const auto& [key, value] : j.items()) {
      if (key == "rule" || key == "name") continue;
      if (std::find_if(keys.begin(), keys.end(), [&](const char* k) { return key == k; }) == keys.end()) {
        throw DataError("rule: unknown key '" + key + "' for rule '" + kind + "'");
      }
    }
  };
  try {
    if (kind == "identity") {
      allow_only({});
      r.kind = RelabelRule::Kind::identity;
    } else if (kind == "all_safe") {
      allow_only({});
      r.kind = RelabelRule::Kind::all_safe;
    } else if (kind == "always_unsafe") {
      allow_only({});
      r.kind = RelabelRule::Kind::always_unsafe;
    } else if (kind == "action_run" || kind == "not_straight") {
      allow_only({"k", "epsilon", "keep_collisions"});
      r.kind = RelabelRule::Kind::action_run;
      r.run_length = j.value("k", std::size_t{10});
      r.epsilon = j.value("epsilon", 0.02);
      r.keep_collisions = j.value("keep_collisions", true);
      if (r.run_length == 0 || !(r.epsilon > 0.0)) throw DataError("rule: k must be >= 1 and epsilon > 0");
    } else {
      throw DataError("rule: unknown rule '" + kind + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("rule: bad parameter: ") + e.what());
  }
  return r;
}

RelabelRule load_rule(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("rule: cannot open " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_rule(text);
  } catch (const DataError& e) {
    throw DataError(std::string(e.what()) + " (" + path.string() + ")");
  }
}

std::vector<std::uint8_t> rule_events(const RelabelRule& rule, const Trajectory& traj, std::size_t obs_dim,
                                      std::size_t act_dim) {
  const std::size_t len = traj.length(obs_dim);
  switch (rule.kind) {
    case RelabelRule::Kind::identity:
      return traj.events;
    case RelabelRule::Kind::all_safe:
      return std::vector<std::uint8_t>(len, 0);
    case RelabelRule::Kind::always_unsafe: {
      std::vector<std::uint8_t> ev(len, 0);
      ev[len - 1] = 1;
      return ev;
    }
    case RelabelRule::Kind::action_run: {
      std::vector<std::uint8_t> ev(len, 0);
      std::size_t run = 0;
      for (std::size_t s = 0; s < len; ++s) {
        bool straight = true;
        for (std::size_t a = 0; a < act_dim; ++a) {
          straight = straight && std::abs(traj.actions[s * act_dim + a]) < rule.epsilon;
        }
        run = straight ? run + 1 : 0;
        const bool run_ends = straight && (s + 1 == len || [&] {
          for (std::size_t a = 0; a < act_dim; ++a) {
            if (!(std::abs(traj.actions[(s + 1) * act_dim + a]) < rule.epsilon)) return true;
          }
          return false;
        }());
        if (run_ends && run >= rule.run_length) ev[s] = 1;
      }
      if (rule.keep_collisions) {
        for (std::size_t s = 0; s < len; ++s) {
          if (traj.has_event(s, len)) ev[s] = 1;
        }
      }
      return ev;
    }
  }
  return {};
}

TrajectorySet relabel(const TrajectorySet& set, const RelabelRule& rule) {
  TrajectorySet out = set;
  if (rule.kind != RelabelRule::Kind::identity) out.safety_concept = rule.name;
  for (auto& t : out.trajectories) {
    try {
      t.events = rule_events(rule, t, set.obs_dim, set.act_dim);
    } catch (const Error& e) {
      throw DataError("relabel: trajectory " + std::to_string(t.id) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace conbat::data
