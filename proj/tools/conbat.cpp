// conbat: data generation, training, deployment and evaluation from the command line.
#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "conbat/common/error.hpp"
#include "conbat/common/parallel.hpp"
#include "conbat/deploy/deployer.hpp"
#include "conbat/eval/evaluator.hpp"
#include "conbat/expert/expert.hpp"
#include "conbat/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace conbat;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

// FNV-1a over the sorted file list of a directory; names and contents both count.
std::uint64_t hash_dir(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != "config.resolved.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const std::string& bytes) {
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 1099511628211ull;
    }
  };
  for (const auto& f : files) {
    mix(f.filename().string());
    std::ifstream in(f, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    mix(ss.str());
  }
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config " + path.string() + ": " + e.what());
  }
}

std::string json_to_flag_value(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string out;
    for (const auto& x : v) out += (out.empty() ? "" : ",") + json_to_flag_value(x);
    return out;
  }
  return v.dump();
}

/// Options common to every subcommand plus the config-file merge: keys name
/// long flags with '_' for '-', and values given on the command line win.
struct Command {
  CLI::App* app = nullptr;
  std::string config_path;
  std::string out_dir;
  int threads = 0;
  nlohmann::json extra = nlohmann::json::object();  // config sections that are not flags

  Command(CLI::App& parent, const std::string& name, const std::string& help,
          std::vector<std::string> sections = {})
      : sections_(std::move(sections)) {
    app = parent.add_subcommand(name, help);
    app->add_option("--config", config_path, "JSON file with option values (flags override it)");
    app->add_option("--out", out_dir, "Output directory")->required();
    app->add_option("--threads", threads, "Worker threads (default: all cores)")->check(CLI::NonNegativeNumber)->capture_default_str();
  }

  void merge_config() {
    if (config_path.empty()) return;
    const auto j = read_json_file(config_path);
    if (!j.is_object()) throw UsageError("config: expected a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (std::find(sections_.begin(), sections_.end(), key) != sections_.end()) {
        extra[key] = value;
        continue;
      }
      std::string flag = key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      CLI::Option* opt = app->get_option_no_throw("--" + flag);
      if (!opt || flag == "config") throw UsageError("config: unknown key '" + key + "'");
      if (opt->count() > 0) continue;
      if (value.is_array()) {
        for (const auto& x : value) opt->add_result(json_to_flag_value(x));
      } else {
        opt->add_result(json_to_flag_value(value));
      }
      try {
        opt->run_callback();
      } catch (const CLI::Error& e) {
        throw UsageError("config: bad value for '" + key + "': " + e.what());
      }
    }
  }

  /// Every option's final value, as given or defaulted.
  nlohmann::ordered_json resolved() const {
    nlohmann::ordered_json flags;
    for (const CLI::Option* opt : app->get_options()) {
      const std::string name = opt->get_lnames().empty() ? opt->get_name() : opt->get_lnames().front();
      if (name == "help" || name == "config") continue;
      const auto& res = opt->results();
      if (!res.empty()) {
        flags[name] = res.size() == 1 ? nlohmann::ordered_json(res.front()) : nlohmann::ordered_json(res);
      } else if (opt->get_type_size() == 0) {
        flags[name] = "false";
      } else {
        flags[name] = opt->get_default_str();
      }
    }
    return flags;
  }

  void prepare() {
    merge_config();
    if (threads > 0) set_thread_count(threads);
    fs::create_directories(out_dir);
  }

  void write_snapshot(const nlohmann::ordered_json& typed = nlohmann::ordered_json::object()) const {
    nlohmann::ordered_json j;
    j["command"] = app->get_name();
    j["flags"] = resolved();
    for (const auto& [k, v] : extra.items()) j["config_" + k] = v;
    for (const auto& [k, v] : typed.items()) j[k] = v;
    std::ofstream(fs::path(out_dir) / "config.resolved.json") << j.dump(2) << '\n';
  }

 private:
  std::vector<std::string> sections_;
};

data::EnvKind env_arg(const std::string& s) {
  try {
    return data::parse_env(s);
  } catch (const Error&) {
    throw UsageError("unknown env '" + s + "' (expected f110 or mushr)");
  }
}

// ---- gen-data -------------------------------------------------------------

struct GenData : Command {
  std::string env = "f110";
  std::size_t n = 100;
  double unsafe_frac = 0.3;
  std::uint64_t seed = 0;
  std::string source;
  std::size_t max_len = 0;

  explicit GenData(CLI::App& root) : Command(root, "gen-data", "Generate expert demonstrations") {
    app->add_option("--env", env, "f110 or mushr")->capture_default_str();
    app->add_option("--n", n, "Number of trajectories")->capture_default_str();
    app->add_option("--unsafe-frac", unsafe_frac, "Share of runs driven into a crash")->capture_default_str();
    app->add_option("--seed", seed)->capture_default_str();
    app->add_option("--source", source, "Track or map name or file (default: built-in)");
    app->add_option("--max-len", max_len, "Steps per run (0: environment default)")->capture_default_str();
  }

  int run() {
    prepare();
    if (n == 0) throw UsageError("--n must be >= 1");
    if (unsafe_frac < 0.0 || unsafe_frac > 1.0) throw UsageError("--unsafe-frac must be in [0, 1]");
    expert::GenerateConfig g;
    g.env = env_arg(env);
    g.n_traj = n;
    g.unsafe_fraction = unsafe_frac;
    g.seed = seed;
    g.source = source;
    g.max_len = max_len;
    expert::GenerateStats stats;
    const auto set = expert::generate_dataset(g, &stats);
    data::write_dataset(set, out_dir);
    write_snapshot();
    if (!stats.diagnostics.empty()) {
      std::cerr << "note: " << stats.diagnostics.size() << " generation attempts were retried (first: "
                << stats.diagnostics.front() << ")\n";
    }
    std::cout << "wrote " << set.trajectories.size() << " trajectories (" << set.count(data::Label::safe) << " safe, "
              << set.count(data::Label::unsafe) << " unsafe) to " << out_dir << "\n"
              << "dataset hash " << hex(hash_dir(out_dir)) << '\n';
    return 0;
  }
};

// ---- train ------------------------------------------------------------------

train::TrainConfig train_defaults(data::EnvKind env) {
  train::TrainConfig c;
  c.epochs_phase1 = env == data::EnvKind::mushr ? 50 : 10;
  return c;
}

struct Train : Command {
  int phase = 1;
  std::string data_dir, init;
  std::string variant;
  std::optional<std::size_t> epochs, batch_size, window_stride;
  std::optional<double> lr, unsafe_used, lambda_c, lambda_s, lambda_f, gamma, alpha;
  std::optional<std::uint64_t> seed;
  bool no_unsafe_phase1 = false;

  explicit Train(CLI::App& root) : Command(root, "train", "Train phase 1 (policy, world model) or phase 2 (critics)", {"model", "train"}) {
    app->add_option("--phase", phase, "1 or 2")->check(CLI::IsMember({1, 2}))->capture_default_str();
    app->add_option("--data", data_dir, "Dataset directory")->required();
    app->add_option("--init", init, "Phase-1 checkpoint (phase 2)");
    app->add_option("--variant", variant, "Critic variant for phase 1: NW, CW, TF or EF");
    app->add_option("--epochs", epochs);
    app->add_option("--batch-size", batch_size);
    app->add_option("--lr", lr);
    app->add_option("--unsafe-used", unsafe_used, "Share of unsafe trajectories used in phase 2");
    app->add_option("--lambda-c", lambda_c);
    app->add_option("--lambda-s", lambda_s);
    app->add_option("--lambda-f", lambda_f);
    app->add_option("--gamma", gamma);
    app->add_option("--alpha", alpha);
    app->add_option("--window-stride", window_stride);
    app->add_option("--seed", seed);
    app->add_flag("--no-unsafe-phase1", no_unsafe_phase1, "Leave unsafe runs out of the world-model loss");
  }

  int run() {
    prepare();
    const auto set = data::read_dataset(data_dir);
    auto cfg = train_defaults(set.env);
    if (extra.contains("train")) cfg = train::TrainConfig::from_json(extra["train"], cfg);
    if (epochs) (phase == 1 ? cfg.epochs_phase1 : cfg.epochs_phase2) = *epochs;
    if (batch_size) cfg.batch_size = *batch_size;
    if (lr) cfg.optimizer.lr = *lr;
    if (unsafe_used) cfg.unsafe_fraction_used = *unsafe_used;
    if (lambda_c) cfg.lambda_c = *lambda_c;
    if (lambda_s) cfg.lambda_s = *lambda_s;
    if (lambda_f) cfg.lambda_f = *lambda_f;
    if (gamma) cfg.gamma = *gamma;
    if (alpha) cfg.alpha = *alpha;
    if (window_stride) cfg.window_stride = *window_stride;
    if (seed) cfg.seed = *seed;
    if (no_unsafe_phase1) cfg.include_unsafe_in_phase1 = false;
    cfg.validate();

    auto progress = [](const train::EpochRecord& r) {
      std::cout << "phase " << r.phase << " epoch " << r.epoch << " loss " << r.total << '\n' << std::flush;
    };
    train::TrainResult result;
    nlohmann::ordered_json typed;
    typed["train"] = cfg.to_json();
    if (phase == 1) {
      if (!init.empty()) throw UsageError("--init is only used by phase 2");
      model::ModelConfig mc;
      if (extra.contains("model")) {
        try {
          mc = model::ModelConfig::from_json(extra["model"]);
        } catch (const DataError& e) {
          throw UsageError(e.what());
        }
      }
      if (!variant.empty()) mc.variant = model::parse_variant(variant);
      mc.obs_dim = set.obs_dim;
      mc.act_dim = set.act_dim;
      mc.validate();
      typed["model"] = mc.to_json();
      result = train::train_phase1(set, mc, cfg, progress);
    } else {
      if (init.empty()) throw UsageError("phase 2 needs --init <phase-1 checkpoint>");
      if (!variant.empty() || extra.contains("model")) throw UsageError("the model is fixed by the phase-1 checkpoint");
      const auto base = model::load_checkpoint(init);
      typed["model"] = base.config.to_json();
      result = train::train_phase2(set, base, cfg, progress);
    }
    const fs::path out(out_dir);
    model::save_checkpoint(result.checkpoint, out / "model.ckpt");
    train::write_losses_csv(result.curve, out / "losses.csv");
    write_snapshot(typed);
    std::cout << "wrote " << (out / "model.ckpt").string() << '\n';
    return 0;
  }
};

// ---- rollout / eval -----------------------------------------------------------

struct DeployFlags {
  std::string model_path, env = "f110", source;
  std::size_t episodes = 32;
  std::uint64_t seed = 0;
  deploy::DeployConfig cfg;

  void add(CLI::App* app) {
    app->add_option("--model", model_path, "Checkpoint")->required();
    app->add_option("--env", env, "f110 or mushr")->capture_default_str();
    app->add_option("--source", source, "Track or map (default: built-in)");
    app->add_option("--episodes", episodes)->capture_default_str();
    app->add_option("--seed", seed, "Seed of the first episode")->capture_default_str();
    app->add_option("--max-steps", cfg.max_steps)->capture_default_str();
    app->add_option("--eta", cfg.eta, "Rectification threshold")->capture_default_str();
    app->add_option("--opt-lr", cfg.opt_lr)->capture_default_str();
    app->add_option("--opt-steps", cfg.opt_steps, "0 deploys the policy alone")->capture_default_str();
    app->add_option("--lambda-delta", cfg.lambda_delta)->capture_default_str();
    app->add_option("--prompt-len", cfg.prompt_len)->capture_default_str();
    app->add_flag("--trace", cfg.record_trace, "Per-step actions and critic values in rollout.jsonl");
    app->add_flag("--timing", cfg.timing, "Wall-clock fields in rollout.jsonl");
  }

  std::vector<deploy::RolloutReport> run() const {
    cfg.validate();
    if (episodes == 0) throw UsageError("--episodes must be >= 1");
    const auto m = model::load_checkpoint(model_path);
    const auto envs = deploy::make_env_factory(env_arg(env), source);
    return deploy::rollout_many(*envs, m, cfg, seed, episodes);
  }
};

void print_summary(const eval::MetricSummary& s, const std::string& label = "") {
  std::cout << (label.empty() ? "" : label + ": ") << "collision rate " << s.collision_rate << "%, ATL " << s.atl
            << " over " << s.n_episodes << " episodes\n";
}

struct Rollout : Command {
  DeployFlags flags;
  explicit Rollout(CLI::App& root) : Command(root, "rollout", "Deploy a checkpoint in closed loop") {
    flags.add(app);
  }

  int run() {
    prepare();
    const auto reports = flags.run();
    const fs::path out(out_dir);
    deploy::write_rollouts_jsonl(reports, flags.cfg, out / "rollout.jsonl");
    const auto s = eval::summarize(reports);
    write_metrics(s, out / "metrics.json");
    write_snapshot({{"deploy", flags.cfg.to_json()}});
    print_summary(s);
    return 0;
  }

  void write_metrics(eval::MetricSummary s, const fs::path& path) const {
    if (!flags.cfg.timing) s.runtime_s = 0.0;
    eval::write_metrics_json(s, path);
  }
};

struct Eval : Command {
  DeployFlags flags;
  std::vector<std::string> compare;
  std::vector<std::string> labels;
  std::size_t bin_width = 25;

  explicit Eval(CLI::App& root) : Command(root, "eval", "Metrics and length histograms") {
    app->add_option("--model", flags.model_path, "Checkpoint to roll out");
    app->add_option("--env", flags.env)->capture_default_str();
    app->add_option("--source", flags.source);
    app->add_option("--episodes", flags.episodes)->capture_default_str();
    app->add_option("--seed", flags.seed)->capture_default_str();
    app->add_option("--max-steps", flags.cfg.max_steps)->capture_default_str();
    app->add_option("--eta", flags.cfg.eta)->capture_default_str();
    app->add_option("--opt-lr", flags.cfg.opt_lr)->capture_default_str();
    app->add_option("--opt-steps", flags.cfg.opt_steps)->capture_default_str();
    app->add_option("--lambda-delta", flags.cfg.lambda_delta)->capture_default_str();
    app->add_option("--prompt-len", flags.cfg.prompt_len)->capture_default_str();
    app->add_option("--compare", compare, "rollout.jsonl files to summarize side by side")->delimiter(',');
    app->add_option("--labels", labels, "Column names for --compare")->delimiter(',');
    app->add_option("--bin-width", bin_width, "Histogram bin width in steps")->capture_default_str();
  }

  int run() {
    prepare();
    const fs::path out(out_dir);
    std::vector<std::pair<std::string, std::vector<deploy::RolloutReport>>> runs;
    if (!compare.empty()) {
      if (!flags.model_path.empty()) throw UsageError("use either --model or --compare");
      if (!labels.empty() && labels.size() != compare.size()) throw UsageError("--labels needs one name per file");
      for (std::size_t i = 0; i < compare.size(); ++i) {
        const fs::path p(compare[i]);
        std::string label = labels.empty() ? p.parent_path().filename().string() : labels[i];
        if (label.empty()) label = p.stem().string();
        runs.emplace_back(label, deploy::read_rollouts_jsonl(p));
      }
    } else {
      if (flags.model_path.empty()) throw UsageError("eval needs --model or --compare");
      runs.emplace_back("model", flags.run());
      deploy::write_rollouts_jsonl(runs.back().second, flags.cfg, out / "rollout.jsonl");
    }
    nlohmann::ordered_json metrics;
    std::vector<std::pair<std::string, eval::Histogram>> columns;
    for (const auto& [label, reports] : runs) {
      auto s = eval::summarize(reports);
      if (!flags.cfg.timing && compare.empty()) s.runtime_s = 0.0;
      print_summary(s, label);
      metrics[label] = s.to_json();
      columns.emplace_back(label, eval::histogram(reports, bin_width));
    }
    std::ofstream(out / "metrics.json") << (runs.size() == 1 ? metrics.front() : metrics).dump(2) << '\n';
    eval::write_histogram_csv(columns, out / "hist.csv");
    write_snapshot({{"deploy", flags.cfg.to_json()}});
    return 0;
  }
};

// ---- relabel ---------------------------------------------------------------

struct Relabel : Command {
  std::string data_dir, concept_name = "not_straight";
  std::size_t k = 10;
  double epsilon = 0.02;

  explicit Relabel(CLI::App& root) : Command(root, "relabel", "Apply a new safety concept to a dataset") {
    app->add_option("--data", data_dir, "Dataset directory")->required();
    app->add_option("--concept", concept_name, "not_straight, identity, or a JSON rule file")->capture_default_str();
    app->add_option("--k", k, "not_straight: run length of near-zero actions")->capture_default_str();
    app->add_option("--epsilon", epsilon, "not_straight: |action| threshold")->capture_default_str();
  }

  int run() {
    prepare();
    if (fs::absolute(data_dir) == fs::absolute(out_dir)) throw UsageError("--out must differ from --data");
    const auto set = data::read_dataset(data_dir);
    data::RelabelRule rule;
    if (concept_name == "not_straight") {
      rule = data::not_straight_rule(k, epsilon);
    } else if (concept_name == "identity") {
      rule = data::RelabelRule{};
    } else {
      rule = data::load_rule(concept_name);
    }
    const auto out = data::relabel(set, rule);
    data::write_dataset(out, out_dir);
    write_snapshot();
    std::cout << "relabelled with '" << rule.name << "': " << out.count(data::Label::safe) << " safe, "
              << out.count(data::Label::unsafe) << " unsafe\n";
    return 0;
  }
};

// ---- export-cbf-map -----------------------------------------------------------

struct ExportMap : Command {
  std::string model_path, data_dir;
  eval::CbfMapConfig cfg;

  explicit ExportMap(CLI::App& root) : Command(root, "export-cbf-map", "Critic values along trajectories on a grid") {
    app->add_option("--model", model_path)->required();
    app->add_option("--data", data_dir, "Trajectories with world positions")->required();
    app->add_option("--resolution", cfg.resolution, "Cell size in meters")->capture_default_str();
    app->add_option("--radius", cfg.radius, "Interpolation radius in meters")->capture_default_str();
  }

  int run() {
    prepare();
    const auto m = model::load_checkpoint(model_path);
    const auto set = data::read_dataset(data_dir);
    const auto samples = eval::critic_samples(m, set);
    const auto cells = eval::interpolate_map(samples, eval::env_bounds(set.env, set.source), cfg);
    eval::write_cbf_map_csv(cells, fs::path(out_dir) / "cbfmap.csv");
    write_snapshot();
    std::size_t filled = 0;
    for (const auto& c : cells) filled += c.value.has_value();
    std::cout << samples.size() << " samples, " << filled << " of " << cells.size() << " cells filled\n";
    return 0;
  }
};

// ---- ablate-critic ---------------------------------------------------------

struct Ablate : Command {
  std::string data_dir;
  std::vector<std::string> variants{"NW", "CW", "TF", "EF"};
  std::optional<std::size_t> epochs1, epochs2;
  std::uint64_t seed = 0;
  DeployFlags deploy_flags;

  explicit Ablate(CLI::App& root) : Command(root, "ablate-critic", "Train and deploy every critic variant", {"train"}) {
    app->add_option("--data", data_dir)->required();
    app->add_option("--variants", variants)->delimiter(',')->capture_default_str();
    app->add_option("--epochs-phase1", epochs1);
    app->add_option("--epochs-phase2", epochs2);
    app->add_option("--seed", seed, "Training seed")->capture_default_str();
    app->add_option("--env-source", deploy_flags.source, "Track or map for deployment (default: the dataset's)");
    app->add_option("--episodes", deploy_flags.episodes)->capture_default_str();
    app->add_option("--rollout-seed", deploy_flags.seed)->capture_default_str();
    app->add_option("--max-steps", deploy_flags.cfg.max_steps)->capture_default_str();
    app->add_option("--eta", deploy_flags.cfg.eta)->capture_default_str();
    app->add_option("--opt-lr", deploy_flags.cfg.opt_lr)->capture_default_str();
    app->add_option("--opt-steps", deploy_flags.cfg.opt_steps)->capture_default_str();
  }

  int run() {
    prepare();
    const auto set = data::read_dataset(data_dir);
    auto cfg = train_defaults(set.env);
    if (extra.contains("train")) cfg = train::TrainConfig::from_json(extra["train"], cfg);
    if (epochs1) cfg.epochs_phase1 = *epochs1;
    if (epochs2) cfg.epochs_phase2 = *epochs2;
    cfg.seed = seed;
    cfg.validate();
    deploy_flags.cfg.validate();
    const auto envs = deploy::make_env_factory(set.env, deploy_flags.source.empty() ? set.source : deploy_flags.source);

    // Variants with a world model share one phase-1 run.
    std::map<bool, model::Checkpoint> phase1;
    const fs::path out(out_dir);
    std::ofstream table(out / "ablation.csv");
    table << "variant,collision_rate,atl,episodes\n";
    for (const auto& name : variants) {
      const auto variant = model::parse_variant(name);
      model::ModelConfig mc;
      mc.obs_dim = set.obs_dim;
      mc.act_dim = set.act_dim;
      mc.variant = variant;
      const bool world = mc.has_world();
      if (!phase1.contains(world)) {
        std::cout << "phase 1 " << (world ? "with" : "without") << " world model\n" << std::flush;
        phase1[world] = train::train_phase1(set, mc, cfg).checkpoint;
      }
      // Re-key the shared phase-1 tensors under this variant's layout.
      model::Checkpoint base = phase1[world];
      base.config.variant = variant;
      auto params = model::init_params(base.config, cfg.seed);
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (base.params.contains(params.name(i))) params.tensor(i) = base.params.get(params.name(i));
      }
      base.params = std::move(params);
      const auto trained = train::train_phase2(set, base, cfg).checkpoint;
      const auto dir = out / std::string(model::variant_name(variant));
      model::save_checkpoint(trained, dir / "model.ckpt");
      const auto reports = deploy::rollout_many(*envs, trained, deploy_flags.cfg, deploy_flags.seed, deploy_flags.episodes);
      deploy::write_rollouts_jsonl(reports, deploy_flags.cfg, dir / "rollout.jsonl");
      const auto s = eval::summarize(reports);
      print_summary(s, name);
      table << model::variant_name(variant) << ',' << s.collision_rate << ',' << s.atl << ',' << s.n_episodes << '\n';
    }
    write_snapshot({{"train", cfg.to_json()}, {"deploy", deploy_flags.cfg.to_json()}});
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App root{"Safe sequence-model policies with control barrier critics"};
  root.require_subcommand(1);
  GenData gen(root);
  Train train_cmd(root);
  Rollout rollout_cmd(root);
  Eval eval_cmd(root);
  Relabel relabel_cmd(root);
  ExportMap map_cmd(root);
  Ablate ablate_cmd(root);

  try {
    root.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = root.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen.app->parsed()) return gen.run();
    if (train_cmd.app->parsed()) return train_cmd.run();
    if (rollout_cmd.app->parsed()) return rollout_cmd.run();
    if (eval_cmd.app->parsed()) return eval_cmd.run();
    if (relabel_cmd.app->parsed()) return relabel_cmd.run();
    if (map_cmd.app->parsed()) return map_cmd.run();
    if (ablate_cmd.app->parsed()) return ablate_cmd.run();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UnsupportedVariantError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitUsage;
}
