// Copyright 2026 The flowrl-lab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Experiment harness: JSON config parsing with defaults and strict keys,
// single runs, seed/parameter sweeps with aggregate tables, and plot-data
// export. The config schema is documented in docs/config_schema.md.

#ifndef FLOWRL_EXPERIMENT_HPP_
#define FLOWRL_EXPERIMENT_HPP_

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "flowrl/checkpoint.hpp"
#include "flowrl/envs.hpp"
#include "flowrl/errors.hpp"
#include "flowrl/metrics.hpp"
#include "flowrl/trainer.hpp"

#ifndef FLOWRL_GIT_DESCRIBE
#define FLOWRL_GIT_DESCRIBE "unknown"
#endif

namespace flowrl {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

// Refusal to reuse a non-empty output directory without --force.
class OutputExists : public Error {
 public:
  using Error::Error;
};

struct SweepSpec {
  std::string parameter;       // "algorithm" or "<section>.<key>"
  nlohmann::json values = nlohmann::json::array();
  std::vector<std::uint64_t> seeds{0};
};

struct ExperimentSpec {
  Algorithm algorithm = Algorithm::flowrl;
  EnvSpec env;
  PolicyConfig policy;
  TrainConfig train;
  EvalConfig eval;
  std::optional<SweepSpec> sweep;
};

// ---------------------------------------------------------------------------
// Enum spellings.

namespace detail {

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

inline constexpr EnumName<Algorithm> kAlgorithms[] = {{Algorithm::flowrl, "flowrl"},
                                                       {Algorithm::grpo, "grpo"},
                                                       {Algorithm::ppo, "ppo"},
                                                       {Algorithm::rpp, "rpp"},
                                                       {Algorithm::tb, "tb"}};
inline constexpr EnumName<OptimizerKind> kOptimizers[] = {{OptimizerKind::sgd, "sgd"},
                                                          {OptimizerKind::adam, "adam"}};
inline constexpr EnumName<RewardMode> kRewardModes[] = {{RewardMode::group, "group"},
                                                        {RewardMode::raw, "raw"}};
inline constexpr EnumName<LengthNorm> kLengthNorms[] = {{LengthNorm::automatic, "auto"},
                                                        {LengthNorm::on, "on"},
                                                        {LengthNorm::off, "off"}};
inline constexpr EnumName<PolicyKind> kPolicyKinds[] = {{PolicyKind::tabular, "tabular"},
                                                        {PolicyKind::mlp, "mlp"}};

template <typename E, std::size_t N>
const char* enum_name(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table) {
    if (e.value == v) return e.name;
  }
  return "?";
}

template <typename E, std::size_t N>
E enum_value(const EnumName<E> (&table)[N], const std::string& s, const std::string& path) {
  std::string allowed;
  for (const auto& e : table) {
    if (s == e.name) return e.value;
    allowed += (allowed.empty() ? "" : ", ") + std::string(e.name);
  }
  throw ConfigError("invalid value '" + s + "' at " + path + " (allowed: " + allowed + ")");
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

inline std::string nearest(const std::string& key, const std::vector<std::string>& valid) {
  // Rank: keys containing what was typed (truncations) first, then edit distance.
  std::string best;
  std::pair<int, std::size_t> best_rank{2, std::numeric_limits<std::size_t>::max()};
  for (const auto& v : valid) {
    const bool contains = !key.empty() && v.find(key) != std::string::npos;
    const std::pair<int, std::size_t> rank =
        contains ? std::pair<int, std::size_t>{0, v.size() - key.size()}
                 : std::pair<int, std::size_t>{1, edit_distance(key, v)};
    if (rank < best_rank) {
      best_rank = rank;
      best = v;
    }
  }
  return best;
}

inline const char* json_kind(const nlohmann::json& v) {
  switch (v.type()) {
    case nlohmann::json::value_t::null: return "null";
    case nlohmann::json::value_t::boolean: return "boolean";
    case nlohmann::json::value_t::number_integer:
    case nlohmann::json::value_t::number_unsigned: return "integer";
    case nlohmann::json::value_t::number_float: return "number";
    case nlohmann::json::value_t::string: return "string";
    case nlohmann::json::value_t::array: return "array";
    case nlohmann::json::value_t::object: return "object";
    default: return "value";
  }
}

[[noreturn]] inline void type_error(const std::string& path, const char* expected,
                                    const nlohmann::json& got) {
  throw ConfigError("type mismatch at " + path + ": expected " + expected + ", got " +
                    json_kind(got));
}

// Typed readers. Each reads obj[key] into `out` when present.
class Section {
 public:
  Section(const nlohmann::json& obj, std::string path) : obj_(obj), path_(std::move(path)) {}

  void check_keys(const std::vector<std::string>& valid) const {
    for (const auto& [k, v] : obj_.items()) {
      if (std::find(valid.begin(), valid.end(), k) == valid.end()) {
        throw ConfigError("unknown key '" + where(k) + "'; did you mean '" + nearest(k, valid) +
                          "'?");
      }
    }
  }

  template <typename Int>
  void integer(const char* key, Int& out, long long lo = std::numeric_limits<long long>::min()) const {
    if (!obj_.contains(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number_integer()) type_error(where(key), "integer", v);
    const long long x = v.get<long long>();
    if (x < lo) throw ConfigError(where(key) + " must be >= " + std::to_string(lo));
    out = static_cast<Int>(x);
  }

  void real(const char* key, double& out) const {
    if (!obj_.contains(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number()) type_error(where(key), "number", v);
    out = v.get<double>();
  }

  void boolean(const char* key, bool& out) const {
    if (!obj_.contains(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_boolean()) type_error(where(key), "boolean", v);
    out = v.get<bool>();
  }

  bool string(const char* key, std::string& out) const {
    if (!obj_.contains(key)) return false;
    const auto& v = obj_.at(key);
    if (!v.is_string()) type_error(where(key), "string", v);
    out = v.get<std::string>();
    return true;
  }

  template <typename E, std::size_t N>
  void enumeration(const char* key, const EnumName<E> (&table)[N], E& out) const {
    std::string s;
    if (string(key, s)) out = enum_value(table, s, where(key));
  }

  void reals(const char* key, std::vector<double>& out) const {
    if (!obj_.contains(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_array()) type_error(where(key), "array of numbers", v);
    std::vector<double> r;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) type_error(where(key) + "[" + std::to_string(i) + "]", "number", v[i]);
      r.push_back(v[i].get<double>());
    }
    out = std::move(r);
  }

  bool has(const char* key) const { return obj_.contains(key); }
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const nlohmann::json& obj_;
  std::string path_;
};

inline const std::vector<std::string> kTopKeys{"algorithm", "env", "policy", "train", "eval", "sweep"};
inline const std::vector<std::string> kEnvKeys{
    "family", "vocab_size", "max_len", "eos",   "num_modes",   "radius", "tau", "peak",
    "peaks",  "floor",      "cutoff",  "num_prompts", "dims", "side",   "seed"};
inline const std::vector<std::string> kPolicyKeys{"kind",       "embed_dim", "hidden",
                                                  "init_scale", "reference", "reference_seed"};
inline const std::vector<std::string> kTrainKeys{
    "steps",          "prompts_per_batch", "group_size",         "micro_batches_per_rollout",
    "optimizer",      "lr_policy",         "partition_lr_multiplier", "lr_critic",
    "beta",           "epsilon",           "lambda",             "reward_norm",
    "length_norm",    "importance_sampling", "seed",             "partition_hidden",
    "critic_hidden",  "value_coef",        "checkpoint_interval"};
inline const std::vector<std::string> kEvalKeys{"interval", "samples", "enumerate", "mass_threshold"};
inline const std::vector<std::string> kSweepKeys{"parameter", "values", "seeds"};

inline const nlohmann::json& section_object(const nlohmann::json& root, const char* key) {
  static const nlohmann::json empty = nlohmann::json::object();
  if (!root.contains(key)) return empty;
  const auto& v = root.at(key);
  if (!v.is_object()) type_error(key, "object", v);
  return v;
}

// Parses everything except the sweep section.
inline ExperimentSpec parse_core(const nlohmann::json& root) {
  if (!root.is_object()) type_error("<root>", "object", root);
  Section top(root, "");
  top.check_keys(kTopKeys);
  ExperimentSpec spec;
  top.enumeration("algorithm", kAlgorithms, spec.algorithm);

  const Section env(section_object(root, "env"), "env");
  env.check_keys(kEnvKeys);
  auto& e = spec.env;
  env.string("family", e.family);
  env.integer("vocab_size", e.vocab_size, 1);
  env.integer("max_len", e.max_len, 1);
  env.boolean("eos", e.eos);
  env.integer("num_modes", e.num_modes, 1);
  env.integer("radius", e.radius, 0);
  env.real("tau", e.tau);
  env.real("peak", e.peak);
  env.reals("peaks", e.peaks);
  env.real("floor", e.floor);
  env.integer("cutoff", e.cutoff, 0);
  env.integer("num_prompts", e.num_prompts, 1);
  env.integer("dims", e.dims, 1);
  env.integer("side", e.side, 2);
  env.integer("seed", e.seed, 0);

  const Section pol(section_object(root, "policy"), "policy");
  pol.check_keys(kPolicyKeys);
  auto& p = spec.policy;
  pol.enumeration("kind", kPolicyKinds, p.kind);
  pol.integer("embed_dim", p.embed_dim, 1);
  pol.integer("hidden", p.hidden, 1);
  pol.real("init_scale", p.init_scale);
  if (pol.string("reference", p.reference) && p.reference != "uniform" &&
      p.reference != "random_mlp") {
    throw ConfigError("invalid value '" + p.reference +
                      "' at policy.reference (allowed: uniform, random_mlp)");
  }
  pol.integer("reference_seed", p.reference_seed, 0);

  const Section tr(section_object(root, "train"), "train");
  tr.check_keys(kTrainKeys);
  auto& t = spec.train;
  t.algorithm = spec.algorithm;
  t.lr_policy = p.kind == PolicyKind::tabular ? 1e-2 : 1e-3;
  tr.integer("steps", t.steps, 0);
  tr.integer("prompts_per_batch", t.prompts_per_batch, 1);
  tr.integer("group_size", t.group_size, 1);
  tr.integer("micro_batches_per_rollout", t.micro_batches_per_rollout, 1);
  tr.enumeration("optimizer", kOptimizers, t.optimizer);
  tr.real("lr_policy", t.lr_policy);
  tr.real("partition_lr_multiplier", t.partition_lr_multiplier);
  tr.real("lr_critic", t.lr_critic);
  tr.real("beta", t.beta);
  tr.real("epsilon", t.epsilon);
  tr.real("lambda", t.lambda);
  tr.enumeration("reward_norm", kRewardModes, t.reward_norm);
  tr.enumeration("length_norm", kLengthNorms, t.length_norm);
  tr.boolean("importance_sampling", t.importance_sampling);
  tr.integer("seed", t.seed, 0);
  tr.integer("partition_hidden", t.partition_hidden, 1);
  tr.integer("critic_hidden", t.critic_hidden, 1);
  tr.real("value_coef", t.value_coef);
  tr.integer("checkpoint_interval", t.checkpoint_interval, 0);

  const Section ev(section_object(root, "eval"), "eval");
  ev.check_keys(kEvalKeys);
  auto& c = spec.eval;
  ev.integer("interval", c.interval, 0);
  ev.integer("samples", c.samples, 1);
  ev.boolean("enumerate", c.enumerate);
  ev.real("mass_threshold", c.mass_threshold);

  validate(spec.env);
  spec.train.validate();
  return spec;
}

// Splits "train.beta" into {"train", "beta"}; "algorithm" into {"", "algorithm"}.
inline std::pair<std::string, std::string> split_parameter(const std::string& path) {
  if (path == "algorithm") return {"", "algorithm"};
  const auto dot = path.find('.');
  if (dot == std::string::npos) {
    throw ConfigError("sweep.parameter '" + path + "' must be 'algorithm' or '<section>.<key>'");
  }
  const std::string section = path.substr(0, dot);
  const std::string key = path.substr(dot + 1);
  const std::vector<std::string>* keys = nullptr;
  if (section == "env") keys = &kEnvKeys;
  if (section == "policy") keys = &kPolicyKeys;
  if (section == "train") keys = &kTrainKeys;
  if (section == "eval") keys = &kEvalKeys;
  if (!keys) {
    throw ConfigError("sweep.parameter '" + path + "' names unknown section '" + section +
                      "'; did you mean '" + nearest(section, {"env", "policy", "train", "eval"}) +
                      "'?");
  }
  if (std::find(keys->begin(), keys->end(), key) == keys->end()) {
    throw ConfigError("sweep.parameter '" + path + "' names unknown key; did you mean '" +
                      section + "." + nearest(key, *keys) + "'?");
  }
  return {section, key};
}

inline nlohmann::json with_parameter(nlohmann::json root, const std::string& parameter,
                                     const nlohmann::json& value) {
  const auto [section, key] = split_parameter(parameter);
  if (section.empty()) {
    root[key] = value;
  } else {
    root[section][key] = value;
  }
  return root;
}

}  // namespace detail

// Resolved config as JSON, keys in schema order. Parsing this object
// yields the same spec.
inline ordered_json to_json(const ExperimentSpec& spec) {
  using detail::enum_name;
  ordered_json j;
  j["algorithm"] = enum_name(detail::kAlgorithms, spec.algorithm);
  const auto& e = spec.env;
  j["env"] = {{"family", e.family},   {"vocab_size", e.vocab_size}, {"max_len", e.max_len},
              {"eos", e.eos},         {"num_modes", e.num_modes},   {"radius", e.radius},
              {"tau", e.tau},         {"peak", e.peak},             {"peaks", e.peaks},
              {"floor", e.floor},     {"cutoff", e.cutoff},         {"num_prompts", e.num_prompts},
              {"dims", e.dims},       {"side", e.side},             {"seed", e.seed}};
  const auto& p = spec.policy;
  j["policy"] = {{"kind", enum_name(detail::kPolicyKinds, p.kind)},
                 {"embed_dim", p.embed_dim},
                 {"hidden", p.hidden},
                 {"init_scale", p.init_scale},
                 {"reference", p.reference},
                 {"reference_seed", p.reference_seed}};
  const auto& t = spec.train;
  j["train"] = {{"steps", t.steps},
                {"prompts_per_batch", t.prompts_per_batch},
                {"group_size", t.group_size},
                {"micro_batches_per_rollout", t.micro_batches_per_rollout},
                {"optimizer", enum_name(detail::kOptimizers, t.optimizer)},
                {"lr_policy", t.lr_policy},
                {"partition_lr_multiplier", t.partition_lr_multiplier},
                {"lr_critic", t.lr_critic},
                {"beta", t.beta},
                {"epsilon", t.epsilon},
                {"lambda", t.lambda},
                {"reward_norm", enum_name(detail::kRewardModes, t.reward_norm)},
                {"length_norm", enum_name(detail::kLengthNorms, t.length_norm)},
                {"importance_sampling", t.importance_sampling},
                {"seed", t.seed},
                {"partition_hidden", t.partition_hidden},
                {"critic_hidden", t.critic_hidden},
                {"value_coef", t.value_coef},
                {"checkpoint_interval", t.checkpoint_interval}};
  const auto& c = spec.eval;
  j["eval"] = {{"interval", c.interval},
               {"samples", c.samples},
               {"enumerate", c.enumerate},
               {"mass_threshold", c.mass_threshold}};
  if (spec.sweep) {
    j["sweep"] = {{"parameter", spec.sweep->parameter},
                  {"values", spec.sweep->values},
                  {"seeds", spec.sweep->seeds}};
  }
  return j;
}

inline ExperimentSpec parse_config_json(const nlohmann::json& root) {
  ExperimentSpec spec = detail::parse_core(root);
  if (!root.contains("sweep")) return spec;

  const detail::Section sw(detail::section_object(root, "sweep"), "sweep");
  sw.check_keys(detail::kSweepKeys);
  SweepSpec s;
  if (!sw.string("parameter", s.parameter)) throw ConfigError("sweep.parameter is required");
  detail::split_parameter(s.parameter);
  if (s.parameter == "train.seed") {
    throw ConfigError("sweep.parameter may not be train.seed; list seeds in sweep.seeds");
  }
  const auto& obj = root.at("sweep");
  if (!obj.contains("values") || !obj.at("values").is_array() || obj.at("values").empty()) {
    throw ConfigError("sweep.values must be a non-empty array");
  }
  s.values = obj.at("values");
  if (obj.contains("seeds")) {
    const auto& seeds = obj.at("seeds");
    if (!seeds.is_array() || seeds.empty()) {
      throw ConfigError("type mismatch at sweep.seeds: expected non-empty array of integers");
    }
    s.seeds.clear();
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      if (!seeds[i].is_number_unsigned() && !(seeds[i].is_number_integer() && seeds[i].get<long long>() >= 0)) {
        detail::type_error("sweep.seeds[" + std::to_string(i) + "]", "non-negative integer", seeds[i]);
      }
      s.seeds.push_back(seeds[i].get<std::uint64_t>());
    }
  }
  // Every value must produce a valid cell config.
  nlohmann::json base = root;
  base.erase("sweep");
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    try {
      detail::parse_core(detail::with_parameter(base, s.parameter, s.values[i]));
    } catch (const ConfigError& e) {
      throw ConfigError("sweep.values[" + std::to_string(i) + "]: " + e.what());
    }
  }
  spec.sweep = std::move(s);
  return spec;
}

inline nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

inline ExperimentSpec parse_config(const fs::path& path) {
  return parse_config_json(read_json_file(path));
}

// ---------------------------------------------------------------------------
// Files.

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("missing file: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Creates `dir`, refusing a non-empty existing directory unless `force`,
// in which case its contents are removed first.
inline void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw OutputExists(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) {
        throw OutputExists("output directory " + dir.string() +
                           " is not empty; pass --force to overwrite");
      }
      for (const auto& entry : fs::directory_iterator(dir)) fs::remove_all(entry.path());
    }
  }
  fs::create_directories(dir);
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name, const fs::path& source) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw Error("column '" + name + "' missing from " + source.string());
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvTable read_csv(const fs::path& path) {
  std::istringstream is(read_text(path));
  CsvTable t;
  std::string line;
  if (!std::getline(is, line)) throw Error("empty CSV file: " + path.string());
  t.header = split_csv_line(line);
  while (std::getline(is, line)) {
    if (!line.empty()) t.rows.push_back(split_csv_line(line));
  }
  return t;
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  return std::strtod(s.c_str(), nullptr);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Single runs.

struct RunOutcome {
  int exit_code = 0;  // 0 ok, 2 config error, 3 numeric failure, 1 other
  std::string message;
  std::optional<EvalRow> final_metrics;
  double wall_seconds = 0.0;
};

inline Environment make_experiment_env(const ExperimentSpec& spec) { return make_env(spec.env); }

// Trains one configuration into `out_dir`, which must already exist.
// Writes config.json before training and summary.json after (also on
// failure, with status "failed").
inline RunOutcome execute_run(const ExperimentSpec& spec, const fs::path& out_dir) {
  RunOutcome out;
  ExperimentSpec resolved = spec;
  resolved.sweep.reset();
  detail::write_text(out_dir / "config.json", to_json(resolved).dump(2) + "\n");
  const auto start = std::chrono::steady_clock::now();
  ordered_json summary;
  summary["algorithm"] = to_string(spec.algorithm);
  summary["seed"] = spec.train.seed;
  try {
    const auto env = make_experiment_env(spec);
    auto res = train_loop(spec.train, spec.policy, spec.eval, env, out_dir);
    out.final_metrics = res.metrics.back();
    summary["status"] = "ok";
  } catch (const ConfigError& e) {
    out.exit_code = 2;
    out.message = e.what();
  } catch (const NumericError& e) {
    out.exit_code = 3;
    out.message = e.what();
  } catch (const std::exception& e) {
    out.exit_code = 1;
    out.message = e.what();
  }
  out.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (out.exit_code != 0) {
    summary["status"] = "failed";
    summary["error"] = out.message;
    summary["exit_code"] = out.exit_code;
  }
  if (out.final_metrics) {
    const auto& m = *out.final_metrics;
    summary["final"] = {{"step", m.step},
                        {"kl_to_target", m.kl_to_target},
                        {"entropy", m.entropy},
                        {"mode_coverage", m.mode_coverage},
                        {"logZ_error", std::isnan(m.log_z_error) ? ordered_json() : ordered_json(m.log_z_error)},
                        {"mean_reward", m.mean_reward}};
  }
  summary["wall_time_seconds"] = out.wall_seconds;
  summary["git_describe"] = FLOWRL_GIT_DESCRIBE;
  detail::write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  return out;
}

inline RunOutcome run_experiment(const ExperimentSpec& spec, const fs::path& out_dir, bool force) {
  if (spec.sweep) throw ConfigError("config has a sweep section; use the sweep verb");
  detail::prepare_out_dir(out_dir, force);
  return execute_run(spec, out_dir);
}

// ---------------------------------------------------------------------------
// Sweeps.

// Type-7 (linear interpolation) sample quantile of finite values; NaN if
// any value is NaN or the list is empty.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  for (double x : v) {
    if (std::isnan(x)) return std::numeric_limits<double>::quiet_NaN();
  }
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline std::string value_label(const nlohmann::json& v) {
  return v.is_string() ? v.get<std::string>() : v.dump();
}

inline std::string cell_name(const std::string& parameter, const nlohmann::json& value,
                             std::uint64_t seed) {
  const auto dot = parameter.rfind('.');
  const std::string leaf = dot == std::string::npos ? parameter : parameter.substr(dot + 1);
  return leaf + "_" + value_label(value) + "_seed" + std::to_string(seed);
}

struct SweepCell {
  nlohmann::json value;
  std::uint64_t seed = 0;
  std::string dir;
};

inline std::vector<SweepCell> sweep_cells(const SweepSpec& s) {
  std::vector<SweepCell> cells;
  for (const auto& v : s.values) {
    for (auto seed : s.seeds) cells.push_back(SweepCell{v, seed, cell_name(s.parameter, v, seed)});
  }
  return cells;
}

inline ExperimentSpec cell_spec(const ExperimentSpec& spec, const SweepCell& cell) {
  nlohmann::json root = nlohmann::json::parse(to_json(spec).dump());
  root.erase("sweep");
  root = detail::with_parameter(root, spec.sweep->parameter, cell.value);
  root["train"]["seed"] = cell.seed;
  return parse_config_json(root);
}

inline const std::vector<std::string> kAggregateMetrics{"kl_to_target", "entropy", "mode_coverage",
                                                        "logZ_error", "mean_reward"};

// Aggregates the final metrics row of every completed cell listed in
// <sweep_dir>/sweep.json into aggregate.csv (one row per parameter value:
// value, n, then median/q25/q75/iqr per metric) and cells.csv (one row per
// cell). Pure function of the per-cell metrics.csv files.
inline void aggregate_sweep(const fs::path& sweep_dir) {
  const auto manifest = nlohmann::json::parse(detail::read_text(sweep_dir / "sweep.json"));
  const std::string parameter = manifest.at("parameter");
  const auto dot = parameter.rfind('.');
  const std::string leaf = dot == std::string::npos ? parameter : parameter.substr(dot + 1);

  std::ostringstream cells_csv;
  cells_csv << leaf << ",seed,status";
  for (const auto& m : kAggregateMetrics) cells_csv << ',' << m;
  cells_csv << '\n';

  std::ostringstream agg;
  agg << leaf << ",n";
  for (const auto& m : kAggregateMetrics) {
    agg << ',' << m << "_median," << m << "_q25," << m << "_q75," << m << "_iqr";
  }
  agg << '\n';

  for (const auto& value : manifest.at("values")) {
    std::vector<std::vector<double>> per_metric(kAggregateMetrics.size());
    for (const auto& cell : manifest.at("cells")) {
      if (cell.at("value") != value) continue;
      const fs::path dir = sweep_dir / cell.at("dir").get<std::string>();
      const bool ok = !fs::exists(dir / "FAILED") && fs::exists(dir / "metrics.csv") &&
                      fs::exists(dir / "checkpoint_final.json");
      cells_csv << value_label(value) << ',' << cell.at("seed").get<std::uint64_t>() << ','
                << (ok ? "ok" : "failed");
      if (ok) {
        const auto table = detail::read_csv(dir / "metrics.csv");
        if (table.rows.empty()) throw Error("no metric rows in " + (dir / "metrics.csv").string());
        const auto& last = table.rows.back();
        for (std::size_t k = 0; k < kAggregateMetrics.size(); ++k) {
          const auto& s = last.at(table.column(kAggregateMetrics[k], dir / "metrics.csv"));
          per_metric[k].push_back(detail::parse_double(s));
          cells_csv << ',' << s;
        }
      } else {
        for (std::size_t k = 0; k < kAggregateMetrics.size(); ++k) cells_csv << ",nan";
      }
      cells_csv << '\n';
    }
    agg << value_label(value) << ',' << per_metric[0].size();
    for (const auto& v : per_metric) {
      const double q25 = quantile(v, 0.25);
      const double q75 = quantile(v, 0.75);
      agg << ',' << fmt_double(quantile(v, 0.5)) << ',' << fmt_double(q25) << ','
          << fmt_double(q75) << ',' << fmt_double(q75 - q25);
    }
    agg << '\n';
  }
  detail::write_text(sweep_dir / "aggregate.csv", agg.str());
  detail::write_text(sweep_dir / "cells.csv", cells_csv.str());
}

struct SweepOutcome {
  int exit_code = 0;  // 0 all ok, 4 at least one cell failed
  std::vector<std::pair<std::string, RunOutcome>> cells;
  std::string failure_table;
};

inline unsigned run_threads_from_env() {
  if (const char* s = std::getenv("RUN_THREADS")) {
    const long n = std::strtol(s, nullptr, 10);
    if (n >= 1) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs every (value, seed) cell into its own subdirectory, on up to
// `threads` worker threads, then aggregates. Failing cells do not stop
// the others; they are listed in failures.csv and the returned table.
inline SweepOutcome run_sweep(const ExperimentSpec& spec, const fs::path& out_dir, bool force,
                              unsigned threads) {
  if (!spec.sweep) throw ConfigError("config has no sweep section");
  detail::prepare_out_dir(out_dir, force);
  detail::write_text(out_dir / "config.json", to_json(spec).dump(2) + "\n");
  const auto cells = sweep_cells(*spec.sweep);
  {
    ordered_json manifest;
    manifest["parameter"] = spec.sweep->parameter;
    manifest["values"] = spec.sweep->values;
    manifest["seeds"] = spec.sweep->seeds;
    manifest["cells"] = ordered_json::array();
    for (const auto& c : cells) {
      manifest["cells"].push_back({{"value", c.value}, {"seed", c.seed}, {"dir", c.dir}});
    }
    detail::write_text(out_dir / "sweep.json", manifest.dump(2) + "\n");
  }

  SweepOutcome out;
  out.cells.resize(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const auto dir = out_dir / cells[i].dir;
      RunOutcome r;
      try {
        fs::create_directories(dir);
        r = execute_run(cell_spec(spec, cells[i]), dir);
      } catch (const std::exception& e) {
        r.exit_code = 1;
        r.message = e.what();
      }
      out.cells[i] = {cells[i].dir, std::move(r)};
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(cells.size())));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::ostringstream failures;
  failures << "cell,exit_code,error\n";
  for (const auto& [name, r] : out.cells) {
    if (r.exit_code == 0) continue;
    out.exit_code = 4;
    std::string first_line = r.message.substr(0, r.message.find('\n'));
    std::replace(first_line.begin(), first_line.end(), ',', ';');
    failures << name << ',' << r.exit_code << ',' << first_line << '\n';
  }
  out.failure_table = failures.str();
  if (out.exit_code != 0) detail::write_text(out_dir / "failures.csv", out.failure_table);
  aggregate_sweep(out_dir);
  return out;
}

// ---------------------------------------------------------------------------
// Plot data.

namespace detail {

inline void export_single_run(const fs::path& run_dir, const fs::path& plots,
                              std::vector<fs::path>& written) {
  const auto metrics_path = run_dir / "metrics.csv";
  if (!fs::exists(metrics_path)) throw Error("missing file: " + metrics_path.string());
  const auto table = read_csv(metrics_path);
  const auto step = table.column("step", metrics_path);
  const auto kl = table.column("kl_to_target", metrics_path);
  const auto cov = table.column("mode_coverage", metrics_path);
  const auto ent = table.column("entropy", metrics_path);

  std::ostringstream kl_csv, cov_csv;
  kl_csv << "step,kl_to_target\n";
  cov_csv << "step,mode_coverage,entropy\n";
  for (const auto& r : table.rows) {
    kl_csv << r.at(step) << ',' << r.at(kl) << '\n';
    cov_csv << r.at(step) << ',' << r.at(cov) << ',' << r.at(ent) << '\n';
  }
  write_text(plots / "kl_curve.csv", kl_csv.str());
  write_text(plots / "coverage_curve.csv", cov_csv.str());
  written.push_back(plots / "kl_curve.csv");
  written.push_back(plots / "coverage_curve.csv");

  const auto config_path = run_dir / "config.json";
  const auto ckpt_path = run_dir / "checkpoint_final.json";
  if (!fs::exists(config_path)) throw Error("missing file: " + config_path.string());
  if (!fs::exists(ckpt_path)) throw Error("missing file: " + ckpt_path.string());
  const auto spec = parse_config(config_path);
  const auto env = make_env(spec.env);
  if (env.space().count_sequences() > kDefaultEnumerationCap) return;
  const auto ckpt = nlohmann::json::parse(read_text(ckpt_path));
  const Policy policy = policy_from_json(ckpt.at("policy"));
  const Policy ref = make_reference(spec.policy, env);
  std::ostringstream os;
  os << "prompt,sequence,target_prob,policy_prob\n";
  for (const auto& prompt : env.prompts()) {
    const auto target = target_distribution(env, prompt.id, spec.train.beta, ref);
    const auto dist = policy_distribution(policy, prompt);
    for (std::size_t i = 0; i < dist.size(); ++i) {
      os << prompt.id << ',' << format_sequence(env.space(), dist.sequences[i]) << ','
         << fmt_double(target.table.probs[i]) << ',' << fmt_double(dist.probs[i]) << '\n';
    }
  }
  write_text(plots / "policy_vs_target.csv", os.str());
  written.push_back(plots / "policy_vs_target.csv");
}

}  // namespace detail

// Writes plot-ready CSVs under <run_dir>/plots. For a single run:
// kl_curve.csv, coverage_curve.csv and (enumerable envs) policy_vs_target.csv.
// For a sweep directory: per-cell curves stacked with value and seed
// columns, plus the aggregate table. Returns the files written.
inline std::vector<fs::path> export_plots(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw Error("missing directory: " + run_dir.string());
  const auto plots = run_dir / "plots";
  fs::create_directories(plots);
  std::vector<fs::path> written;
  if (!fs::exists(run_dir / "sweep.json")) {
    detail::export_single_run(run_dir, plots, written);
    return written;
  }
  aggregate_sweep(run_dir);
  const auto manifest = nlohmann::json::parse(detail::read_text(run_dir / "sweep.json"));
  const std::string parameter = manifest.at("parameter");
  const auto dot = parameter.rfind('.');
  const std::string leaf = dot == std::string::npos ? parameter : parameter.substr(dot + 1);
  std::ostringstream kl_csv, cov_csv;
  kl_csv << leaf << ",seed,step,kl_to_target\n";
  cov_csv << leaf << ",seed,step,mode_coverage,entropy\n";
  for (const auto& cell : manifest.at("cells")) {
    const fs::path metrics_path = run_dir / cell.at("dir").get<std::string>() / "metrics.csv";
    if (!fs::exists(metrics_path)) continue;  // failed before the first evaluation
    const auto table = detail::read_csv(metrics_path);
    const auto step = table.column("step", metrics_path);
    const auto kl = table.column("kl_to_target", metrics_path);
    const auto cov = table.column("mode_coverage", metrics_path);
    const auto ent = table.column("entropy", metrics_path);
    const std::string prefix =
        value_label(cell.at("value")) + ',' + std::to_string(cell.at("seed").get<std::uint64_t>()) + ',';
    for (const auto& r : table.rows) {
      kl_csv << prefix << r.at(step) << ',' << r.at(kl) << '\n';
      cov_csv << prefix << r.at(step) << ',' << r.at(cov) << ',' << r.at(ent) << '\n';
    }
  }
  detail::write_text(plots / "kl_curve.csv", kl_csv.str());
  detail::write_text(plots / "coverage_curve.csv", cov_csv.str());
  fs::copy_file(run_dir / "aggregate.csv", plots / "aggregate.csv",
                fs::copy_options::overwrite_existing);
  written = {plots / "kl_curve.csv", plots / "coverage_curve.csv", plots / "aggregate.csv"};
  return written;
}

}  // namespace flowrl

#endif  // FLOWRL_EXPERIMENT_HPP_
