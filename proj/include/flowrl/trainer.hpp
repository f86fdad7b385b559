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

// Training loop. One phase = refresh the old-policy snapshot, collect
// prompts_per_batch groups of group_size rollouts from it, then take
// micro_batches_per_rollout optimizer steps on contiguous shards of that
// data against the live policy.

#ifndef FLOWRL_TRAINER_HPP_
#define FLOWRL_TRAINER_HPP_

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flowrl/checkpoint.hpp"
#include "flowrl/envs.hpp"
#include "flowrl/errors.hpp"
#include "flowrl/grad.hpp"
#include "flowrl/metrics.hpp"
#include "flowrl/objectives.hpp"
#include "flowrl/optim.hpp"
#include "flowrl/policy.hpp"
#include "flowrl/rng.hpp"

namespace flowrl {

enum class Algorithm { flowrl, grpo, ppo, rpp, tb };

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::flowrl: return "flowrl";
    case Algorithm::grpo: return "grpo";
    case Algorithm::ppo: return "ppo";
    case Algorithm::rpp: return "rpp";
    case Algorithm::tb: return "tb";
  }
  return "?";
}

struct PolicyConfig {
  PolicyKind kind = PolicyKind::tabular;
  std::size_t embed_dim = 16;
  std::size_t hidden = 32;
  double init_scale = 0.0;  // tabular only; 0 starts at the uniform policy
  std::string reference = "uniform";  // or "random_mlp"
  std::uint64_t reference_seed = 1234;
};

enum class LengthNorm { automatic, on, off };

struct TrainConfig {
  Algorithm algorithm = Algorithm::flowrl;
  std::int64_t steps = 200;
  int prompts_per_batch = 1;
  int group_size = 8;
  int micro_batches_per_rollout = 4;
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr_policy = 1e-2;
  double partition_lr_multiplier = 10.0;
  double lr_critic = 1e-3;
  double beta = 15.0;
  double epsilon = 0.2;
  double lambda = 1e-3;
  RewardMode reward_norm = RewardMode::group;
  // automatic: on under group normalization, off in raw mode (where the
  // stationary point must be the exact exp(beta r) pi_ref / Z target).
  LengthNorm length_norm = LengthNorm::automatic;
  bool importance_sampling = true;
  std::uint64_t seed = 0;
  std::size_t partition_hidden = 32;
  std::size_t critic_hidden = 32;
  double value_coef = 0.5;
  std::int64_t checkpoint_interval = 0;  // 0: final checkpoint only

  bool length_normalize() const {
    if (length_norm == LengthNorm::automatic) return reward_norm == RewardMode::group;
    return length_norm == LengthNorm::on;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train: " + m); };
    if (steps < 0) fail("steps must be >= 0");
    if (prompts_per_batch < 1) fail("prompts_per_batch must be >= 1");
    if (group_size < 1) fail("group_size must be >= 1");
    const bool needs_groups = algorithm == Algorithm::grpo ||
                              (algorithm == Algorithm::flowrl && reward_norm == RewardMode::group);
    if (needs_groups && group_size < 2) fail("group_size must be >= 2 under group normalization");
    if (micro_batches_per_rollout < 1) fail("micro_batches_per_rollout must be >= 1");
    const int per_phase = prompts_per_batch * group_size;
    if (per_phase < micro_batches_per_rollout) {
      fail("fewer trajectories per phase than micro batches");
    }
    if (algorithm == Algorithm::rpp && per_phase < 2 * micro_batches_per_rollout) {
      fail("rpp needs at least 2 trajectories per micro batch");
    }
    if (!(lr_policy > 0.0) || !(partition_lr_multiplier > 0.0) || !(lr_critic > 0.0)) {
      fail("all learning rates must be > 0");
    }
    if (!(epsilon > 0.0 && epsilon < 1.0)) fail("epsilon must lie in (0, 1)");
    if (!(beta >= 0.0)) fail("beta must be >= 0");
    if (!(lambda >= 0.0)) fail("lambda must be >= 0");
    if (partition_hidden == 0 || critic_hidden == 0) fail("hidden sizes must be positive");
  }
};

struct EvalConfig {
  std::int64_t interval = 50;
  std::size_t samples = 20000;
  bool enumerate = true;
  double mass_threshold = 0.0;  // <= 0: 1/(4K)
};

struct TrainState {
  std::int64_t phase = 0;
  std::int64_t optimizer_steps = 0;
  Policy policy;
  Policy old_policy;
  Policy ref_policy;
  PartitionNet partition;
  grad::DenseNet critic;
  Optimizer policy_opt;
  Optimizer partition_opt;
  Optimizer critic_opt;
  std::uint64_t seed = 0;
};

inline Policy make_policy(const PolicyConfig& pc, const Environment& env, std::uint64_t seed) {
  if (pc.kind == PolicyKind::tabular) {
    return Policy::tabular(env.space(), env.prompts().size(), seed, pc.init_scale);
  }
  return Policy::mlp(env.space(), env.prompt_dim(), pc.embed_dim, pc.hidden, seed);
}

inline Policy make_reference(const PolicyConfig& pc, const Environment& env) {
  if (pc.reference == "uniform") return Policy::uniform(env.space(), env.prompts().size());
  if (pc.reference == "random_mlp") {
    return Policy::mlp(env.space(), env.prompt_dim(), pc.embed_dim, pc.hidden, pc.reference_seed);
  }
  throw ConfigError("policy: unknown reference '" + pc.reference + "'");
}

inline TrainState init_state(const TrainConfig& cfg, const PolicyConfig& pc, const Environment& env) {
  cfg.validate();
  TrainState s;
  s.seed = cfg.seed;
  s.policy = make_policy(pc, env, stream_key({cfg.seed, 0x9011C7u}));
  s.old_policy = s.policy.snapshot();
  s.ref_policy = make_reference(pc, env);
  s.partition = PartitionNet(env.prompt_dim(), cfg.partition_hidden, stream_key({cfg.seed, 0x7A27u}));
  if (cfg.algorithm == Algorithm::ppo) {
    s.critic = make_critic(env.space(), env.prompt_dim(), cfg.critic_hidden,
                           stream_key({cfg.seed, 0xC417u}));
  }
  s.policy_opt = Optimizer(cfg.optimizer, cfg.lr_policy);
  s.partition_opt = Optimizer(cfg.optimizer, cfg.lr_policy * cfg.partition_lr_multiplier);
  s.critic_opt = Optimizer(cfg.optimizer, cfg.lr_critic);
  return s;
}

// Samples every group from the current old-policy snapshot. Trajectory g of
// batch slot b in phase p draws from stream (seed, p, prompt id, b, g), so
// the rollout set does not depend on evaluation order.
inline std::vector<RolloutGroup> collect_rollouts(const TrainState& state, const Environment& env,
                                                  const TrainConfig& cfg) {
  std::vector<RolloutGroup> groups;
  const auto num_prompts = static_cast<std::int64_t>(env.prompts().size());
  for (int b = 0; b < cfg.prompts_per_batch; ++b) {
    const int pid = static_cast<int>((state.phase * cfg.prompts_per_batch + b) % num_prompts);
    RolloutGroup group;
    group.prompt = env.prompt(pid);
    for (int g = 0; g < cfg.group_size; ++g) {
      RngStream rng(stream_key({state.seed, static_cast<std::uint64_t>(state.phase),
                                static_cast<std::uint64_t>(pid), static_cast<std::uint64_t>(b),
                                static_cast<std::uint64_t>(g)}));
      Trajectory t = sample_trajectory(state.old_policy, group.prompt, rng);
      t.token_logp_old = token_logprobs(state.old_policy, group.prompt, t.tokens);
      double sum = 0.0;
      for (double v : t.token_logp_old) sum += v;
      t.logp_old = sum;
      t.logp_ref = logprob(state.ref_policy, group.prompt, t.tokens);
      t.reward = env.reward(pid, t.tokens);
      group.trajectories.push_back(std::move(t));
    }
    if (group.trajectories.size() >= 2) normalize_group(group);
    groups.push_back(std::move(group));
  }
  return groups;
}

struct BreakdownRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double mean_residual = std::numeric_limits<double>::quiet_NaN();
  double mean_w = std::numeric_limits<double>::quiet_NaN();
  double log_z = std::numeric_limits<double>::quiet_NaN();
  double mean_logp_norm = std::numeric_limits<double>::quiet_NaN();
  double mean_ref_logp_norm = std::numeric_limits<double>::quiet_NaN();
  double mean_beta_r = std::numeric_limits<double>::quiet_NaN();
};

// Splits the flattened trajectories into `shards` contiguous pieces, keeping
// group membership (and the already computed group statistics).
inline std::vector<std::vector<RolloutGroup>> shard_groups(const std::vector<RolloutGroup>& groups,
                                                           int shards) {
  std::vector<std::pair<std::size_t, std::size_t>> flat;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t i = 0; i < groups[g].trajectories.size(); ++i) flat.emplace_back(g, i);
  }
  std::vector<std::vector<RolloutGroup>> out(static_cast<std::size_t>(shards));
  const std::size_t n = flat.size();
  for (std::size_t k = 0; k < out.size(); ++k) {
    const std::size_t lo = k * n / out.size();
    const std::size_t hi = (k + 1) * n / out.size();
    for (std::size_t j = lo; j < hi; ++j) {
      const auto [g, i] = flat[j];
      if (j == lo || flat[j - 1].first != g) {
        out[k].push_back(RolloutGroup{groups[g].prompt, {}});
      }
      out[k].back().trajectories.push_back(groups[g].trajectories[i]);
    }
  }
  return out;
}

namespace detail {

inline std::string describe_batch(const std::vector<RolloutGroup>& shard, const TokenSpace& space) {
  std::ostringstream os;
  for (const auto& g : shard) {
    for (const auto& t : g.trajectories) {
      os << "prompt=" << g.prompt.id << " tokens=[" << format_sequence(space, t.tokens)
         << "] reward=" << t.reward << " r_hat=" << t.normalized_reward
         << " logp_old=" << (t.logp_old ? *t.logp_old : std::nan("")) << " logp_ref=" << t.logp_ref
         << '\n';
    }
  }
  return os.str();
}

}  // namespace detail

// One optimizer step per shard. Throws NumericError (with a dump of the
// offending shard) on a non-finite loss; nothing is skipped.
inline std::vector<BreakdownRow> train_step(TrainState& state, const std::vector<RolloutGroup>& groups,
                                            const TrainConfig& cfg) {
  std::vector<BreakdownRow> rows;
  for (const auto& shard : shard_groups(groups, cfg.micro_batches_per_rollout)) {
    auto policy_params = state.policy.parameters();
    auto partition_params = state.partition.parameters();
    auto critic_params = state.critic.parameters();
    grad::zero_grad(policy_params);
    grad::zero_grad(partition_params);
    grad::zero_grad(critic_params);

    BreakdownRow row;
    row.step = state.optimizer_steps;
    grad::Tape tape;
    grad::Var loss;
    switch (cfg.algorithm) {
      case Algorithm::flowrl: {
        FlowRLOptions opt;
        opt.beta = cfg.beta;
        opt.epsilon = cfg.epsilon;
        opt.reward_mode = cfg.reward_norm;
        opt.length_normalize = cfg.length_normalize();
        opt.importance_weighting = cfg.importance_sampling;
        auto bd = flowrl_loss(tape, shard, state.policy, state.partition, opt);
        loss = bd.loss;
        row.mean_residual = detail::mean_of(bd.residuals);
        row.mean_w = detail::mean_of(bd.weights);
        row.log_z = detail::mean_of(bd.log_z);
        row.mean_logp_norm = detail::mean_of(bd.logp_norm);
        row.mean_ref_logp_norm = detail::mean_of(bd.ref_logp_norm);
        row.mean_beta_r = detail::mean_of(bd.beta_r);
        break;
      }
      case Algorithm::tb:
        loss = trajectory_balance_loss(tape, shard, state.policy, state.partition, cfg.beta);
        break;
      case Algorithm::grpo:
        loss = grpo_loss(tape, shard, state.policy, cfg.epsilon, cfg.lambda);
        break;
      case Algorithm::rpp:
        loss = reinforce_pp_loss(tape, shard, state.policy, cfg.lambda);
        break;
      case Algorithm::ppo: {
        PpoOptions opt;
        opt.epsilon = cfg.epsilon;
        opt.value_coef = cfg.value_coef;
        loss = ppo_loss(tape, shard, state.policy, state.critic, opt);
        break;
      }
    }
    row.loss = loss.scalar();
    if (!std::isfinite(row.loss)) {
      throw NumericError("non-finite " + std::string(to_string(cfg.algorithm)) +
                         " loss at optimizer step " + std::to_string(state.optimizer_steps) +
                         "; batch:\n" + detail::describe_batch(shard, state.policy.space()));
    }
    tape.backward(loss);
    state.policy_opt.step(policy_params);
    if (cfg.algorithm == Algorithm::flowrl || cfg.algorithm == Algorithm::tb) {
      state.partition_opt.step(partition_params);
    }
    if (cfg.algorithm == Algorithm::ppo) state.critic_opt.step(critic_params);
    ++state.optimizer_steps;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Run artifacts.

inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline const char* kMetricsHeader = "step,kl_to_target,entropy,mode_coverage,logZ_error,mean_reward";
inline const char* kBreakdownHeader =
    "step,loss,mean_residual,mean_w,logZ,mean_logp_norm,mean_ref_logp_norm,mean_beta_r";

inline std::string to_csv(const EvalRow& r) {
  return std::to_string(r.step) + ',' + fmt_double(r.kl_to_target) + ',' + fmt_double(r.entropy) +
         ',' + fmt_double(r.mode_coverage) + ',' + fmt_double(r.log_z_error) + ',' +
         fmt_double(r.mean_reward);
}

inline std::string to_csv(const BreakdownRow& r) {
  return std::to_string(r.step) + ',' + fmt_double(r.loss) + ',' + fmt_double(r.mean_residual) +
         ',' + fmt_double(r.mean_w) + ',' + fmt_double(r.log_z) + ',' +
         fmt_double(r.mean_logp_norm) + ',' + fmt_double(r.mean_ref_logp_norm) + ',' +
         fmt_double(r.mean_beta_r);
}

inline void write_checkpoint(const std::filesystem::path& path, const TrainState& s) {
  nlohmann::json j;
  j["phase"] = s.phase;
  j["policy"] = policy_to_json(s.policy);
  j["partition"] = partition_to_json(s.partition);
  std::ofstream os(path, std::ios::binary);
  os << j.dump() << '\n';
}

struct RunResult {
  std::vector<EvalRow> metrics;
  std::vector<BreakdownRow> breakdown;
  TrainState state;
};

inline EvalOptions eval_options(const TrainConfig& cfg, const EvalConfig& ec) {
  EvalOptions eo;
  eo.beta = cfg.beta;
  eo.enumerate = ec.enumerate;
  eo.samples = ec.samples;
  eo.mass_threshold = ec.mass_threshold;
  eo.report_log_z_error = cfg.reward_norm == RewardMode::raw;
  eo.seed = cfg.seed;
  return eo;
}

// Runs cfg.steps phases. With a non-empty out_dir, streams metrics.csv and
// breakdown.csv there, writes checkpoints, and on failure leaves the
// partial files plus a FAILED marker holding the diagnostic before
// rethrowing.
inline RunResult train_loop(const TrainConfig& cfg, const PolicyConfig& pc, const EvalConfig& ec,
                            const Environment& env,
                            const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  RunResult res;
  res.state = init_state(cfg, pc, env);
  TrainState& s = res.state;
  const auto eo = eval_options(cfg, ec);

  std::ofstream metrics_os;
  std::ofstream breakdown_os;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    metrics_os.open(*out_dir / "metrics.csv", std::ios::binary);
    breakdown_os.open(*out_dir / "breakdown.csv", std::ios::binary);
    metrics_os << kMetricsHeader << '\n';
    breakdown_os << kBreakdownHeader << '\n';
  }
  auto emit_eval = [&](std::int64_t step) {
    res.metrics.push_back(evaluate(s.policy, s.partition, s.ref_policy, env, eo, step));
    if (out_dir) metrics_os << to_csv(res.metrics.back()) << '\n' << std::flush;
  };

  try {
    emit_eval(0);
    for (std::int64_t phase = 0; phase < cfg.steps; ++phase) {
      s.phase = phase;
      s.old_policy = s.policy.snapshot();
      const auto groups = collect_rollouts(s, env, cfg);
      for (const auto& row : train_step(s, groups, cfg)) {
        res.breakdown.push_back(row);
        if (out_dir) breakdown_os << to_csv(row) << '\n';
      }
      // Snapshot discipline: the recorded logp_old must still match the
      // frozen snapshot after the live policy has moved.
      for (const auto& g : groups) {
        for (const auto& t : g.trajectories) {
          if (logprob(s.old_policy, g.prompt, t.tokens) != *t.logp_old) {
            throw ContractError("old-policy snapshot changed during phase " + std::to_string(phase));
          }
        }
      }
      const std::int64_t done = phase + 1;
      if ((ec.interval > 0 && done % ec.interval == 0) || done == cfg.steps) emit_eval(done);
      if (out_dir && cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0) {
        write_checkpoint(*out_dir / ("checkpoint_" + std::to_string(done) + ".json"), s);
      }
    }
    s.phase = cfg.steps;
    if (out_dir) write_checkpoint(*out_dir / "checkpoint_final.json", s);
  } catch (const std::exception& e) {
    if (out_dir) {
      metrics_os.flush();
      breakdown_os.flush();
      std::ofstream marker(*out_dir / "FAILED", std::ios::binary);
      marker << e.what() << '\n';
    }
    throw;
  }
  return res;
}

}  // namespace flowrl

#endif  // FLOWRL_TRAINER_HPP_
