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

// Training losses. Every function records onto a caller-owned Tape and
// returns the scalar to minimize; call Tape::backward() on it.

#ifndef FLOWRL_OBJECTIVES_HPP_
#define FLOWRL_OBJECTIVES_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flowrl/errors.hpp"
#include "flowrl/grad.hpp"
#include "flowrl/policy.hpp"

namespace flowrl {

// log Z_phi(x): mean prompt representation -> 3-layer MLP -> scalar. The
// output is the log-partition itself, so no positivity constraint is needed.
class PartitionNet {
 public:
  PartitionNet() = default;
  PartitionNet(std::size_t prompt_dim, std::size_t hidden, std::uint64_t seed) {
    using grad::Activation;
    const std::size_t dims[] = {prompt_dim, hidden, hidden, 1};
    const Activation acts[] = {Activation::tanh, Activation::tanh,
                               Activation::identity};
    net_ = grad::DenseNet(dims, acts);
    net_.init_glorot(seed);
  }

  double log_partition(const Prompt& prompt) const {
    return net_.evaluate(prompt.representation())[0];
  }

  grad::Var forward(grad::Tape& tape, const Prompt& prompt) {
    return grad::pick(net_.forward(tape, tape.constant(prompt.representation())), 0);
  }

  grad::DenseNet& net() { return net_; }
  const grad::DenseNet& net() const { return net_; }
  std::vector<grad::Parameter*> parameters() { return net_.parameters(); }

 private:
  grad::DenseNet net_;
};

inline double log_partition(const PartitionNet& partition, const Prompt& prompt) {
  return partition.log_partition(prompt);
}

struct RolloutGroup {
  Prompt prompt;
  std::vector<Trajectory> trajectories;

  std::vector<double> rewards() const {
    std::vector<double> r;
    for (const auto& t : trajectories) r.push_back(t.reward);
    return r;
  }
};

// Population mean/std standardization. A group whose std is below 1e-12
// (all rewards equal up to round-off) maps to all zeros.
inline std::vector<double> group_normalize(std::span<const double> rewards) {
  if (rewards.size() < 2) {
    throw ContractError("group_normalize needs at least 2 rewards, got " +
                        std::to_string(rewards.size()));
  }
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(rewards.size(), 0.0);
  if (sd <= 1e-12 * std::max(1.0, std::abs(mean))) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

// Fills Trajectory::normalized_reward from the group's raw rewards.
inline void normalize_group(RolloutGroup& group) {
  const auto norm = group_normalize(group.rewards());
  for (std::size_t i = 0; i < norm.size(); ++i) {
    group.trajectories[i].normalized_reward = norm[i];
  }
}

// Clipped sequence-level ratio pi/pi_old. Returned as a plain double, so no
// gradient can flow through it.
inline double importance_weight(double logp_current, double logp_old,
                                double epsilon) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) {
    throw ContractError("epsilon must lie in (0, 1)");
  }
  const double ratio = std::exp(std::clamp(logp_current - logp_old, -20.0, 20.0));
  return std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
}

// k3 estimator of KL(pi || ref) from sequence log-probs:
// ref/pi - log(ref/pi) - 1.
inline grad::Var k3_kl(grad::Var logp, double logp_ref) {
  grad::Var log_ratio = grad::add_scalar(grad::neg(logp), logp_ref);
  return grad::add_scalar(grad::sub(grad::exp(log_ratio), log_ratio), -1.0);
}

inline double k3_kl(double logp, double logp_ref) {
  const double lr = logp_ref - logp;
  return std::exp(lr) - lr - 1.0;
}

enum class RewardMode { group, raw };

inline const char* to_string(RewardMode m) {
  return m == RewardMode::group ? "group" : "raw";
}

struct FlowRLOptions {
  double beta = 15.0;
  double epsilon = 0.2;
  RewardMode reward_mode = RewardMode::group;
  bool length_normalize = true;
  // false forces w = 1 (the no-importance-sampling ablation arm).
  bool importance_weighting = true;
};

struct LossBreakdown {
  grad::Var loss;  // scalar to backpropagate
  double total = 0.0;
  std::vector<double> residuals;
  std::vector<double> weights;
  // Per-trajectory residual components.
  std::vector<double> log_z;
  std::vector<double> logp_norm;
  std::vector<double> beta_r;
  std::vector<double> ref_logp_norm;
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline std::size_t batch_size(std::span<const RolloutGroup> groups) {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.trajectories.size();
  if (n == 0) throw ContractError("empty batch");
  return n;
}

}  // namespace detail

// Mean over all trajectories of
//   w * (log Z(x) + c*log pi(y|x) - beta*r - c*log pi_ref(y|x))^2
// with c = 1/|y| under length normalization (else 1), r the normalized or
// raw reward per `reward_mode`, and w the detached clipped importance
// weight against the rollout snapshot. log pi_ref is read from the
// trajectory (recorded at collection).
inline LossBreakdown flowrl_loss(grad::Tape& tape,
                                 std::span<const RolloutGroup> groups,
                                 Policy& policy, PartitionNet& partition,
                                 const FlowRLOptions& opt) {
  const std::size_t n = detail::batch_size(groups);
  LossBreakdown out;
  std::vector<grad::Var> terms;
  for (const auto& group : groups) {
    grad::Var log_z = partition.forward(tape, group.prompt);
    for (const auto& traj : group.trajectories) {
      if (!traj.logp_old) {
        throw ContractError("flowrl_loss: trajectory has no logp_old");
      }
      const double c = opt.length_normalize ? 1.0 / static_cast<double>(traj.length()) : 1.0;
      const double r = opt.reward_mode == RewardMode::group ? traj.normalized_reward
                                                            : traj.reward;
      grad::Var logp = policy.logprob_var(tape, group.prompt, traj.tokens);
      grad::Var residual = grad::add_scalar(grad::add(log_z, grad::scale(logp, c)),
                                            -opt.beta * r - c * traj.logp_ref);
      const double w = opt.importance_weighting
                           ? importance_weight(logp.scalar(), *traj.logp_old, opt.epsilon)
                           : 1.0;
      terms.push_back(grad::scale(grad::square(residual), w));
      out.residuals.push_back(residual.scalar());
      out.weights.push_back(w);
      out.log_z.push_back(log_z.scalar());
      out.logp_norm.push_back(c * logp.scalar());
      out.beta_r.push_back(opt.beta * r);
      out.ref_logp_norm.push_back(c * traj.logp_ref);
    }
  }
  out.loss = grad::scale(grad::sum(grad::stack(terms)), 1.0 / static_cast<double>(n));
  out.total = out.loss.scalar();
  return out;
}

inline LossBreakdown flowrl_loss(grad::Tape& tape, const RolloutGroup& group,
                                 Policy& policy, PartitionNet& partition,
                                 const FlowRLOptions& opt) {
  return flowrl_loss(tape, std::span<const RolloutGroup>(&group, 1), policy,
                     partition, opt);
}

// Plain trajectory balance: (log Z(x) + log pi(y|x) - beta*r)^2 with the raw
// reward, no length normalization and no importance weight.
inline grad::Var trajectory_balance_loss(grad::Tape& tape, const Trajectory& traj,
                                         const Prompt& prompt, Policy& policy,
                                         PartitionNet& partition, double beta) {
  grad::Var log_z = partition.forward(tape, prompt);
  grad::Var logp = policy.logprob_var(tape, prompt, traj.tokens);
  return grad::square(grad::add_scalar(grad::add(log_z, logp), -beta * traj.reward));
}

inline grad::Var trajectory_balance_loss(grad::Tape& tape,
                                         std::span<const RolloutGroup> groups,
                                         Policy& policy, PartitionNet& partition,
                                         double beta) {
  const std::size_t n = detail::batch_size(groups);
  std::vector<grad::Var> terms;
  for (const auto& g : groups) {
    for (const auto& t : g.trajectories) {
      terms.push_back(trajectory_balance_loss(tape, t, g.prompt, policy, partition, beta));
    }
  }
  return grad::scale(grad::sum(grad::stack(terms)), 1.0 / static_cast<double>(n));
}

// Negated GRPO objective. Token-level clipped surrogate with the group
// advantage (Trajectory::normalized_reward) broadcast over tokens, averaged
// per trajectory, minus lambda * k3(pi, ref) on sequence log-probs, averaged
// over the batch.
inline grad::Var grpo_loss(grad::Tape& tape, std::span<const RolloutGroup> groups,
                           Policy& policy, double epsilon, double lambda) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ContractError("epsilon must lie in (0, 1)");
  const std::size_t n = detail::batch_size(groups);
  std::vector<grad::Var> objectives;
  for (const auto& group : groups) {
    for (const auto& traj : group.trajectories) {
      if (traj.token_logp_old.size() != traj.tokens.size()) {
        throw ContractError("grpo_loss: per-token logp_old missing");
      }
      const double adv = traj.normalized_reward;
      auto lps = policy.token_logprobs(tape, group.prompt, traj.tokens);
      std::vector<grad::Var> surrogate;
      for (std::size_t t = 0; t < lps.size(); ++t) {
        grad::Var ratio = grad::exp(grad::add_scalar(lps[t], -traj.token_logp_old[t]));
        grad::Var clipped = grad::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
        surrogate.push_back(grad::minimum(grad::scale(ratio, adv), grad::scale(clipped, adv)));
      }
      grad::Var per_traj = grad::mean(grad::stack(surrogate));
      if (lambda != 0.0) {
        grad::Var logp = grad::sum(grad::stack(lps));
        per_traj = grad::sub(per_traj, grad::scale(k3_kl(logp, traj.logp_ref), lambda));
      }
      objectives.push_back(per_traj);
    }
  }
  return grad::scale(grad::sum(grad::stack(objectives)), -1.0 / static_cast<double>(n));
}

// REINFORCE++ as interpreted here: rewards standardized across the whole
// batch, length-averaged log-probs, plus lambda * k3(pi, ref).
inline grad::Var reinforce_pp_loss(grad::Tape& tape,
                                   std::span<const RolloutGroup> groups,
                                   Policy& policy, double lambda) {
  const std::size_t n = detail::batch_size(groups);
  std::vector<double> rewards;
  for (const auto& g : groups) {
    for (const auto& t : g.trajectories) rewards.push_back(t.reward);
  }
  const auto adv = group_normalize(rewards);
  std::vector<grad::Var> terms;
  std::size_t i = 0;
  for (const auto& g : groups) {
    for (const auto& t : g.trajectories) {
      grad::Var logp = policy.logprob_var(tape, g.prompt, t.tokens);
      grad::Var term = grad::scale(logp, -adv[i++] / static_cast<double>(t.length()));
      if (lambda != 0.0) term = grad::add(term, grad::scale(k3_kl(logp, t.logp_ref), lambda));
      terms.push_back(term);
    }
  }
  return grad::scale(grad::sum(grad::stack(terms)), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// PPO with a learned critic.

struct PpoOptions {
  double epsilon = 0.2;
  double gamma = 1.0;
  double gae_lambda = 1.0;
  double value_coef = 0.5;
};

// Fixed critic state encoding: prompt representation followed by a one-hot
// slot per position (vocab_size + 1 entries, the last meaning "empty").
inline std::size_t critic_feature_dim(const TokenSpace& space, std::size_t prompt_dim) {
  return prompt_dim + static_cast<std::size_t>(space.max_len) *
                          static_cast<std::size_t>(space.vocab_size + 1);
}

inline std::vector<double> critic_features(const TokenSpace& space, const Prompt& prompt,
                                           std::span<const int> prefix) {
  auto f = prompt.representation();
  const std::size_t base = f.size();
  const std::size_t slot = static_cast<std::size_t>(space.vocab_size + 1);
  f.resize(critic_feature_dim(space, base), 0.0);
  for (std::size_t t = 0; t < static_cast<std::size_t>(space.max_len); ++t) {
    const std::size_t k = t < prefix.size() ? static_cast<std::size_t>(prefix[t])
                                            : static_cast<std::size_t>(space.vocab_size);
    f[base + t * slot + k] = 1.0;
  }
  return f;
}

inline grad::DenseNet make_critic(const TokenSpace& space, std::size_t prompt_dim,
                                  std::size_t hidden, std::uint64_t seed) {
  using grad::Activation;
  const std::size_t dims[] = {critic_feature_dim(space, prompt_dim), hidden, hidden, 1};
  const Activation acts[] = {Activation::tanh, Activation::tanh, Activation::identity};
  grad::DenseNet net(dims, acts);
  net.init_glorot(seed);
  return net;
}

// GAE over a terminal-reward episode. values[t] = V(s_t); the value after the
// final token is 0.
inline std::vector<double> gae_advantages(std::span<const double> values,
                                          double terminal_reward, double gamma,
                                          double lambda) {
  const std::size_t n = values.size();
  std::vector<double> adv(n, 0.0);
  double running = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    const double next_v = k + 1 < n ? values[k + 1] : 0.0;
    const double r = k + 1 == n ? terminal_reward : 0.0;
    const double delta = r + gamma * next_v - values[k];
    running = delta + gamma * lambda * running;
    adv[k] = running;
  }
  return adv;
}

// Clipped token-level surrogate with GAE advantages (treated as constants)
// plus value_coef * squared error of the critic against the GAE returns.
// Per-trajectory token means, averaged over the batch.
inline grad::Var ppo_loss(grad::Tape& tape, std::span<const RolloutGroup> groups,
                          Policy& policy, grad::DenseNet& critic,
                          const PpoOptions& opt) {
  if (!(opt.epsilon > 0.0 && opt.epsilon < 1.0)) throw ContractError("epsilon must lie in (0, 1)");
  const std::size_t n = detail::batch_size(groups);
  const TokenSpace& space = policy.space();
  std::vector<grad::Var> terms;
  for (const auto& group : groups) {
    for (const auto& traj : group.trajectories) {
      if (traj.token_logp_old.size() != traj.tokens.size()) {
        throw ContractError("ppo_loss: per-token logp_old missing");
      }
      const std::span<const int> toks(traj.tokens);
      std::vector<double> values;
      for (std::size_t t = 0; t < toks.size(); ++t) {
        values.push_back(critic.evaluate(critic_features(space, group.prompt, toks.first(t)))[0]);
      }
      const auto adv = gae_advantages(values, traj.reward, opt.gamma, opt.gae_lambda);
      auto lps = policy.token_logprobs(tape, group.prompt, traj.tokens);
      std::vector<grad::Var> pg;
      std::vector<grad::Var> vf;
      for (std::size_t t = 0; t < toks.size(); ++t) {
        grad::Var ratio = grad::exp(grad::add_scalar(lps[t], -traj.token_logp_old[t]));
        grad::Var clipped = grad::clamp(ratio, 1.0 - opt.epsilon, 1.0 + opt.epsilon);
        pg.push_back(grad::neg(grad::minimum(grad::scale(ratio, adv[t]),
                                             grad::scale(clipped, adv[t]))));
        grad::Var v = grad::pick(
            critic.forward(tape, tape.constant(critic_features(space, group.prompt, toks.first(t)))), 0);
        vf.push_back(grad::square(grad::add_scalar(v, -(adv[t] + values[t]))));
      }
      terms.push_back(grad::add(grad::mean(grad::stack(pg)),
                                grad::scale(grad::mean(grad::stack(vf)), opt.value_coef)));
    }
  }
  return grad::scale(grad::sum(grad::stack(terms)), 1.0 / static_cast<double>(n));
}

}  // namespace flowrl

#endif  // FLOWRL_OBJECTIVES_HPP_
