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

// Randomized self-checks behind the `check` verb: gradient checks of dense
// nets and of every training loss, and the two enumeration identities
// (expected TB gradient = 2 x reverse-KL gradient; KL decomposition into
// reward, log-partition, reference and entropy terms).

#ifndef FLOWRL_SELFCHECK_HPP_
#define FLOWRL_SELFCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "flowrl/envs.hpp"
#include "flowrl/grad.hpp"
#include "flowrl/metrics.hpp"
#include "flowrl/objectives.hpp"
#include "flowrl/policy.hpp"
#include "flowrl/rng.hpp"

namespace flowrl {

struct CheckResult {
  std::string name;
  int instances = 0;
  double worst = 0.0;      // worst error statistic over instances
  double tolerance = 0.0;
  bool passed = false;
};

// Aggregate of per-instance prop1 discrepancies, for positive and negative use.
struct Prop1Sweep {
  int instances = 0;
  double worst = 0.0;
  double best = std::numeric_limits<double>::infinity();
  int passing = 0;
};

namespace detail {

// Groups sampled from `behaviour` with old/ref log-probs and rewards filled.
inline std::vector<RolloutGroup> random_groups(const Environment& env, const Policy& behaviour,
                                               const Policy& ref, int num_groups, int group_size,
                                               std::uint64_t seed) {
  std::vector<RolloutGroup> groups;
  for (int g = 0; g < num_groups; ++g) {
    const Prompt& prompt = env.prompts()[static_cast<std::size_t>(g) % env.prompts().size()];
    RolloutGroup group{prompt, {}};
    for (int i = 0; i < group_size; ++i) {
      RngStream rng(stream_key({seed, static_cast<std::uint64_t>(g), static_cast<std::uint64_t>(i)}));
      Trajectory t = sample_trajectory(behaviour, prompt, rng);
      t.token_logp_old = token_logprobs(behaviour, prompt, t.tokens);
      double s = 0.0;
      for (double v : t.token_logp_old) s += v;
      t.logp_old = s;
      t.logp_ref = logprob(ref, prompt, t.tokens);
      t.reward = env.reward(prompt.id, t.tokens);
      group.trajectories.push_back(std::move(t));
    }
    normalize_group(group);
    groups.push_back(std::move(group));
  }
  return groups;
}

}  // namespace detail

// Random dense nets of 1-3 layers with mixed activations and a random
// quadratic loss.
inline CheckResult check_dense_nets(int count, std::uint64_t seed, double tolerance = 1e-5) {
  CheckResult res{"gradient: random dense nets", count, 0.0, tolerance, true};
  RngStream rng(seed);
  const grad::Activation acts[] = {grad::Activation::tanh, grad::Activation::relu,
                                   grad::Activation::identity};
  for (int k = 0; k < count; ++k) {
    const std::size_t layers = 1 + rng.below(3);
    std::vector<std::size_t> dims{2 + rng.below(4)};
    std::vector<grad::Activation> a;
    for (std::size_t l = 0; l < layers; ++l) {
      dims.push_back(1 + rng.below(5));
      a.push_back(acts[rng.below(3)]);
    }
    grad::DenseNet net(dims, a);
    net.init_glorot(rng.below(UINT32_MAX));
    // Biases away from zero so relu kinks are not hit at the origin.
    for (auto& l : net.layers()) {
      for (auto& b : l.bias.value) b = rng.uniform(-0.5, 0.5);
    }
    std::vector<double> x(dims.front()), target(dims.back());
    for (auto& v : x) v = rng.uniform(-1, 1);
    for (auto& v : target) v = rng.uniform(-1, 1);
    auto rep = grad::finite_diff_check(net, [&](grad::Tape& t) {
      grad::Var y = net.forward(t, t.constant(x));
      return grad::sum(grad::square(grad::sub(y, t.constant(target))));
    }, tolerance);
    res.worst = std::max(res.worst, rep.max_relative_error);
    res.passed = res.passed && rep.passed;
  }
  return res;
}

// Gradient checks of flowrl (group and raw modes), tb, grpo, rpp and ppo
// on random batches, for tabular and mlp policies. FlowRL importance weights
// are pushed onto a clip bound, where they are locally constant, so the
// finite differences see the same function the tape differentiates.
inline std::vector<CheckResult> check_losses(int instances, std::uint64_t seed,
                                             double tolerance = 1e-5) {
  std::vector<CheckResult> out;
  for (const char* name : {"flowrl", "tb", "grpo", "rpp", "ppo"}) {
    out.push_back(CheckResult{std::string("gradient: ") + name + " loss", 0, 0.0, tolerance, true});
  }
  auto record = [&](std::size_t i, const grad::GradCheckReport& rep) {
    out[i].instances += 1;
    out[i].worst = std::max(out[i].worst, rep.max_relative_error);
    out[i].passed = out[i].passed && rep.passed;
  };
  EnvSpec spec;
  spec.family = "conditional";
  spec.vocab_size = 3;
  spec.max_len = 3;
  spec.eos = true;
  spec.num_modes = 1;
  spec.num_prompts = 2;
  for (int n = 0; n < instances; ++n) {
    const std::uint64_t s = stream_key({seed, static_cast<std::uint64_t>(n)});
    spec.seed = s;
    const auto env = make_env(spec);
    const auto np = env.prompts().size();
    const auto dim = env.prompt_dim();
    const bool tabular = n % 2 == 0;
    auto build = [&](std::uint64_t k) {
      return tabular ? Policy::tabular(env.space(), np, k, 0.7)
                     : Policy::mlp(env.space(), dim, 4, 6, k);
    };
    Policy policy = build(s + 1);
    Policy old = build(s + 2);
    Policy ref = build(s + 3);
    PartitionNet z(dim, 6, s + 4);
    auto critic = make_critic(env.space(), dim, 6, s + 5);
    const auto groups = detail::random_groups(env, old, ref, 2, 4, s);

    auto flow_groups = groups;
    RngStream side(s + 6);
    for (auto& g : flow_groups) {
      for (auto& t : g.trajectories) {
        t.logp_old = logprob(policy, g.prompt, t.tokens) + (side.uniform() < 0.5 ? -1.0 : 1.0);
      }
    }
    std::vector<grad::Parameter*> with_z = policy.parameters();
    for (auto* p : z.parameters()) with_z.push_back(p);
    auto pol = policy.parameters();
    for (RewardMode mode : {RewardMode::group, RewardMode::raw}) {
      FlowRLOptions opt;
      opt.reward_mode = mode;
      opt.beta = 2.0;
      opt.length_normalize = mode == RewardMode::group;
      record(0, grad::finite_diff_check(with_z, [&](grad::Tape& t) {
        return flowrl_loss(t, flow_groups, policy, z, opt).loss;
      }, tolerance));
    }
    record(1, grad::finite_diff_check(with_z, [&](grad::Tape& t) {
      return trajectory_balance_loss(t, groups, policy, z, 2.0);
    }, tolerance));
    record(2, grad::finite_diff_check(pol, [&](grad::Tape& t) {
      return grpo_loss(t, groups, policy, 0.2, 0.05);
    }, tolerance));
    record(3, grad::finite_diff_check(pol, [&](grad::Tape& t) {
      return reinforce_pp_loss(t, groups, policy, 0.05);
    }, tolerance));
    // Advantages are computed from untaped critic values, so the policy
    // side and the value side are checked separately.
    record(4, grad::finite_diff_check(pol, [&](grad::Tape& t) {
      return ppo_loss(t, groups, policy, critic, PpoOptions{});
    }, tolerance));
    const auto space = env.space();
    record(4, grad::finite_diff_check(critic, [&](grad::Tape& t) {
      std::vector<grad::Var> terms;
      for (const auto& g : groups) {
        for (const auto& tr : g.trajectories) {
          const std::span<const int> toks(tr.tokens);
          for (std::size_t k = 0; k < toks.size(); ++k) {
            grad::Var v = grad::pick(
                critic.forward(t, t.constant(critic_features(space, g.prompt, toks.first(k)))), 0);
            terms.push_back(grad::square(grad::add_scalar(v, -tr.reward)));
          }
        }
      }
      return grad::mean(grad::stack(terms));
    }, tolerance));
  }
  return out;
}

// Random tabular policies over small modal envs (at most 1,024 sequences),
// random rewards via random peaks, random log Z and beta.
inline Prop1Sweep prop1_sweep(int count, std::uint64_t seed, double factor, double tolerance) {
  Prop1Sweep out;
  out.instances = count;
  RngStream rng(seed);
  for (int k = 0; k < count; ++k) {
    EnvSpec spec;
    spec.vocab_size = 2 + static_cast<int>(rng.below(2));
    spec.max_len = spec.vocab_size == 2 ? 3 + static_cast<int>(rng.below(2)) : 3;
    spec.eos = rng.uniform() < 0.5;
    spec.num_modes = 2;
    spec.peaks = {rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0)};
    spec.seed = rng.below(UINT32_MAX);
    const auto env = make_env(spec);
    Policy policy = Policy::tabular(env.space(), 1, rng.below(UINT32_MAX), rng.uniform(0.3, 1.5));
    Prop1Options opt;
    opt.factor = factor;
    opt.tolerance = tolerance;
    const auto rep = prop1_check(policy, rng.uniform(-2, 2), env, 0, rng.uniform(0.5, 3.0), opt);
    out.worst = std::max(out.worst, rep.relative_discrepancy);
    out.best = std::min(out.best, rep.relative_discrepancy);
    if (rep.passed) ++out.passing;
  }
  return out;
}

inline CheckResult check_prop1(int count, std::uint64_t seed, double tolerance = 1e-4) {
  const auto s = prop1_sweep(count, seed, 2.0, tolerance);
  return {"prop1: TB grad = 2 x KL grad", count, s.worst, tolerance, s.passing == count};
}

// The same instances with factor 1 must all be rejected; `worst` reports
// the smallest discrepancy seen, which must stay above the tolerance.
inline CheckResult check_prop1_control(int count, std::uint64_t seed, double tolerance = 1e-4) {
  const auto s = prop1_sweep(count, seed, 1.0, tolerance);
  return {"prop1 control: x1 rejected", count, s.best, tolerance, s.passing == 0};
}

// Random (theta, phi, beta) draws over a conditional env, with a random
// tabular reference.
inline CheckResult check_prop2(int count, std::uint64_t seed, double tolerance = 1e-8) {
  CheckResult res{"prop2: KL decomposition identity", count, 0.0, tolerance, true};
  EnvSpec spec;
  spec.family = "conditional";
  spec.vocab_size = 3;
  spec.max_len = 4;
  spec.eos = true;
  spec.num_modes = 2;
  spec.num_prompts = 2;
  spec.seed = seed;
  const auto env = make_env(spec);
  RngStream rng(seed);
  for (int k = 0; k < count; ++k) {
    Policy policy = Policy::tabular(env.space(), 2, rng.below(UINT32_MAX), rng.uniform(0.1, 2.0));
    Policy ref = Policy::tabular(env.space(), 2, rng.below(UINT32_MAX), rng.uniform(0.1, 2.0));
    PartitionNet z(env.prompt_dim(), 8, rng.below(UINT32_MAX));
    const int pid = static_cast<int>(rng.below(2));
    const auto rep = prop2_check(policy, z.log_partition(env.prompt(pid)), ref, env, pid,
                                 rng.uniform(0.0, 30.0), tolerance);
    res.worst = std::max(res.worst, rep.abs_error);
    res.passed = res.passed && rep.passed;
  }
  return res;
}

inline std::vector<CheckResult> run_self_checks(std::uint64_t seed = 2026) {
  std::vector<CheckResult> out{check_dense_nets(20, seed)};
  for (auto& r : check_losses(4, seed)) out.push_back(std::move(r));
  out.push_back(check_prop1(20, seed));
  out.push_back(check_prop1_control(20, seed));
  out.push_back(check_prop2(100, seed));
  return out;
}

}  // namespace flowrl

#endif  // FLOWRL_SELFCHECK_HPP_
