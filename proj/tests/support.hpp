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


// Shared fixtures for the unit and acceptance suites.

#ifndef FLOWRL_TESTS_SUPPORT_HPP_
#define FLOWRL_TESTS_SUPPORT_HPP_

#include <cmath>
#include <vector>

#include "flowrl/envs.hpp"
#include "flowrl/grad.hpp"
#include "flowrl/metrics.hpp"
#include "flowrl/objectives.hpp"
#include "flowrl/policy.hpp"

namespace flowrl::testing {

// Rollout groups drawn from `behaviour`, with old log-probs recorded under
// `behaviour` and reference log-probs under `ref`.
inline std::vector<RolloutGroup> make_groups(const Environment& env, const Policy& behaviour,
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
    if (group_size >= 2) normalize_group(group);
    groups.push_back(std::move(group));
  }
  return groups;
}

// Moves every logp_old at least `gap` nats away from the current policy's
// log-prob, so the clipped importance weight sits on a clip bound and is
// locally constant.
inline void push_into_clip(std::vector<RolloutGroup>& groups, const Policy& policy, double gap,
                           std::uint64_t seed) {
  RngStream rng(seed);
  for (auto& g : groups) {
    for (auto& t : g.trajectories) {
      const double lp = logprob(policy, g.prompt, t.tokens);
      t.logp_old = lp + (rng.uniform() < 0.5 ? -gap : gap);
    }
  }
}

// Tabular policy whose sequence distribution for prompt `prompt_id` equals
// `dist`: each next-token logit is the log of the mass of all completions
// through that token.
inline void set_tabular_to(Policy& policy, const Prompt& prompt, const DistributionTable& dist) {
  const TokenSpace& space = policy.space();
  const std::size_t a = static_cast<std::size_t>(space.num_actions());
  auto& table = policy.table();
  // Zero the rows of this prompt, then accumulate masses.
  std::vector<std::vector<double>> mass;
  std::vector<std::size_t> rows;
  auto row_of = [&](std::span<const int> prefix) {
    const std::size_t r = policy.table_row(prompt, prefix);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (rows[k] == r) return k;
    }
    rows.push_back(r);
    mass.emplace_back(a, 0.0);
    return rows.size() - 1;
  };
  for (std::size_t i = 0; i < dist.size(); ++i) {
    const auto& y = dist.sequences[i];
    for (std::size_t t = 0; t < y.size(); ++t) {
      mass[row_of(std::span<const int>(y).first(t))][static_cast<std::size_t>(y[t])] += dist.probs[i];
    }
  }
  for (std::size_t k = 0; k < rows.size(); ++k) {
    for (std::size_t j = 0; j < a; ++j) {
      table.value[rows[k] * a + j] = mass[k][j] > 0.0 ? std::log(mass[k][j]) : -800.0;
    }
  }
}

// Partition net that outputs `log_z` for every prompt.
inline void set_constant_partition(PartitionNet& net, double log_z) {
  for (auto* p : net.parameters()) {
    for (auto& v : p->value) v = 0.0;
  }
  net.net().layers().back().bias.value[0] = log_z;
}

inline EnvSpec small_modal(int vocab, int len, bool eos, int modes, std::uint64_t seed) {
  EnvSpec s;
  s.vocab_size = vocab;
  s.max_len = len;
  s.eos = eos;
  s.num_modes = modes;
  s.seed = seed;
  return s;
}

inline EnvSpec small_conditional(int prompts, std::uint64_t seed) {
  EnvSpec s = small_modal(3, 3, true, 1, seed);
  s.family = "conditional";
  s.num_prompts = prompts;
  return s;
}

}  // namespace flowrl::testing

#endif  // FLOWRL_TESTS_SUPPORT_HPP_
