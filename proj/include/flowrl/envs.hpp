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

// Synthetic conditional reward environments over a finite TokenSpace.
//
//   modal_seq    reward(y) = max_k peak_k * exp(-d(y, m_k) / tau) over modes
//                within `cutoff`, floored at `floor`. d is Hamming distance
//                on the padded length-max_len view (eos and padding map to a
//                sentinel).
//   conditional  modal_seq with `num_prompts` prompts, each with its own
//                mode set; prompts are one-hot.
//   hypergrid    D-dimensional grid of side H. Tokens 0..D-1 increment one
//                coordinate (clamped at H-1), eos stops. Reward is the
//                classic corner-peaked grid reward rescaled to [floor, peak].
//                Mode distance is L1 between final cells.

#ifndef FLOWRL_ENVS_HPP_
#define FLOWRL_ENVS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "flowrl/errors.hpp"
#include "flowrl/policy.hpp"
#include "flowrl/rng.hpp"

namespace flowrl {

struct EnvSpec {
  std::string family = "modal_seq";
  int vocab_size = 4;
  int max_len = 4;
  bool eos = false;
  int num_modes = 4;
  int radius = 1;
  double tau = 1.0;
  double peak = 1.0;
  std::vector<double> peaks;  // per mode; empty means every mode uses `peak`
  double floor = 0.01;
  int cutoff = 2;
  int num_prompts = 4;  // conditional only
  int dims = 2;         // hypergrid only
  int side = 8;         // hypergrid only
  std::uint64_t seed = 7;
};

struct Mode {
  std::vector<int> tokens;
  int radius = 1;
  double peak = 1.0;
};

enum class Distance { hamming, grid_l1 };

struct RewardTable {
  std::vector<std::vector<int>> sequences;
  std::vector<double> rewards;
};

class Environment {
 public:
  const EnvSpec& spec() const { return spec_; }
  const TokenSpace& space() const { return space_; }
  const std::vector<Prompt>& prompts() const { return prompts_; }
  const Prompt& prompt(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= prompts_.size()) {
      throw DomainError("unknown prompt id " + std::to_string(id));
    }
    return prompts_[static_cast<std::size_t>(id)];
  }
  const std::vector<Mode>& modes(int prompt_id) const {
    prompt(prompt_id);
    return modes_[static_cast<std::size_t>(prompt_id)];
  }
  std::size_t prompt_dim() const { return prompts_.front().dim(); }
  Distance distance_kind() const { return distance_; }

  // Outcome reward; deterministic and >= floor.
  double reward(int prompt_id, std::span<const int> tokens) const {
    space_.check_complete(tokens);
    const auto& ms = modes(prompt_id);
    if (distance_ == Distance::grid_l1) return grid_reward(tokens);
    double best = spec_.floor;
    for (const auto& m : ms) {
      const int d = distance(tokens, m.tokens);
      if (d > spec_.cutoff) continue;
      best = std::max(best, m.peak * std::exp(-static_cast<double>(d) / spec_.tau));
    }
    return best;
  }

  int distance(std::span<const int> a, std::span<const int> b) const {
    if (distance_ == Distance::grid_l1) {
      const auto ca = cell(a);
      const auto cb = cell(b);
      int d = 0;
      for (std::size_t i = 0; i < ca.size(); ++i) d += std::abs(ca[i] - cb[i]);
      return d;
    }
    int d = 0;
    for (int t = 0; t < space_.max_len; ++t) {
      if (padded(a, t) != padded(b, t)) ++d;
    }
    return d;
  }

  bool in_mode(const Mode& m, std::span<const int> tokens) const {
    return distance(tokens, m.tokens) <= m.radius;
  }

  // Final grid cell reached by a hypergrid action sequence.
  std::vector<int> cell(std::span<const int> tokens) const {
    std::vector<int> c(static_cast<std::size_t>(spec_.dims), 0);
    for (int tok : tokens) {
      if (space_.is_eos(tok)) break;
      auto& x = c[static_cast<std::size_t>(tok)];
      x = std::min(x + 1, spec_.side - 1);
    }
    return c;
  }

  friend Environment make_env(const EnvSpec& spec);

 private:
  int padded(std::span<const int> y, int t) const {
    if (static_cast<std::size_t>(t) >= y.size()) return -1;
    const int tok = y[static_cast<std::size_t>(t)];
    return space_.is_eos(tok) ? -1 : tok;
  }

  double grid_reward(std::span<const int> tokens) const {
    const auto c = cell(tokens);
    bool outer = true;
    bool inner = true;
    for (int x : c) {
      const double u = std::abs(static_cast<double>(x) / (spec_.side - 1) - 0.5);
      outer = outer && (u > 0.25 && u <= 0.5);
      inner = inner && (u > 0.3 && u < 0.4);
    }
    const double raw = 0.5 * (outer ? 1.0 : 0.0) + 2.0 * (inner ? 1.0 : 0.0);
    return spec_.floor + (spec_.peak - spec_.floor) * raw / 2.5;
  }

  EnvSpec spec_;
  TokenSpace space_;
  Distance distance_ = Distance::hamming;
  std::vector<Prompt> prompts_;
  std::vector<std::vector<Mode>> modes_;
};

namespace detail {

inline std::vector<int> random_mode(const TokenSpace& space, RngStream& rng) {
  int content = space.max_len;
  if (space.eos) {
    content = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(space.max_len)));
  }
  std::vector<int> tokens;
  for (int i = 0; i < content; ++i) {
    tokens.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(space.vocab_size))));
  }
  if (content < space.max_len) tokens.push_back(space.eos_token());
  return tokens;
}

inline void validate(const EnvSpec& s) {
  auto fail = [](const std::string& msg) { throw ConfigError("env: " + msg); };
  if (s.family != "modal_seq" && s.family != "conditional" && s.family != "hypergrid") {
    fail("unknown family '" + s.family + "' (expected modal_seq, conditional or hypergrid)");
  }
  if (!(s.floor > 0.0)) fail("floor must be > 0");
  if (!(s.peak >= s.floor)) fail("peak must be >= floor");
  for (double p : s.peaks) {
    if (!(p >= s.floor)) fail("every entry of peaks must be >= floor");
  }
  if (s.radius < 0) fail("radius must be >= 0");
  if (s.family == "hypergrid") {
    if (s.dims < 1 || s.side < 2) fail("hypergrid needs dims >= 1 and side >= 2");
    return;
  }
  if (s.vocab_size < 1 || s.max_len < 1) fail("vocab_size and max_len must be >= 1");
  if (s.num_modes < 1) fail("num_modes must be >= 1");
  if (!(s.tau > 0.0)) fail("tau must be > 0");
  if (s.cutoff < 0) fail("cutoff must be >= 0");
  if (!s.peaks.empty() && s.peaks.size() != static_cast<std::size_t>(s.num_modes)) {
    fail("peaks must have num_modes entries");
  }
  if (s.family == "conditional" && s.num_prompts < 1) fail("num_prompts must be >= 1");
}

}  // namespace detail

// Deterministic in (family, parameters, seed).
inline Environment make_env(const EnvSpec& spec) {
  detail::validate(spec);
  Environment env;
  env.spec_ = spec;

  if (spec.family == "hypergrid") {
    env.distance_ = Distance::grid_l1;
    env.space_ = TokenSpace{spec.dims, true, spec.dims * (spec.side - 1) + 1};
    env.prompts_.push_back(Prompt{0, {{1.0}}});
    // One mode per corner peak: each coordinate at 1 or side-2.
    std::vector<Mode> modes;
    const int corners = 1 << spec.dims;
    for (int mask = 0; mask < corners; ++mask) {
      Mode m;
      m.radius = spec.radius;
      m.peak = spec.peak;
      for (int d = 0; d < spec.dims; ++d) {
        const int target = (mask >> d) & 1 ? spec.side - 2 : 1;
        for (int k = 0; k < target; ++k) m.tokens.push_back(d);
      }
      m.tokens.push_back(env.space_.eos_token());
      modes.push_back(std::move(m));
    }
    env.modes_.push_back(std::move(modes));
    return env;
  }

  env.space_ = TokenSpace{spec.vocab_size, spec.eos, spec.max_len};
  const int num_prompts = spec.family == "conditional" ? spec.num_prompts : 1;
  RngStream rng(stream_key({spec.seed, static_cast<std::uint64_t>(num_prompts),
                            static_cast<std::uint64_t>(spec.num_modes)}));
  std::vector<std::vector<int>> used;
  for (int p = 0; p < num_prompts; ++p) {
    Prompt prompt;
    prompt.id = p;
    if (spec.family == "conditional") {
      std::vector<double> onehot(static_cast<std::size_t>(num_prompts), 0.0);
      onehot[static_cast<std::size_t>(p)] = 1.0;
      prompt.states.push_back(std::move(onehot));
    } else {
      prompt.states.push_back({1.0});
    }
    env.prompts_.push_back(std::move(prompt));

    // Rejection sampling: modes of one prompt pairwise farther than
    // 2 * radius apart, and no sequence shared with another prompt.
    std::vector<Mode> modes;
    int attempts = 0;
    while (modes.size() < static_cast<std::size_t>(spec.num_modes)) {
      if (++attempts > 100000) {
        throw ConfigError("env: cannot place " + std::to_string(spec.num_modes) +
                          " modes separated by more than 2*radius");
      }
      auto cand = detail::random_mode(env.space_, rng);
      bool ok = std::find(used.begin(), used.end(), cand) == used.end();
      for (const auto& m : modes) {
        if (!ok) break;
        ok = env.distance(cand, m.tokens) > 2 * spec.radius;
      }
      if (!ok) continue;
      Mode m;
      m.tokens = cand;
      m.radius = spec.radius;
      m.peak = spec.peaks.empty() ? spec.peak : spec.peaks[modes.size()];
      used.push_back(cand);
      modes.push_back(std::move(m));
    }
    env.modes_.push_back(std::move(modes));
  }
  return env;
}

inline RewardTable enumerate_rewards(const Environment& env, int prompt_id,
                                     std::uint64_t cap = kDefaultEnumerationCap) {
  RewardTable table;
  env.space().for_each_sequence(
      [&](const std::vector<int>& y) {
        table.sequences.push_back(y);
        table.rewards.push_back(env.reward(prompt_id, y));
      },
      cap);
  return table;
}

// CSV with header `sequence,reward`; tokens space-separated, eos as "eos".
inline void write_reward_table_csv(std::ostream& os, const Environment& env,
                                   const RewardTable& table) {
  os << "sequence,reward\n";
  char buf[64];
  for (std::size_t i = 0; i < table.sequences.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", table.rewards[i]);
    os << format_sequence(env.space(), table.sequences[i]) << ',' << buf << '\n';
  }
}

}  // namespace flowrl

#endif  // FLOWRL_ENVS_HPP_
