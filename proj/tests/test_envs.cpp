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


#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "flowrl/envs.hpp"

using namespace flowrl;
using Catch::Approx;

namespace {

EnvSpec modal(int v, int l, int k, std::uint64_t seed = 7) {
  EnvSpec s;
  s.vocab_size = v;
  s.max_len = l;
  s.num_modes = k;
  s.seed = seed;
  return s;
}

int hamming(const std::vector<int>& a, const std::vector<int>& b) {
  int d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

}  // namespace

TEST_CASE("modal reward examples", "[envs][reward]") {
  auto env = make_env(modal(4, 4, 2));
  const auto& m = env.modes(0)[0].tokens;
  CHECK(env.reward(0, m) == 1.0);

  // Change two positions to tokens far from every mode when possible.
  std::vector<int> y = m;
  y[0] = (y[0] + 1) % 4;
  y[1] = (y[1] + 1) % 4;
  if (hamming(y, env.modes(0)[1].tokens) > 2) {
    CHECK(env.reward(0, y) == Approx(std::exp(-2.0)).margin(1e-15));
    CHECK(env.reward(0, y) == Approx(0.1353).margin(1e-4));
  }

  // Any sequence farther than the cutoff from every mode gets the floor.
  int floor_hits = 0;
  env.space().for_each_sequence([&](const std::vector<int>& s) {
    bool far = true;
    for (const auto& mode : env.modes(0)) far = far && hamming(s, mode.tokens) > 2;
    if (far) {
      CHECK(env.reward(0, s) == 0.01);
      ++floor_hits;
    }
  });
  CHECK(floor_hits > 0);
  CHECK_THROWS_AS(env.reward(0, std::vector<int>{0, 1}), ContractError);
}

TEST_CASE("reward is the max kernel over modes within the cutoff", "[envs][reward]") {
  EnvSpec s = modal(3, 5, 3, 11);
  s.peaks = {1.0, 0.7, 0.4};
  s.tau = 0.8;
  auto env = make_env(s);
  env.space().for_each_sequence([&](const std::vector<int>& y) {
    double expect = 0.01;
    for (const auto& m : env.modes(0)) {
      const int d = hamming(y, m.tokens);
      if (d <= 2) expect = std::max(expect, m.peak * std::exp(-d / 0.8));
    }
    CHECK(env.reward(0, y) == expect);
  });
}

TEST_CASE("variable-length distance pads with a sentinel", "[envs][reward]") {
  EnvSpec s = modal(3, 4, 2, 3);
  s.eos = true;
  auto env = make_env(s);
  const int eos = env.space().eos_token();
  // [0, eos] vs [0, 1, eos]: position 1 differs (sentinel vs 1), position 2
  // differs (sentinel vs sentinel is equal) -> distance 1.
  CHECK(env.distance(std::vector<int>{0, eos}, std::vector<int>{0, 1, eos}) == 1);
  CHECK(env.distance(std::vector<int>{eos}, std::vector<int>{0, 1, 2, 0}) == 4);
  for (const auto& m : env.modes(0)) CHECK(env.space().is_complete(m.tokens));
}

TEST_CASE("enumerate_rewards examples", "[envs][enumerate]") {
  auto env = make_env(modal(2, 3, 1));
  auto table = enumerate_rewards(env, 0);
  CHECK(table.sequences.size() == 8);

  auto big = make_env(modal(4, 5, 4));
  auto t = enumerate_rewards(big, 0);
  CHECK(t.sequences.size() == 1024);
  RngStream rng(5);
  for (int i = 0; i < 100; ++i) {
    const auto k = static_cast<std::size_t>(rng.below(t.sequences.size()));
    CHECK(t.rewards[k] == big.reward(0, t.sequences[k]));
  }

  // Partition by direct summation equals a log-sum-exp evaluation.
  const double beta = 15.0;
  double z = 0.0;
  double m = 0.0;
  for (double r : t.rewards) {
    z += std::exp(beta * r);
    m = std::max(m, beta * r);
  }
  double shifted = 0.0;
  for (double r : t.rewards) shifted += std::exp(beta * r - m);
  CHECK(std::log(z) == Approx(m + std::log(shifted)).epsilon(1e-13));
  CHECK_THROWS_AS(enumerate_rewards(big, 0, 100), EnumerationTooLarge);
}

TEST_CASE("make_env is deterministic", "[envs][make]") {
  auto a = make_env(modal(6, 5, 4, 7));
  auto b = make_env(modal(6, 5, 4, 7));
  REQUIRE(a.modes(0).size() == 4);
  for (std::size_t k = 0; k < 4; ++k) CHECK(a.modes(0)[k].tokens == b.modes(0)[k].tokens);
  CHECK(enumerate_rewards(a, 0).rewards == enumerate_rewards(b, 0).rewards);
  auto c = make_env(modal(6, 5, 4, 8));
  bool differs = false;
  for (std::size_t k = 0; k < 4; ++k) differs = differs || a.modes(0)[k].tokens != c.modes(0)[k].tokens;
  CHECK(differs);
}

TEST_CASE("modes are pairwise separated", "[envs][make]") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto env = make_env(modal(4, 6, 4, seed));
    const auto& ms = env.modes(0);
    for (std::size_t i = 0; i < ms.size(); ++i) {
      for (std::size_t j = i + 1; j < ms.size(); ++j) {
        CHECK(hamming(ms[i].tokens, ms[j].tokens) > 2 * ms[i].radius);
      }
    }
  }
}

TEST_CASE("hypergrid family", "[envs][make]") {
  EnvSpec s;
  s.family = "hypergrid";
  s.dims = 2;
  s.side = 8;
  auto env = make_env(s);
  const auto& space = env.space();
  CHECK(space.vocab_size == 2);
  CHECK(space.eos);
  CHECK(space.max_len == 2 * 7 + 1);
  CHECK(env.modes(0).size() == 4);

  // Cells reached by increments; stop at the origin has the floor reward.
  CHECK(env.cell(std::vector<int>{0, 0, 1, 2}) == std::vector<int>{2, 1});
  CHECK(env.reward(0, std::vector<int>{2}) == Approx(s.floor + (1.0 - s.floor) * 0.2));

  // Reward as a function of the cell reached, highest in the corner bands.
  auto reach = [&](int x, int y) {
    std::vector<int> seq(static_cast<std::size_t>(x), 0);
    seq.insert(seq.end(), static_cast<std::size_t>(y), 1);
    seq.push_back(2);
    return env.reward(0, seq);
  };
  const double center = reach(3, 4);
  for (const auto& corner : {std::pair{1, 1}, {1, 6}, {6, 1}, {6, 6}}) {
    CHECK(reach(corner.first, corner.second) == Approx(1.0));
    CHECK(reach(corner.first, corner.second) > center);
  }
  CHECK(center == s.floor);
}

TEST_CASE("conditional family: prompt-specific modes", "[envs][make]") {
  EnvSpec s = modal(4, 4, 2, 5);
  s.family = "conditional";
  s.num_prompts = 4;
  auto env = make_env(s);
  REQUIRE(env.prompts().size() == 4);
  CHECK(env.prompt_dim() == 4);
  std::set<std::vector<int>> seen;
  for (int p = 0; p < 4; ++p) {
    for (const auto& m : env.modes(p)) CHECK(seen.insert(m.tokens).second);
  }
  const auto& m0 = env.modes(0)[0].tokens;
  CHECK(env.reward(0, m0) == 1.0);
  bool depends = false;
  for (int p = 1; p < 4; ++p) depends = depends || env.reward(p, m0) != 1.0;
  CHECK(depends);
}

TEST_CASE("invalid specs are config errors", "[envs][make]") {
  EnvSpec s;
  s.family = "maze";
  CHECK_THROWS_AS(make_env(s), ConfigError);
  s = EnvSpec{};
  s.floor = 0.0;
  CHECK_THROWS_AS(make_env(s), ConfigError);
  s = EnvSpec{};
  s.peaks = {1.0, 2.0};
  CHECK_THROWS_AS(make_env(s), ConfigError);
  s = modal(2, 2, 4);
  CHECK_THROWS_AS(make_env(s), ConfigError);
}

TEST_CASE("rewards are nonnegative with the floor as minimum", "[envs][invariant]") {
  auto env = make_env(modal(4, 5, 4, 1));
  auto t = enumerate_rewards(env, 0);
  CHECK(*std::min_element(t.rewards.begin(), t.rewards.end()) == 0.01);
}

TEST_CASE("reward table CSV export", "[envs][csv]") {
  EnvSpec s = modal(2, 2, 1, 3);
  s.eos = true;
  auto env = make_env(s);
  std::ostringstream os;
  write_reward_table_csv(os, env, enumerate_rewards(env, 0));
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "sequence,reward");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 7);
  CHECK(os.str().find("\neos,") != std::string::npos);
}
