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

#include <filesystem>
#include <fstream>
#include <sstream>

#include "flowrl/trainer.hpp"
#include "support.hpp"

using namespace flowrl;
using namespace flowrl::testing;
using Catch::Approx;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("flowrl_trainer_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("collect_rollouts: counts, consistency, determinism", "[trainer][rollouts]") {
  auto env = make_env(small_conditional(3, 2));
  TrainConfig cfg;
  cfg.prompts_per_batch = 2;
  cfg.group_size = 8;
  PolicyConfig pc;
  pc.init_scale = 0.5;
  auto state = init_state(cfg, pc, env);
  auto groups = collect_rollouts(state, env, cfg);
  REQUIRE(groups.size() == 2);
  std::size_t n = 0;
  for (const auto& g : groups) {
    n += g.trajectories.size();
    for (const auto& t : g.trajectories) {
      CHECK(*t.logp_old == logprob(state.old_policy, g.prompt, t.tokens));
      CHECK(t.logp_ref == logprob(state.ref_policy, g.prompt, t.tokens));
      CHECK(t.reward == env.reward(g.prompt.id, t.tokens));
    }
    const auto z = group_normalize(g.rewards());
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(g.trajectories[i].normalized_reward == z[i]);
  }
  CHECK(n == 16);
  CHECK(groups[0].prompt.id != groups[1].prompt.id);

  auto again = collect_rollouts(init_state(cfg, pc, env), env, cfg);
  for (std::size_t g = 0; g < 2; ++g) {
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(again[g].trajectories[i].tokens == groups[g].trajectories[i].tokens);
    }
  }
}

TEST_CASE("shard_groups keeps order and membership", "[trainer][shards]") {
  auto env = make_env(small_modal(3, 3, false, 1, 1));
  Policy u = Policy::uniform(env.space(), 1);
  auto groups = make_groups(env, u, u, 3, 4, 2);
  for (int shards : {1, 2, 3, 5, 12}) {
    auto out = shard_groups(groups, shards);
    REQUIRE(out.size() == static_cast<std::size_t>(shards));
    std::vector<std::vector<int>> seen;
    for (const auto& shard : out) {
      std::size_t size = 0;
      for (const auto& g : shard) {
        size += g.trajectories.size();
        for (const auto& t : g.trajectories) seen.push_back(t.tokens);
      }
      CHECK(size >= 12 / static_cast<std::size_t>(shards));
      CHECK(size <= 12 / static_cast<std::size_t>(shards) + 1);
    }
    std::vector<std::vector<int>> expect;
    for (const auto& g : groups) for (const auto& t : g.trajectories) expect.push_back(t.tokens);
    CHECK(seen == expect);
  }
}

TEST_CASE("train_step: first shard is on-policy", "[trainer][step]") {
  auto env = make_env(small_modal(3, 4, true, 2, 3));
  TrainConfig cfg;
  cfg.micro_batches_per_rollout = 4;
  PolicyConfig pc;
  pc.kind = PolicyKind::mlp;
  pc.embed_dim = 4;
  pc.hidden = 8;
  cfg.lr_policy = 0.05;
  auto state = init_state(cfg, pc, env);
  auto groups = collect_rollouts(state, env, cfg);
  auto rows = train_step(state, groups, cfg);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].mean_w == 1.0);
  CHECK(state.optimizer_steps == 4);
  // Later shards see a moved policy.
  CHECK(rows[3].mean_w != 1.0);

  // Per-trajectory check on a single-shard run.
  cfg.micro_batches_per_rollout = 1;
  auto s1 = init_state(cfg, pc, env);
  auto g1 = collect_rollouts(s1, env, cfg);
  grad::Tape tape;
  FlowRLOptions opt;
  for (double w : flowrl_loss(tape, g1, s1.policy, s1.partition, opt).weights) CHECK(w == 1.0);
}

TEST_CASE("train_step: sgd with lr 0 is a null update", "[trainer][step]") {
  auto env = make_env(small_modal(3, 3, false, 2, 3));
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::sgd;
  PolicyConfig pc;
  pc.init_scale = 0.3;
  auto state = init_state(cfg, pc, env);
  // Rates must be positive in a config; a zero-rate optimizer is installed
  // directly.
  state.policy_opt = Optimizer(OptimizerKind::sgd, 0.0);
  state.partition_opt = Optimizer(OptimizerKind::sgd, 0.0);
  const auto before = state.policy.table().value;
  auto groups = collect_rollouts(state, env, cfg);
  const auto a = train_step(state, groups, cfg);
  const auto b = train_step(state, groups, cfg);
  CHECK(state.policy.table().value == before);
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k].loss == b[k].loss);
}

TEST_CASE("train_step: adam decreases flowrl loss on a frozen batch", "[trainer][step]") {
  auto env = make_env(small_modal(3, 4, false, 2, 5));
  TrainConfig cfg;
  cfg.micro_batches_per_rollout = 1;
  cfg.reward_norm = RewardMode::raw;
  PolicyConfig pc;
  auto state = init_state(cfg, pc, env);
  auto groups = collect_rollouts(state, env, cfg);
  cfg.importance_sampling = false;  // fixed-data fit
  const double first = train_step(state, groups, cfg)[0].loss;
  double last = first;
  for (int i = 0; i < 49; ++i) last = train_step(state, groups, cfg)[0].loss;
  CHECK(last < 0.2 * first);
}

TEST_CASE("train_step: non-finite loss aborts with a batch dump", "[trainer][step]") {
  auto env = make_env(small_modal(3, 3, false, 2, 3));
  TrainConfig cfg;
  PolicyConfig pc;
  auto state = init_state(cfg, pc, env);
  auto groups = collect_rollouts(state, env, cfg);
  groups[0].trajectories[0].normalized_reward = std::numeric_limits<double>::infinity();
  try {
    train_step(state, groups, cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("prompt=0 tokens=[") != std::string::npos);
  }
}

TEST_CASE("train_step: every algorithm runs and changes parameters", "[trainer][step]") {
  auto env = make_env(small_modal(3, 3, true, 2, 3));
  for (Algorithm a : {Algorithm::flowrl, Algorithm::grpo, Algorithm::ppo, Algorithm::rpp,
                      Algorithm::tb}) {
    TrainConfig cfg;
    cfg.algorithm = a;
    PolicyConfig pc;
    pc.kind = PolicyKind::mlp;
    pc.embed_dim = 4;
    pc.hidden = 8;
    auto state = init_state(cfg, pc, env);
    const auto before = state.policy.parameters()[1]->value;
    auto rows = train_step(state, collect_rollouts(state, env, cfg), cfg);
    CHECK(rows.size() == 4);
    CHECK(state.policy.parameters()[1]->value != before);
  }
}

TEST_CASE("config validation", "[trainer][config]") {
  TrainConfig cfg;
  cfg.group_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.reward_norm = RewardMode::raw;
  cfg.micro_batches_per_rollout = 1;
  CHECK_NOTHROW(cfg.validate());
  cfg = TrainConfig{};
  cfg.lr_policy = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.epsilon = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(TrainConfig{}.length_normalize());
  cfg = TrainConfig{};
  cfg.reward_norm = RewardMode::raw;
  CHECK_FALSE(cfg.length_normalize());
  cfg.length_norm = LengthNorm::on;
  CHECK(cfg.length_normalize());
}

TEST_CASE("train_loop: zero steps gives the initial evaluation only", "[trainer][loop]") {
  auto env = make_env(small_modal(3, 3, false, 2, 3));
  TrainConfig cfg;
  cfg.steps = 0;
  auto dir = scratch("zero");
  auto res = train_loop(cfg, PolicyConfig{}, EvalConfig{}, env, dir);
  REQUIRE(res.metrics.size() == 1);
  CHECK(res.metrics[0].step == 0);
  CHECK(res.breakdown.empty());
  const auto csv = slurp(dir / "metrics.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
  CHECK(csv.rfind(kMetricsHeader, 0) == 0);
  CHECK(std::filesystem::exists(dir / "checkpoint_final.json"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("train_loop: raw-mode KL is finite at every evaluation", "[trainer][loop]") {
  auto env = make_env(small_modal(3, 4, true, 2, 3));
  TrainConfig cfg;
  cfg.steps = 60;
  cfg.reward_norm = RewardMode::raw;
  EvalConfig ec;
  ec.interval = 10;
  auto res = train_loop(cfg, PolicyConfig{}, ec, env);
  CHECK(res.metrics.size() == 7);
  for (const auto& r : res.metrics) {
    CHECK(std::isfinite(r.kl_to_target));
    CHECK(std::isfinite(r.log_z_error));
  }
  CHECK(res.metrics.back().kl_to_target < res.metrics.front().kl_to_target);
}

TEST_CASE("train_loop: identical config gives identical CSVs", "[trainer][loop]") {
  auto env = make_env(small_modal(3, 3, true, 2, 3));
  TrainConfig cfg;
  cfg.steps = 20;
  cfg.seed = 42;
  EvalConfig ec;
  ec.interval = 5;
  PolicyConfig pc;
  pc.kind = PolicyKind::mlp;
  pc.embed_dim = 4;
  pc.hidden = 8;
  auto a = scratch("det_a");
  auto b = scratch("det_b");
  train_loop(cfg, pc, ec, env, a);
  train_loop(cfg, pc, ec, env, b);
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  CHECK(slurp(a / "breakdown.csv") == slurp(b / "breakdown.csv"));
  CHECK(slurp(a / "checkpoint_final.json") == slurp(b / "checkpoint_final.json"));
  cfg.seed = 43;
  auto c = scratch("det_c");
  train_loop(cfg, pc, ec, env, c);
  CHECK(slurp(a / "metrics.csv") != slurp(c / "metrics.csv"));
  for (const auto& d : {a, b, c}) std::filesystem::remove_all(d);
}

TEST_CASE("train_loop: failure leaves a marker and partial artifacts", "[trainer][loop]") {
  auto env = make_env(small_modal(3, 3, false, 2, 3));
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.beta = 1e308;  // beta * r overflows to inf
  cfg.reward_norm = RewardMode::raw;
  EvalConfig ec;
  ec.enumerate = false;
  ec.samples = 10;
  auto dir = scratch("fail");
  CHECK_THROWS_AS(train_loop(cfg, PolicyConfig{}, ec, env, dir), NumericError);
  CHECK(std::filesystem::exists(dir / "FAILED"));
  CHECK(std::filesystem::exists(dir / "metrics.csv"));
  CHECK(slurp(dir / "FAILED").find("non-finite") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint contents reload", "[trainer][checkpoint]") {
  auto env = make_env(small_modal(3, 3, false, 2, 3));
  TrainConfig cfg;
  cfg.steps = 4;
  cfg.checkpoint_interval = 2;
  auto dir = scratch("ckpt");
  auto res = train_loop(cfg, PolicyConfig{}, EvalConfig{}, env, dir);
  CHECK(std::filesystem::exists(dir / "checkpoint_2.json"));
  CHECK(std::filesystem::exists(dir / "checkpoint_4.json"));
  auto j = nlohmann::json::parse(slurp(dir / "checkpoint_final.json"));
  CHECK(j["phase"] == 4);
  Policy p = policy_from_json(j["policy"]);
  CHECK(p.table().value == res.state.policy.table().value);
  PartitionNet z = partition_from_json(j["partition"]);
  CHECK(z.log_partition(env.prompt(0)) == res.state.partition.log_partition(env.prompt(0)));
  std::filesystem::remove_all(dir);
}
