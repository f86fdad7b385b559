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

// Exact diagnostics over enumerable token spaces: reward-induced target
// distributions, KL / entropy, mode coverage, and numerical checks of the
// KL <-> trajectory-balance gradient identity and the KL = -(reward +
// prior - normalizer) - entropy decomposition.

#ifndef FLOWRL_METRICS_HPP_
#define FLOWRL_METRICS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "flowrl/envs.hpp"
#include "flowrl/errors.hpp"
#include "flowrl/grad.hpp"
#include "flowrl/objectives.hpp"
#include "flowrl/policy.hpp"
#include "flowrl/rng.hpp"

namespace flowrl {

// Distribution over the complete sequences of one prompt, in canonical
// enumeration order. `log_probs` is kept alongside `probs` so that KL terms
// stay exact where probabilities underflow.
struct DistributionTable {
  std::vector<std::vector<int>> sequences;
  std::vector<double> probs;
  std::vector<double> log_probs;

  std::size_t size() const { return probs.size(); }
  double total_mass() const {
    double s = 0.0;
    for (double p : probs) s += p;
    return s;
  }
};

inline double log_sum_exp(const std::vector<double>& x) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

inline DistributionTable from_log_weights(std::vector<std::vector<int>> seqs,
                                          const std::vector<double>& log_w,
                                          double* log_norm = nullptr) {
  const double lse = log_sum_exp(log_w);
  DistributionTable t;
  t.sequences = std::move(seqs);
  t.log_probs.resize(log_w.size());
  t.probs.resize(log_w.size());
  for (std::size_t i = 0; i < log_w.size(); ++i) {
    t.log_probs[i] = log_w[i] - lse;
    t.probs[i] = std::exp(t.log_probs[i]);
  }
  if (log_norm) *log_norm = lse;
  return t;
}

inline DistributionTable policy_distribution(const Policy& policy, const Prompt& prompt,
                                             std::uint64_t cap = kDefaultEnumerationCap) {
  DistributionTable t;
  for (auto& e : enumerate_support(policy, prompt, cap)) {
    t.sequences.push_back(std::move(e.tokens));
    t.probs.push_back(e.prob);
    t.log_probs.push_back(e.logp);
  }
  return t;
}

struct TargetDistribution {
  DistributionTable table;
  // ln sum_y pi_ref(y|x) exp(beta r(x, y))
  double log_partition = 0.0;
};

// p*(y) proportional to pi_ref(y|x) * exp(beta * r(x, y)).
inline TargetDistribution target_distribution(const Environment& env, int prompt_id,
                                              double beta, const Policy& ref_policy,
                                              std::uint64_t cap = kDefaultEnumerationCap) {
  const auto support = enumerate_support(ref_policy, env.prompt(prompt_id), cap);
  std::vector<std::vector<int>> seqs;
  std::vector<double> log_w;
  for (const auto& e : support) {
    log_w.push_back(e.logp + beta * env.reward(prompt_id, e.tokens));
    seqs.push_back(e.tokens);
  }
  TargetDistribution out;
  out.table = from_log_weights(std::move(seqs), log_w, &out.log_partition);
  return out;
}

namespace detail {

inline double table_log_prob(const DistributionTable& t, std::size_t i) {
  if (!t.log_probs.empty()) return t.log_probs[i];
  return t.probs[i] > 0.0 ? std::log(t.probs[i]) : -std::numeric_limits<double>::infinity();
}

}  // namespace detail

// sum p * ln(p / q), with 0 ln 0 = 0. Throws DomainError if q = 0 where p > 0
// or the tables disagree in size.
inline double kl_divergence(const DistributionTable& p, const DistributionTable& q) {
  if (p.size() != q.size()) {
    throw DomainError("kl_divergence: supports differ in size (" +
                      std::to_string(p.size()) + " vs " + std::to_string(q.size()) + ")");
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.probs[i] <= 0.0) continue;
    const double lq = detail::table_log_prob(q, i);
    if (!std::isfinite(lq) || q.probs[i] < 0.0) {
      throw DomainError("kl_divergence: q has no mass where p does (index " +
                        std::to_string(i) + ")");
    }
    kl += p.probs[i] * (detail::table_log_prob(p, i) - lq);
  }
  return kl;
}

inline double entropy(const DistributionTable& p) {
  double h = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.probs[i] > 0.0) h -= p.probs[i] * detail::table_log_prob(p, i);
  }
  return h;
}

struct CoverageReport {
  int count = 0;
  std::vector<double> per_mode_mass;
  double threshold = 0.0;
};

// A mode is covered when the mass inside its radius ball reaches the
// threshold. threshold <= 0 selects the default 1/(4K).
inline CoverageReport mode_coverage(const DistributionTable& dist, const Environment& env,
                                    int prompt_id, double mass_threshold = 0.0) {
  const auto& modes = env.modes(prompt_id);
  CoverageReport rep;
  rep.threshold = mass_threshold > 0.0 ? mass_threshold
                                       : 1.0 / (4.0 * static_cast<double>(modes.size()));
  rep.per_mode_mass.assign(modes.size(), 0.0);
  for (std::size_t i = 0; i < dist.size(); ++i) {
    for (std::size_t k = 0; k < modes.size(); ++k) {
      if (env.in_mode(modes[k], dist.sequences[i])) rep.per_mode_mass[k] += dist.probs[i];
    }
  }
  for (double m : rep.per_mode_mass) rep.count += m >= rep.threshold ? 1 : 0;
  return rep;
}

// ---------------------------------------------------------------------------
// Gradient identity: E_pi[2 * residual * grad log pi] = 2 * grad KL(pi || exp(beta r)/Z).

struct Prop1Options {
  double factor = 2.0;  // the constant relating the two gradients
  double tolerance = 1e-4;
  double step = 1e-6;
  std::uint64_t cap = kDefaultEnumerationCap;
};

struct Prop1Report {
  std::vector<double> grad_tb;
  std::vector<double> grad_kl;
  double norm_tb = 0.0;
  double norm_kl = 0.0;
  double relative_discrepancy = 0.0;
  bool passed = false;
};

namespace detail {

inline std::vector<double> flatten_grads(Policy& policy) {
  std::vector<double> g;
  for (auto* p : policy.parameters()) g.insert(g.end(), p->grad.begin(), p->grad.end());
  return g;
}

inline double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

// (a) exact expected trajectory-balance gradient by enumeration, with the
// sampling distribution held fixed; (b) gradient of the enumerated reverse
// KL by central finite differences, log Z held fixed. Passes when
// ||a - factor*b|| / max(||a||, 1e-12) < tolerance, or when both gradients
// vanish (norms below 1e-8).
inline Prop1Report prop1_check(Policy& policy, double log_z, const Environment& env,
                               int prompt_id, double beta, const Prop1Options& opt = {}) {
  const Prompt& prompt = env.prompt(prompt_id);
  const auto table = enumerate_rewards(env, prompt_id, opt.cap);

  policy.zero_grad();
  {
    grad::Tape tape;
    std::vector<grad::Var> terms;
    for (std::size_t i = 0; i < table.sequences.size(); ++i) {
      const double lp = logprob(policy, prompt, table.sequences[i]);
      const double coeff = std::exp(lp) * 2.0 * (log_z + lp - beta * table.rewards[i]);
      terms.push_back(grad::scale(policy.logprob_var(tape, prompt, table.sequences[i]), coeff));
    }
    tape.backward(grad::sum(grad::stack(terms)));
  }
  Prop1Report rep;
  rep.grad_tb = detail::flatten_grads(policy);
  policy.zero_grad();

  auto kl = [&]() {
    double s = 0.0;
    for (const auto& e : enumerate_support(policy, prompt, opt.cap)) {
      s += e.prob * (e.logp + log_z - beta * env.reward(prompt_id, e.tokens));
    }
    return s;
  };
  for (auto* p : policy.parameters()) {
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + opt.step;
      const double up = kl();
      p->value[i] = saved - opt.step;
      const double down = kl();
      p->value[i] = saved;
      rep.grad_kl.push_back((up - down) / (2.0 * opt.step));
    }
  }

  std::vector<double> diff(rep.grad_tb.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = rep.grad_tb[i] - opt.factor * rep.grad_kl[i];
  rep.norm_tb = detail::norm2(rep.grad_tb);
  rep.norm_kl = detail::norm2(rep.grad_kl);
  rep.relative_discrepancy = detail::norm2(diff) / std::max(rep.norm_tb, 1e-12);
  rep.passed = rep.relative_discrepancy < opt.tolerance ||
               (rep.norm_tb < 1e-8 && rep.norm_kl < 1e-8);
  return rep;
}

// ---------------------------------------------------------------------------
// Decomposition: KL(pi || exp(beta r) pi_ref / Z) = -E_pi[beta r - log Z + log pi_ref] - H(pi).

struct Prop2Report {
  double lhs = 0.0;                // sum_y pi ln(pi Z / (exp(beta r) pi_ref))
  double expected_beta_r = 0.0;    // E_pi[beta r]
  double log_z = 0.0;
  double expected_ref_logp = 0.0;  // E_pi[log pi_ref]
  double entropy = 0.0;            // H(pi)
  double rhs = 0.0;
  double abs_error = 0.0;
  bool passed = false;

  double rhs_from_terms() const {
    return -(expected_beta_r - log_z + expected_ref_logp) - entropy;
  }
};

inline Prop2Report prop2_check(const Policy& policy, double log_z, const Policy& ref_policy,
                               const Environment& env, int prompt_id, double beta,
                               double tolerance = 1e-8,
                               std::uint64_t cap = kDefaultEnumerationCap) {
  const Prompt& prompt = env.prompt(prompt_id);
  const auto pi = enumerate_support(policy, prompt, cap);
  const auto ref = enumerate_support(ref_policy, prompt, cap);
  Prop2Report rep;
  rep.log_z = log_z;
  for (std::size_t i = 0; i < pi.size(); ++i) {
    if (pi[i].prob <= 0.0) continue;
    const double br = beta * env.reward(prompt_id, pi[i].tokens);
    rep.lhs += pi[i].prob * (pi[i].logp + log_z - br - ref[i].logp);
    rep.expected_beta_r += pi[i].prob * br;
    rep.expected_ref_logp += pi[i].prob * ref[i].logp;
    rep.entropy -= pi[i].prob * pi[i].logp;
  }
  rep.rhs = rep.rhs_from_terms();
  rep.abs_error = std::abs(rep.lhs - rep.rhs);
  rep.passed = rep.abs_error < tolerance;
  return rep;
}

// ---------------------------------------------------------------------------
// Per-checkpoint evaluation row (metrics.csv).

struct EvalRow {
  std::int64_t step = 0;
  double kl_to_target = 0.0;
  double entropy = 0.0;
  double mode_coverage = 0.0;
  double log_z_error = std::numeric_limits<double>::quiet_NaN();
  double mean_reward = 0.0;
};

struct EvalOptions {
  double beta = 15.0;
  bool enumerate = true;
  std::size_t samples = 20000;
  double mass_threshold = 0.0;  // <= 0: 1/(4K)
  bool report_log_z_error = true;
  std::uint64_t seed = 0;
  std::uint64_t cap = kDefaultEnumerationCap;
};

// Averages over all prompts. Exact when the space is enumerable and
// `enumerate` is set; otherwise estimates from `samples` draws (KL via a
// self-normalized estimate of the log-partition).
inline EvalRow evaluate(const Policy& policy, const PartitionNet& partition,
                        const Policy& ref_policy, const Environment& env,
                        const EvalOptions& opt, std::int64_t step) {
  EvalRow row;
  row.step = step;
  const double np = static_cast<double>(env.prompts().size());
  const bool exact = opt.enumerate && env.space().count_sequences() <= opt.cap;
  double log_z_err = 0.0;
  for (const auto& prompt : env.prompts()) {
    const int pid = prompt.id;
    if (exact) {
      const auto dist = policy_distribution(policy, prompt, opt.cap);
      const auto target = target_distribution(env, pid, opt.beta, ref_policy, opt.cap);
      row.kl_to_target += kl_divergence(dist, target.table) / np;
      row.entropy += entropy(dist) / np;
      row.mode_coverage += mode_coverage(dist, env, pid, opt.mass_threshold).count / np;
      double r = 0.0;
      for (std::size_t i = 0; i < dist.size(); ++i) r += dist.probs[i] * env.reward(pid, dist.sequences[i]);
      row.mean_reward += r / np;
      log_z_err += std::abs(partition.log_partition(prompt) - target.log_partition) / np;
      continue;
    }
    RngStream rng(stream_key({opt.seed, static_cast<std::uint64_t>(step),
                              static_cast<std::uint64_t>(pid), 0xE7A1u}));
    const auto& modes = env.modes(pid);
    std::vector<double> mass(modes.size(), 0.0);
    std::vector<double> log_w;
    double h = 0.0;
    double r = 0.0;
    double cross = 0.0;  // E_pi[log pi - log pi_ref - beta r]
    const double n = static_cast<double>(opt.samples);
    for (std::size_t s = 0; s < opt.samples; ++s) {
      const auto traj = sample_trajectory(policy, prompt, rng);
      const double reward = env.reward(pid, traj.tokens);
      const double lref = logprob(ref_policy, prompt, traj.tokens);
      h -= traj.logp_current / n;
      r += reward / n;
      cross += (traj.logp_current - lref - opt.beta * reward) / n;
      log_w.push_back(lref + opt.beta * reward - traj.logp_current);
      for (std::size_t k = 0; k < modes.size(); ++k) {
        if (env.in_mode(modes[k], traj.tokens)) mass[k] += 1.0 / n;
      }
    }
    const double log_z_hat = log_sum_exp(log_w) - std::log(n);
    const double thr = opt.mass_threshold > 0.0 ? opt.mass_threshold
                                                : 1.0 / (4.0 * static_cast<double>(modes.size()));
    int covered = 0;
    for (double m : mass) covered += m >= thr ? 1 : 0;
    row.kl_to_target += (cross + log_z_hat) / np;
    row.entropy += h / np;
    row.mode_coverage += covered / np;
    row.mean_reward += r / np;
    log_z_err += std::abs(partition.log_partition(prompt) - log_z_hat) / np;
  }
  if (opt.report_log_z_error) row.log_z_error = log_z_err;
  return row;
}

}  // namespace flowrl

#endif  // FLOWRL_METRICS_HPP_
