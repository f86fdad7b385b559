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

#ifndef FLOWRL_POLICY_HPP_
#define FLOWRL_POLICY_HPP_

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowrl/errors.hpp"
#include "flowrl/grad.hpp"
#include "flowrl/rng.hpp"

namespace flowrl {

inline constexpr std::uint64_t kDefaultEnumerationCap = std::uint64_t{1} << 20;

// Finite token space. Regular tokens are 0..vocab_size-1; when `eos` is set
// the end-of-sequence token is appended as id vocab_size. Without eos every
// sequence has length exactly max_len. With eos a sequence ends at eos or at
// max_len, and |y| counts the eos token.
struct TokenSpace {
  int vocab_size = 2;
  bool eos = false;
  int max_len = 3;

  int num_actions() const { return vocab_size + (eos ? 1 : 0); }
  int eos_token() const { return eos ? vocab_size : -1; }
  bool is_eos(int token) const { return eos && token == vocab_size; }

  void validate() const {
    if (vocab_size < 1) throw ContractError("vocab_size must be >= 1");
    if (max_len < 1) throw ContractError("max_len must be >= 1");
  }

  // Number of complete sequences, saturating at UINT64_MAX.
  std::uint64_t count_sequences() const {
    const auto v = static_cast<std::uint64_t>(vocab_size);
    std::uint64_t total = 0;
    std::uint64_t power = 1;  // v^k
    for (int k = 0; k <= max_len; ++k) {
      if (eos || k == max_len) {
        if (total > UINT64_MAX - power) return UINT64_MAX;
        total += power;
      }
      if (k < max_len) {
        if (power > UINT64_MAX / v) return UINT64_MAX;
        power *= v;
      }
    }
    return total;
  }

  // Prefixes at which a decision is made: regular-token strings of length
  // 0..max_len-1.
  std::uint64_t count_prefixes() const {
    std::uint64_t total = 0;
    std::uint64_t power = 1;
    for (int k = 0; k < max_len; ++k) {
      total += power;
      power *= static_cast<std::uint64_t>(vocab_size);
    }
    return total;
  }

  // Throws DomainError on out-of-vocabulary tokens and ContractError when
  // the sequence is not complete.
  void check_complete(std::span<const int> tokens) const {
    if (tokens.empty() || tokens.size() > static_cast<std::size_t>(max_len)) {
      throw ContractError("sequence length " + std::to_string(tokens.size()) +
                          " outside [1, " + std::to_string(max_len) + "]");
    }
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      if (tokens[t] < 0 || tokens[t] >= num_actions()) {
        throw DomainError("token " + std::to_string(tokens[t]) +
                          " outside vocabulary of size " +
                          std::to_string(num_actions()));
      }
      if (is_eos(tokens[t]) && t + 1 != tokens.size()) {
        throw ContractError("eos before the end of the sequence");
      }
    }
    const bool ends_eos = is_eos(tokens.back());
    if (!ends_eos && tokens.size() != static_cast<std::size_t>(max_len)) {
      throw ContractError("incomplete sequence: no eos and length < max_len");
    }
  }

  bool is_complete(std::span<const int> tokens) const {
    try {
      check_complete(tokens);
      return true;
    } catch (const Error&) {
      return false;
    }
  }

  // Visits every complete sequence in canonical order: depth-first, actions
  // in increasing id, eos (the largest id) last at each depth.
  void for_each_sequence(const std::function<void(const std::vector<int>&)>& fn,
                         std::uint64_t cap = kDefaultEnumerationCap) const {
    const auto n = count_sequences();
    if (n > cap) {
      throw EnumerationTooLarge(std::to_string(n) +
                                " sequences exceed enumeration cap " +
                                std::to_string(cap));
    }
    std::vector<int> buf;
    std::function<void()> rec = [&]() {
      for (int a = 0; a < num_actions(); ++a) {
        buf.push_back(a);
        if (is_eos(a) || buf.size() == static_cast<std::size_t>(max_len)) {
          fn(buf);
        } else {
          rec();
        }
        buf.pop_back();
      }
    };
    rec();
  }
};

inline std::string format_sequence(const TokenSpace& space,
                                   std::span<const int> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += space.is_eos(tokens[i]) ? std::string("eos")
                                   : std::to_string(tokens[i]);
  }
  return out;
}

// A conditioning input x. `states` are per-token representation rows; the
// prompt representation is their mean.
struct Prompt {
  int id = 0;
  std::vector<std::vector<double>> states;

  std::size_t dim() const { return states.empty() ? 0 : states.front().size(); }

  std::vector<double> representation() const {
    if (states.empty()) throw ContractError("prompt has no states");
    std::vector<double> mean(dim(), 0.0);
    for (const auto& s : states) {
      if (s.size() != mean.size()) throw ShapeError("ragged prompt states");
      for (std::size_t i = 0; i < s.size(); ++i) mean[i] += s[i];
    }
    for (auto& m : mean) m /= static_cast<double>(states.size());
    return mean;
  }
};

struct Trajectory {
  int prompt_id = 0;
  std::vector<int> tokens;
  // Filled at sampling time by the sampling policy.
  double logp_current = 0.0;
  // Per-token and summed log-probs under the rollout snapshot.
  std::vector<double> token_logp_old;
  std::optional<double> logp_old;
  double logp_ref = 0.0;
  double reward = 0.0;
  double normalized_reward = 0.0;

  std::size_t length() const { return tokens.size(); }
};

enum class PolicyKind { tabular, mlp };

inline const char* to_string(PolicyKind k) {
  return k == PolicyKind::tabular ? "tabular" : "mlp";
}

// Autoregressive categorical policy over a TokenSpace.
//
// tabular: one logit row per (prompt id, prefix).
// mlp: context = sum over the prefix of a learned embedding per
//      (position, token) pair, concatenated with the prompt representation,
//      fed through a 3-layer tanh DenseNet producing num_actions logits.
class Policy {
 public:
  struct Shape {
    PolicyKind kind = PolicyKind::tabular;
    TokenSpace space;
    std::size_t num_prompts = 1;
    std::size_t prompt_dim = 1;
    std::size_t embed_dim = 0;
    std::size_t hidden = 0;
  };

  Policy() = default;

  // Logits drawn from N(0, init_scale^2); init_scale = 0 gives the exact
  // uniform policy.
  static Policy tabular(const TokenSpace& space, std::size_t num_prompts,
                        std::uint64_t seed = 0, double init_scale = 0.0) {
    space.validate();
    Policy p;
    p.shape_.kind = PolicyKind::tabular;
    p.shape_.space = space;
    p.shape_.num_prompts = num_prompts;
    p.seed_ = seed;
    p.init_prefix_offsets();
    const auto rows = num_prompts * space.count_prefixes();
    p.table_ = grad::Parameter(rows, static_cast<std::size_t>(space.num_actions()));
    if (init_scale != 0.0) {
      RngStream rng(seed);
      for (auto& v : p.table_.value) v = init_scale * rng.normal();
    }
    return p;
  }

  static Policy uniform(const TokenSpace& space, std::size_t num_prompts) {
    return tabular(space, num_prompts);
  }

  static Policy mlp(const TokenSpace& space, std::size_t prompt_dim,
                    std::size_t embed_dim, std::size_t hidden,
                    std::uint64_t seed) {
    space.validate();
    if (embed_dim == 0 || hidden == 0 || prompt_dim == 0) {
      throw ContractError("mlp policy dims must be positive");
    }
    Policy p;
    p.shape_.kind = PolicyKind::mlp;
    p.shape_.space = space;
    p.shape_.prompt_dim = prompt_dim;
    p.shape_.embed_dim = embed_dim;
    p.shape_.hidden = hidden;
    p.seed_ = seed;
    p.init_prefix_offsets();
    const auto slots = static_cast<std::size_t>(space.max_len) *
                       static_cast<std::size_t>(space.vocab_size);
    p.embed_ = grad::Parameter(slots, embed_dim);
    RngStream rng(stream_key({seed, 0xE3BEDu}));
    const double a = std::sqrt(6.0 / static_cast<double>(slots + embed_dim));
    for (auto& v : p.embed_.value) v = rng.uniform(-a, a);
    using grad::Activation;
    const std::size_t dims[] = {embed_dim + prompt_dim, hidden, hidden,
                                static_cast<std::size_t>(space.num_actions())};
    const Activation acts[] = {Activation::tanh, Activation::tanh,
                               Activation::identity};
    p.head_ = grad::DenseNet(dims, acts);
    p.head_.init_glorot(stream_key({seed, 0x4EADu}));
    return p;
  }

  const Shape& shape() const { return shape_; }
  PolicyKind kind() const { return shape_.kind; }
  const TokenSpace& space() const { return shape_.space; }
  std::uint64_t seed() const { return seed_; }

  // Deep copy. Later updates to this policy never reach the snapshot.
  Policy snapshot() const { return *this; }

  // Parameter arrays in declaration order (the checkpoint order).
  std::vector<grad::Parameter*> parameters() {
    if (shape_.kind == PolicyKind::tabular) return {&table_};
    std::vector<grad::Parameter*> out{&embed_};
    for (auto* p : head_.parameters()) out.push_back(p);
    return out;
  }

  std::vector<const grad::Parameter*> parameters() const {
    std::vector<const grad::Parameter*> out;
    for (auto* p : const_cast<Policy*>(this)->parameters()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  // log pi(. | prefix, x) over all actions. `prefix` holds regular tokens.
  std::vector<double> next_logprobs(const Prompt& prompt,
                                    std::span<const int> prefix) const {
    std::vector<double> logits;
    if (shape_.kind == PolicyKind::tabular) {
      const std::size_t row = table_row(prompt, prefix);
      const std::size_t a = static_cast<std::size_t>(space().num_actions());
      logits.assign(table_.value.begin() + row * a,
                    table_.value.begin() + (row + 1) * a);
    } else {
      logits = head_.evaluate(mlp_input(prompt, prefix));
    }
    return log_softmax(logits);
  }

  // Taped per-token log-probs of a complete sequence.
  std::vector<grad::Var> token_logprobs(grad::Tape& tape, const Prompt& prompt,
                                        std::span<const int> tokens) {
    space().check_complete(tokens);
    std::vector<grad::Var> out;
    out.reserve(tokens.size());
    if (shape_.kind == PolicyKind::tabular) {
      const std::size_t a = static_cast<std::size_t>(space().num_actions());
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        const std::size_t row = table_row(prompt, tokens.first(t));
        grad::Var logits = tape.parameter_slice(table_, row * a, a);
        out.push_back(grad::pick(grad::log_softmax(logits),
                                 static_cast<std::size_t>(tokens[t])));
      }
      return out;
    }
    check_prompt_dim(prompt);
    grad::Var prompt_rep = tape.constant(prompt.representation());
    grad::Var context = tape.constant(std::vector<double>(shape_.embed_dim, 0.0));
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      if (t > 0) {
        context = grad::add(context, tape.parameter_slice(
                                         embed_, embed_slot(t - 1, tokens[t - 1]) *
                                                     shape_.embed_dim,
                                         shape_.embed_dim));
      }
      grad::Var logits = head_.forward(tape, grad::concat(context, prompt_rep));
      out.push_back(grad::pick(grad::log_softmax(logits),
                               static_cast<std::size_t>(tokens[t])));
    }
    return out;
  }

  // Taped sum of token_logprobs.
  grad::Var logprob_var(grad::Tape& tape, const Prompt& prompt,
                        std::span<const int> tokens) {
    auto per_token = token_logprobs(tape, prompt, tokens);
    return grad::sum(grad::stack(per_token));
  }

  // Mutable access for serialization and tests.
  grad::Parameter& table() { return table_; }
  grad::Parameter& embedding() { return embed_; }
  grad::DenseNet& head() { return head_; }

  // Row of the tabular logit table used at `prefix` for `prompt`.
  std::size_t table_row(const Prompt& prompt, std::span<const int> prefix) const {
    if (prompt.id < 0 || static_cast<std::size_t>(prompt.id) >= shape_.num_prompts) {
      throw DomainError("prompt id " + std::to_string(prompt.id) +
                        " outside tabular policy range");
    }
    if (prefix.size() >= static_cast<std::size_t>(space().max_len)) {
      throw ContractError("prefix too long");
    }
    std::uint64_t code = 0;
    for (int tok : prefix) {
      if (tok < 0 || tok >= space().vocab_size) {
        throw DomainError("prefix token " + std::to_string(tok) +
                          " is not a regular token");
      }
      code = code * static_cast<std::uint64_t>(space().vocab_size) +
             static_cast<std::uint64_t>(tok);
    }
    const std::uint64_t per_prompt = prefix_offset_.back();
    return static_cast<std::size_t>(static_cast<std::uint64_t>(prompt.id) * per_prompt +
                                    prefix_offset_[prefix.size()] + code);
  }

  static std::vector<double> log_softmax(std::span<const double> logits) {
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - m);
    const double lse = m + std::log(z);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
  }

 private:
  void init_prefix_offsets() {
    prefix_offset_.assign(static_cast<std::size_t>(shape_.space.max_len) + 1, 0);
    std::uint64_t power = 1;
    for (int k = 0; k < shape_.space.max_len; ++k) {
      prefix_offset_[static_cast<std::size_t>(k) + 1] =
          prefix_offset_[static_cast<std::size_t>(k)] + power;
      power *= static_cast<std::uint64_t>(shape_.space.vocab_size);
    }
  }

  std::size_t embed_slot(std::size_t position, int token) const {
    if (token < 0 || token >= space().vocab_size) {
      throw DomainError("token " + std::to_string(token) +
                        " is not a regular token");
    }
    return position * static_cast<std::size_t>(space().vocab_size) +
           static_cast<std::size_t>(token);
  }

  void check_prompt_dim(const Prompt& prompt) const {
    if (prompt.dim() != shape_.prompt_dim) {
      throw ShapeError("prompt dim " + std::to_string(prompt.dim()) +
                       " does not match policy prompt dim " +
                       std::to_string(shape_.prompt_dim));
    }
  }

  std::vector<double> mlp_input(const Prompt& prompt,
                                std::span<const int> prefix) const {
    check_prompt_dim(prompt);
    if (prefix.size() >= static_cast<std::size_t>(space().max_len)) {
      throw ContractError("prefix too long");
    }
    std::vector<double> in(shape_.embed_dim, 0.0);
    for (std::size_t t = 0; t < prefix.size(); ++t) {
      const double* row = embed_.value.data() + embed_slot(t, prefix[t]) * shape_.embed_dim;
      for (std::size_t e = 0; e < shape_.embed_dim; ++e) in[e] += row[e];
    }
    auto rep = prompt.representation();
    in.insert(in.end(), rep.begin(), rep.end());
    return in;
  }

  Shape shape_;
  std::uint64_t seed_ = 0;
  std::vector<std::uint64_t> prefix_offset_;
  grad::Parameter table_;
  grad::Parameter embed_;
  grad::DenseNet head_;
};

// Untaped log pi(tokens | x), summed over tokens, in nats.
inline double logprob(const Policy& policy, const Prompt& prompt,
                      std::span<const int> tokens) {
  policy.space().check_complete(tokens);
  double total = 0.0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    total += policy.next_logprobs(prompt, tokens.first(t))[
        static_cast<std::size_t>(tokens[t])];
  }
  return total;
}

inline std::vector<double> token_logprobs(const Policy& policy,
                                          const Prompt& prompt,
                                          std::span<const int> tokens) {
  policy.space().check_complete(tokens);
  std::vector<double> out(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    out[t] = policy.next_logprobs(prompt, tokens.first(t))[
        static_cast<std::size_t>(tokens[t])];
  }
  return out;
}

// Draws tokens until eos or max_len. Only tokens and logp_current are filled.
inline Trajectory sample_trajectory(const Policy& policy, const Prompt& prompt,
                                    RngStream& rng) {
  const TokenSpace& space = policy.space();
  Trajectory traj;
  traj.prompt_id = prompt.id;
  while (true) {
    const auto lp = policy.next_logprobs(prompt, traj.tokens);
    const double u = rng.uniform();
    double cdf = 0.0;
    int choice = static_cast<int>(lp.size()) - 1;
    for (std::size_t a = 0; a < lp.size(); ++a) {
      cdf += std::exp(lp[a]);
      if (u < cdf) {
        choice = static_cast<int>(a);
        break;
      }
    }
    // Round-off can leave cdf slightly below 1; never fall onto a
    // zero-probability action.
    while (choice > 0 && std::exp(lp[static_cast<std::size_t>(choice)]) == 0.0) --choice;
    traj.tokens.push_back(choice);
    traj.logp_current += lp[static_cast<std::size_t>(choice)];
    if (space.is_eos(choice) ||
        traj.tokens.size() == static_cast<std::size_t>(space.max_len)) {
      break;
    }
  }
  return traj;
}

struct SupportEntry {
  std::vector<int> tokens;
  double logp = 0.0;
  double prob = 0.0;
};

// Every complete sequence with its probability, in canonical order (see
// TokenSpace::for_each_sequence).
inline std::vector<SupportEntry> enumerate_support(
    const Policy& policy, const Prompt& prompt,
    std::uint64_t cap = kDefaultEnumerationCap) {
  const TokenSpace& space = policy.space();
  const auto n = space.count_sequences();
  if (n > cap) {
    throw EnumerationTooLarge(std::to_string(n) +
                              " sequences exceed enumeration cap " +
                              std::to_string(cap));
  }
  std::vector<SupportEntry> out;
  out.reserve(static_cast<std::size_t>(n));
  std::vector<int> buf;
  std::function<void(double)> rec = [&](double prefix_logp) {
    const auto lp = policy.next_logprobs(prompt, buf);
    for (int a = 0; a < space.num_actions(); ++a) {
      buf.push_back(a);
      const double l = prefix_logp + lp[static_cast<std::size_t>(a)];
      if (space.is_eos(a) || buf.size() == static_cast<std::size_t>(space.max_len)) {
        out.push_back(SupportEntry{buf, l, std::exp(l)});
      } else {
        rec(l);
      }
      buf.pop_back();
    }
  };
  rec(0.0);
  return out;
}

}  // namespace flowrl

#endif  // FLOWRL_POLICY_HPP_
