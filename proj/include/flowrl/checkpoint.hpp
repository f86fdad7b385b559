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

// Policy checkpoints.
//
// JSON form:
//   {"format": "flowrl-policy", "version": 1, "kind": "tabular"|"mlp",
//    "vocab_size": V, "eos": bool, "max_len": L, "num_prompts": P,
//    "prompt_dim": D, "embed_dim": E, "hidden": H, "seed": S,
//    "parameters": [{"rows": r, "cols": c, "values": [...]}, ...]}
//
// Binary form (all integers and doubles little-endian):
//   magic "FLRLPOL1" (8 bytes)
//   u32 kind (0 tabular, 1 mlp), u32 vocab_size, u32 eos, u32 max_len,
//   u32 num_prompts, u32 prompt_dim, u32 embed_dim, u32 hidden, u64 seed,
//   u32 array count, then per array: u64 rows, u64 cols, rows*cols f64.
//
// Parameter arrays appear in Policy::parameters() order.

#ifndef FLOWRL_CHECKPOINT_HPP_
#define FLOWRL_CHECKPOINT_HPP_

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include <json.hpp>

#include "flowrl/errors.hpp"
#include "flowrl/objectives.hpp"
#include "flowrl/policy.hpp"

namespace flowrl {

namespace detail {

inline Policy blank_policy(PolicyKind kind, const TokenSpace& space, std::size_t num_prompts,
                           std::size_t prompt_dim, std::size_t embed_dim, std::size_t hidden,
                           std::uint64_t seed) {
  return kind == PolicyKind::tabular ? Policy::tabular(space, num_prompts, seed)
                                     : Policy::mlp(space, prompt_dim, embed_dim, hidden, seed);
}

inline void assign_values(grad::Parameter& p, std::size_t rows, std::size_t cols,
                          std::vector<double> values) {
  if (rows != p.rows || cols != p.cols || values.size() != p.size()) {
    throw ShapeError("checkpoint parameter shape mismatch");
  }
  p.value = std::move(values);
  p.zero_grad();
}

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little,
                "binary checkpoints assume a little-endian host");
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw Error("truncated binary checkpoint");
  return v;
}

inline constexpr char kPolicyMagic[8] = {'F', 'L', 'R', 'L', 'P', 'O', 'L', '1'};

}  // namespace detail

inline nlohmann::json policy_to_json(const Policy& policy) {
  const auto& s = policy.shape();
  nlohmann::json j;
  j["format"] = "flowrl-policy";
  j["version"] = 1;
  j["kind"] = to_string(s.kind);
  j["vocab_size"] = s.space.vocab_size;
  j["eos"] = s.space.eos;
  j["max_len"] = s.space.max_len;
  j["num_prompts"] = s.num_prompts;
  j["prompt_dim"] = s.prompt_dim;
  j["embed_dim"] = s.embed_dim;
  j["hidden"] = s.hidden;
  j["seed"] = policy.seed();
  auto arr = nlohmann::json::array();
  for (const auto* p : policy.parameters()) {
    arr.push_back({{"rows", p->rows}, {"cols", p->cols}, {"values", p->value}});
  }
  j["parameters"] = std::move(arr);
  return j;
}

inline Policy policy_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "flowrl-policy") throw Error("not a flowrl policy checkpoint");
  const std::string kind = j.at("kind");
  if (kind != "tabular" && kind != "mlp") throw Error("unknown policy kind " + kind);
  TokenSpace space{j.at("vocab_size").get<int>(), j.at("eos").get<bool>(),
                   j.at("max_len").get<int>()};
  Policy p = detail::blank_policy(kind == "tabular" ? PolicyKind::tabular : PolicyKind::mlp,
                                  space, j.at("num_prompts"), j.at("prompt_dim"),
                                  j.at("embed_dim"), j.at("hidden"), j.at("seed"));
  auto params = p.parameters();
  const auto& arr = j.at("parameters");
  if (arr.size() != params.size()) throw ShapeError("checkpoint parameter count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    detail::assign_values(*params[k], arr[k].at("rows"), arr[k].at("cols"),
                          arr[k].at("values").get<std::vector<double>>());
  }
  return p;
}

inline void write_policy_binary(std::ostream& os, const Policy& policy) {
  using detail::put_le;
  const auto& s = policy.shape();
  os.write(detail::kPolicyMagic, 8);
  put_le<std::uint32_t>(os, s.kind == PolicyKind::tabular ? 0u : 1u);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.space.vocab_size));
  put_le<std::uint32_t>(os, s.space.eos ? 1u : 0u);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.space.max_len));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.num_prompts));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.prompt_dim));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.embed_dim));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.hidden));
  put_le<std::uint64_t>(os, policy.seed());
  const auto params = policy.parameters();
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    put_le<std::uint64_t>(os, p->rows);
    put_le<std::uint64_t>(os, p->cols);
    for (double v : p->value) put_le<double>(os, v);
  }
}

inline Policy read_policy_binary(std::istream& is) {
  using detail::get_le;
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kPolicyMagic, 8) != 0) {
    throw Error("not a binary flowrl policy checkpoint");
  }
  const auto kind = get_le<std::uint32_t>(is);
  TokenSpace space;
  space.vocab_size = static_cast<int>(get_le<std::uint32_t>(is));
  space.eos = get_le<std::uint32_t>(is) != 0;
  space.max_len = static_cast<int>(get_le<std::uint32_t>(is));
  const auto num_prompts = get_le<std::uint32_t>(is);
  const auto prompt_dim = get_le<std::uint32_t>(is);
  const auto embed_dim = get_le<std::uint32_t>(is);
  const auto hidden = get_le<std::uint32_t>(is);
  const auto seed = get_le<std::uint64_t>(is);
  Policy p = detail::blank_policy(kind == 0 ? PolicyKind::tabular : PolicyKind::mlp, space,
                                  num_prompts, prompt_dim, embed_dim, hidden, seed);
  auto params = p.parameters();
  if (get_le<std::uint32_t>(is) != params.size()) {
    throw ShapeError("checkpoint parameter count mismatch");
  }
  for (auto* param : params) {
    const auto rows = get_le<std::uint64_t>(is);
    const auto cols = get_le<std::uint64_t>(is);
    std::vector<double> values(static_cast<std::size_t>(rows * cols));
    for (auto& v : values) v = get_le<double>(is);
    detail::assign_values(*param, rows, cols, std::move(values));
  }
  return p;
}

inline nlohmann::json partition_to_json(const PartitionNet& net) {
  nlohmann::json j;
  j["format"] = "flowrl-partition";
  auto arr = nlohmann::json::array();
  for (const auto& l : net.net().layers()) {
    arr.push_back({{"in", l.weight.cols},
                   {"out", l.weight.rows},
                   {"activation", grad::to_string(l.activation)},
                   {"weight", l.weight.value},
                   {"bias", l.bias.value}});
  }
  j["layers"] = std::move(arr);
  return j;
}

inline PartitionNet partition_from_json(const nlohmann::json& j) {
  const auto& layers = j.at("layers");
  if (layers.size() != 3) throw ShapeError("partition net must have 3 layers");
  PartitionNet net(layers[0].at("in"), layers[0].at("out"), 0);
  auto& ls = net.net().layers();
  for (std::size_t k = 0; k < 3; ++k) {
    detail::assign_values(ls[k].weight, layers[k].at("out"), layers[k].at("in"),
                          layers[k].at("weight").get<std::vector<double>>());
    detail::assign_values(ls[k].bias, layers[k].at("out"), 1,
                          layers[k].at("bias").get<std::vector<double>>());
  }
  return net;
}

}  // namespace flowrl

#endif  // FLOWRL_CHECKPOINT_HPP_
