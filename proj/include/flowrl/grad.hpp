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

// Reverse-mode differentiation over small dense vectors.
//
// A Tape records every operation as a node holding its value, its adjoint
// and a pullback closure. Nodes are appended in evaluation order, so the
// tape is already topologically sorted and backward() is a single reverse
// sweep. Parameters live outside the tape; leaf nodes created from them
// add their adjoints into Parameter::grad when backward() finishes.

#ifndef FLOWRL_GRAD_HPP_
#define FLOWRL_GRAD_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flowrl/errors.hpp"
#include "flowrl/rng.hpp"

namespace flowrl::grad {

// Learnable array with an adjoint of the same shape. Row-major when used as a
// matrix.
struct Parameter {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;

  Parameter() = default;
  Parameter(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), value(r * c, fill), grad(r * c, 0.0) {}

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

class Tape;

// Handle to a tape node. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  std::uint32_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  const std::vector<double>& value() const;
  double scalar() const;
  std::size_t size() const { return value().size(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  using Pullback = std::function<void(Tape&, std::uint32_t self)>;

  struct Node {
    std::vector<double> value;
    std::vector<double> adjoint;
    Pullback pullback;  // empty for leaves
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(std::vector<double> v) { return push(std::move(v), {}); }
  Var constant(double v) { return push({v}, {}); }

  // Leaf bound to the whole parameter array.
  Var parameter(Parameter& p) { return parameter_slice(p, 0, p.size()); }

  // Leaf bound to value[offset, offset + len). Adjoints flow back into the
  // matching slice of p.grad.
  Var parameter_slice(Parameter& p, std::size_t offset, std::size_t len) {
    if (offset + len > p.size()) {
      throw ShapeError("parameter slice out of range");
    }
    std::vector<double> v(p.value.begin() + offset,
                          p.value.begin() + offset + len);
    Var out = push(std::move(v), {});
    bindings_.push_back({out.id(), &p, offset});
    return out;
  }

  // Appends a node. `pullback` reads this node's adjoint and adds into the
  // adjoints of its inputs via add_adjoint().
  Var push(std::vector<double> value, Pullback pullback) {
    nodes_.push_back(Node{std::move(value), {}, std::move(pullback)});
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  const Node& node(std::uint32_t id) const { return nodes_[id]; }
  const std::vector<double>& value(Var v) const { return nodes_[v.id()].value; }
  const std::vector<double>& adjoint(std::uint32_t id) const {
    return nodes_[id].adjoint;
  }

  void add_adjoint(Var v, std::size_t i, double g) {
    auto& n = nodes_[v.id()];
    if (n.adjoint.empty()) n.adjoint.assign(n.value.size(), 0.0);
    n.adjoint[i] += g;
  }

  std::size_t size() const { return nodes_.size(); }

  // Accumulates d(loss)/d(parameter) into every bound Parameter::grad.
  // Adjoints from any previous backward() on this tape are cleared first,
  // so two calls on independent losses add their gradients.
  void backward(Var loss) {
    if (loss.tape() != this) throw ContractError("backward: foreign variable");
    if (value(loss).size() != 1) {
      throw ContractError("backward: loss must be a scalar node, got size " +
                          std::to_string(value(loss).size()));
    }
    for (auto& n : nodes_) n.adjoint.clear();
    nodes_[loss.id()].adjoint = {1.0};
    for (std::int64_t i = loss.id(); i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.adjoint.empty() || !n.pullback) continue;
      n.pullback(*this, static_cast<std::uint32_t>(i));
    }
    for (const auto& b : bindings_) {
      if (b.node > loss.id()) continue;
      const auto& adj = nodes_[b.node].adjoint;
      if (adj.empty()) continue;
      for (std::size_t k = 0; k < adj.size(); ++k) {
        b.param->grad[b.offset + k] += adj[k];
      }
    }
  }

 private:
  struct Binding {
    std::uint32_t node;
    Parameter* param;
    std::size_t offset;
  };
  std::vector<Node> nodes_;
  std::vector<Binding> bindings_;
};

inline const std::vector<double>& Var::value() const {
  return tape_->value(*this);
}

inline double Var::scalar() const {
  const auto& v = value();
  if (v.size() != 1) throw ShapeError("scalar(): node is not a scalar");
  return v[0];
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops.

namespace detail {

inline void require_same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw ContractError("variables on different tapes");
}

inline void require_same_size(Var a, Var b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": size mismatch " +
                     std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
}

// Builds a unary elementwise op from f and f' expressed through (x, y).
template <typename F, typename DF>
Var unary(Var a, F f, DF df) {
  Tape& t = *a.tape();
  std::vector<double> out(a.size());
  const auto& x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return t.push(std::move(out), [a, df](Tape& tp, std::uint32_t self) {
    const auto& g = tp.adjoint(self);
    const auto& x = tp.value(a);
    const auto& y = tp.node(self).value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      tp.add_adjoint(a, i, g[i] * df(x[i], y[i]));
    }
  });
}

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b);
  Tape& t = *a.tape();
  // Scalar broadcast on either side.
  if (a.size() == 1 && b.size() != 1) std::swap(a, b);
  if (b.size() == 1 && a.size() != 1) {
    std::vector<double> out = a.value();
    for (auto& v : out) v += b.scalar();
    return t.push(std::move(out), [a, b](Tape& tp, std::uint32_t self) {
      const auto& g = tp.adjoint(self);
      double s = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        tp.add_adjoint(a, i, g[i]);
        s += g[i];
      }
      tp.add_adjoint(b, 0, s);
    });
  }
  detail::require_same_size(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.value()[i] + b.value()[i];
  }
  return t.push(std::move(out), [a, b](Tape& tp, std::uint32_t self) {
    const auto& g = tp.adjoint(self);
    for (std::size_t i = 0; i < g.size(); ++i) {
      tp.add_adjoint(a, i, g[i]);
      tp.add_adjoint(b, i, g[i]);
    }
  });
}

inline Var scale(Var a, double c) {
  return detail::unary(
      a, [c](double x) { return c * x; },
      [c](double, double) { return c; });
}

inline Var add_scalar(Var a, double c) {
  return detail::unary(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var sub(Var a, Var b) { return add(a, neg(b)); }

inline Var mul(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_same_size(a, b, "mul");
  Tape& t = *a.tape();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.value()[i] * b.value()[i];
  }
  return t.push(std::move(out), [a, b](Tape& tp, std::uint32_t self) {
    const auto& g = tp.adjoint(self);
    const auto& x = tp.value(a);
    const auto& y = tp.value(b);
    for (std::size_t i = 0; i < g.size(); ++i) {
      tp.add_adjoint(a, i, g[i] * y[i]);
      tp.add_adjoint(b, i, g[i] * x[i]);
    }
  });
}

inline Var square(Var a) {
  return detail::unary(
      a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

inline Var exp(Var a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Var log(Var a) {
  return detail::unary(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Var tanh(Var a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Var a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// Gradient passes only where lo < x < hi.
inline Var clamp(Var a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// Elementwise minimum; ties route the gradient to `a`.
inline Var minimum(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_same_size(a, b, "minimum");
  Tape& t = *a.tape();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::min(a.value()[i], b.value()[i]);
  }
  return t.push(std::move(out), [a, b](Tape& tp, std::uint32_t self) {
    const auto& g = tp.adjoint(self);
    const auto& x = tp.value(a);
    const auto& y = tp.value(b);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] <= y[i]) {
        tp.add_adjoint(a, i, g[i]);
      } else {
        tp.add_adjoint(b, i, g[i]);
      }
    }
  });
}

inline Var sum(Var a) {
  Tape& t = *a.tape();
  double s = 0.0;
  for (double v : a.value()) s += v;
  return t.push({s}, [a](Tape& tp, std::uint32_t self) {
    const double g = tp.adjoint(self)[0];
    for (std::size_t i = 0; i < tp.value(a).size(); ++i) tp.add_adjoint(a, i, g);
  });
}

inline Var mean(Var a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Var pick(Var a, std::size_t index) {
  if (index >= a.size()) throw ShapeError("pick: index out of range");
  Tape& t = *a.tape();
  return t.push({a.value()[index]}, [a, index](Tape& tp, std::uint32_t self) {
    tp.add_adjoint(a, index, tp.adjoint(self)[0]);
  });
}

inline Var concat(Var a, Var b) {
  detail::require_same_tape(a, b);
  Tape& t = *a.tape();
  std::vector<double> out = a.value();
  out.insert(out.end(), b.value().begin(), b.value().end());
  const std::size_t na = a.size();
  return t.push(std::move(out), [a, b, na](Tape& tp, std::uint32_t self) {
    const auto& g = tp.adjoint(self);
    for (std::size_t i = 0; i < na; ++i) tp.add_adjoint(a, i, g[i]);
    for (std::size_t i = na; i < g.size(); ++i) tp.add_adjoint(b, i - na, g[i]);
  });
}

// Packs scalar nodes into one vector node.
inline Var stack(std::span<const Var> scalars) {
  if (scalars.empty()) throw ShapeError("stack: empty input");
  Tape& t = *scalars.front().tape();
  std::vector<double> out;
  out.reserve(scalars.size());
  for (const Var& s : scalars) out.push_back(s.scalar());
  std::vector<Var> inputs(scalars.begin(), scalars.end());
  return t.push(std::move(out),
                [inputs = std::move(inputs)](Tape& tp, std::uint32_t self) {
                  const auto& g = tp.adjoint(self);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    tp.add_adjoint(inputs[i], 0, g[i]);
                  }
                });
}

inline Var log_softmax(Var a) {
  Tape& t = *a.tape();
  const auto& x = a.value();
  const double m = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (double v : x) z += std::exp(v - m);
  const double lse = m + std::log(z);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return t.push(std::move(out), [a](Tape& tp, std::uint32_t self) {
    const auto& g = tp.adjoint(self);
    const auto& y = tp.node(self).value;
    double gs = 0.0;
    for (double v : g) gs += v;
    for (std::size_t i = 0; i < g.size(); ++i) {
      tp.add_adjoint(a, i, g[i] - std::exp(y[i]) * gs);
    }
  });
}

// y = W x + b with W (rows x cols) and b (rows) taken from parameters.
inline Var affine(Parameter& w, Parameter& b, Var x) {
  if (x.size() != w.cols) {
    throw ShapeError("affine: input size " + std::to_string(x.size()) +
                     " does not match weight cols " + std::to_string(w.cols));
  }
  if (b.size() != w.rows) throw ShapeError("affine: bias size mismatch");
  Tape& t = *x.tape();
  Var wv = t.parameter(w);
  Var bv = t.parameter(b);
  const std::size_t rows = w.rows;
  const std::size_t cols = w.cols;
  const auto& xv = x.value();
  std::vector<double> out(b.value);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    const double* wr = w.value.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * xv[c];
    out[r] += acc;
  }
  return t.push(std::move(out), [wv, bv, x, rows, cols](Tape& tp,
                                                       std::uint32_t self) {
    const auto& g = tp.adjoint(self);
    const auto& wval = tp.value(wv);
    const auto& xval = tp.value(x);
    for (std::size_t r = 0; r < rows; ++r) {
      if (g[r] == 0.0) continue;
      tp.add_adjoint(bv, r, g[r]);
      for (std::size_t c = 0; c < cols; ++c) {
        tp.add_adjoint(wv, r * cols + c, g[r] * xval[c]);
        tp.add_adjoint(x, c, g[r] * wval[r * cols + c]);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Dense feed-forward networks.

enum class Activation { identity, tanh, relu };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
  }
  return "?";
}

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::tanh: return std::tanh(x);
    case Activation::relu: return x > 0.0 ? x : 0.0;
  }
  return x;
}

inline Var activate(Activation a, Var x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::tanh: return tanh(x);
    case Activation::relu: return relu(x);
  }
  return x;
}

struct DenseLayer {
  Parameter weight;  // out x in
  Parameter bias;    // out x 1
  Activation activation = Activation::identity;
};

class DenseNet {
 public:
  DenseNet() = default;

  // dims = {in, h1, ..., out}; activations.size() == dims.size() - 1.
  DenseNet(std::span<const std::size_t> dims,
           std::span<const Activation> activations) {
    if (dims.size() < 2 || activations.size() + 1 != dims.size()) {
      throw ShapeError("DenseNet: need one activation per layer");
    }
    for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
      if (dims[k] == 0 || dims[k + 1] == 0) {
        throw ShapeError("DenseNet: zero-width layer");
      }
      layers_.push_back(DenseLayer{Parameter(dims[k + 1], dims[k]),
                                   Parameter(dims[k + 1], 1), activations[k]});
    }
  }

  DenseNet(std::initializer_list<std::size_t> dims,
           std::initializer_list<Activation> activations)
      : DenseNet(std::span<const std::size_t>(dims.begin(), dims.size()),
                 std::span<const Activation>(activations.begin(),
                                             activations.size())) {}

  std::size_t input_dim() const { return layers_.front().weight.cols; }
  std::size_t output_dim() const { return layers_.back().weight.rows; }
  std::size_t num_layers() const { return layers_.size(); }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  // Glorot-uniform weights, zero biases.
  void init_glorot(std::uint64_t seed) {
    RngStream rng(seed);
    for (auto& l : layers_) {
      const double a = std::sqrt(
          6.0 / static_cast<double>(l.weight.rows + l.weight.cols));
      for (auto& w : l.weight.value) w = rng.uniform(-a, a);
      std::fill(l.bias.value.begin(), l.bias.value.end(), 0.0);
    }
  }

  Var forward(Tape& /*tape*/, Var x) {
    if (x.size() != input_dim()) {
      throw ShapeError("DenseNet::forward: expected input of size " +
                       std::to_string(input_dim()) + ", got " +
                       std::to_string(x.size()));
    }
    for (auto& l : layers_) x = activate(l.activation, affine(l.weight, l.bias, x));
    return x;
  }

  // Untaped evaluation, same arithmetic as forward().
  std::vector<double> evaluate(std::span<const double> x) const {
    if (x.size() != input_dim()) {
      throw ShapeError("DenseNet::evaluate: expected input of size " +
                       std::to_string(input_dim()) + ", got " +
                       std::to_string(x.size()));
    }
    std::vector<double> cur(x.begin(), x.end());
    for (const auto& l : layers_) {
      std::vector<double> next(l.bias.value);
      const std::size_t cols = l.weight.cols;
      for (std::size_t r = 0; r < l.weight.rows; ++r) {
        double acc = 0.0;
        const double* wr = l.weight.value.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * cur[c];
        next[r] = activate(l.activation, next[r] + acc);
      }
      cur = std::move(next);
    }
    return cur;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

 private:
  std::vector<DenseLayer> layers_;
};

inline void zero_grad(std::span<Parameter* const> params) {
  for (auto* p : params) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Central finite-difference gradient check.

struct GradCheckReport {
  // Max relative error per parameter array, in the order given.
  std::vector<double> per_parameter;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Relative error with a unit floor on the denominator: entries whose gradient
// magnitude is below 1 are compared in absolute terms. Central differences at
// step 1e-6 carry ~1e-10 * |loss| of rounding noise, which would otherwise
// dominate near-zero entries.
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1.0});
  return std::abs(analytic - numeric) / denom;
}

using LossFn = std::function<Var(Tape&)>;

inline GradCheckReport finite_diff_check(std::span<Parameter* const> params,
                                         const LossFn& loss_fn,
                                         double tolerance,
                                         double step = 1e-6) {
  if (!(tolerance > 0.0)) throw ContractError("tolerance must be positive");
  auto evaluate = [&]() {
    Tape tape;
    const double v = loss_fn(tape).scalar();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: loss is not finite");
    return v;
  };

  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = loss_fn(tape);
    if (!std::isfinite(loss.scalar())) {
      throw NumericError("finite_diff_check: loss is not finite");
    }
    tape.backward(loss);
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  for (auto* p : params) {
    double worst = 0.0;
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + step;
      const double up = evaluate();
      p->value[i] = saved - step;
      const double down = evaluate();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      worst = std::max(worst, relative_error(p->grad[i], numeric));
    }
    report.per_parameter.push_back(worst);
    report.max_relative_error = std::max(report.max_relative_error, worst);
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

inline GradCheckReport finite_diff_check(DenseNet& net, const LossFn& loss_fn,
                                         double tolerance) {
  auto params = net.parameters();
  return finite_diff_check(params, loss_fn, tolerance);
}

}  // namespace flowrl::grad

#endif  // FLOWRL_GRAD_HPP_
