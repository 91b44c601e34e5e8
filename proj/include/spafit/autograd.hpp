// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode automatic differentiation over Tensor values.
//
// A Graph records nodes in creation order, which is a topological order, so
// backward() is a single reverse sweep. Parameters owned elsewhere (e.g. by a
// ParamStore) are bound by reference; their gradients are accumulated into
// the owning tensor's grad slot when backward() finishes.

#pragma once

#include <spafit/tensor.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace spafit {

class ContractError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

class ParameterError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

enum class Mode { Train, Eval };

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph *graph = nullptr;
  std::size_t id = 0;

  const Tensor &value() const;
  const Shape &shape() const { return value().shape(); }
};

class Graph {
public:
  explicit Graph(Mode mode = Mode::Eval, std::uint64_t seed = 0)
      : mode_(mode), rng_(seed) {}
  Graph(const Graph &) = delete;
  Graph &operator=(const Graph &) = delete;

  Mode mode() const { return mode_; }
  std::mt19937_64 &rng() { return rng_; }

  /// Owned value without gradient.
  Var constant(Tensor t);
  /// Owned value whose gradient is readable through grad() after backward().
  Var leaf(Tensor t);
  /// External value. When `grad_sink` is non-null the gradient is added into
  /// grad_sink->grad() by backward(); otherwise the value is treated as a
  /// constant.
  Var param(const Tensor &t, Tensor *grad_sink);

  const Tensor &value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  /// Gradient of the loss with respect to `v`; empty if unreached.
  std::span<const double> grad(Var v) const { return nodes_[v.id].grad; }

  /// Reverse sweep from a scalar loss. May be called once per graph.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  // Op-author interface.
  using BackwardFn = std::function<void(Graph &, std::span<const double>)>;
  Var record(Tensor value, bool requires_grad, BackwardFn backward);
  /// Gradient accumulator of a node, allocated on first use.
  std::vector<double> &grad_acc(Var v);

private:
  struct Node {
    Tensor owned;
    const Tensor *external = nullptr;
    Tensor *sink = nullptr;
    bool requires_grad = false;
    std::vector<double> grad;
    BackwardFn backward;

    const Tensor &value() const { return external ? *external : owned; }
  };

  Mode mode_;
  std::mt19937_64 rng_;
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Operations over "rows" treat a tensor as
// rows() x cols(), i.e. all leading dimensions are flattened.

/// a[m x k] * b[k x n].
Var matmul(Var a, Var b);
/// x[..., in] * w[out x in]^T + bias[out]; output shape [..., out].
Var linear(Var x, Var w, std::optional<Var> bias = std::nullopt);
Var add(Var a, Var b);
/// Elementwise product of same-shaped tensors.
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);

Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-12);
/// Exact x * Phi(x) with Phi the standard normal CDF.
Var gelu(Var x);
Var tanh(Var x);
/// Softmax over the last dimension.
Var softmax(Var x);
/// Inverted dropout in Mode::Train, identity in Mode::Eval. Draws from the
/// graph's generator.
Var dropout(Var x, double p);

/// Multi-head scaled dot-product attention.
/// q, k, v: [batch, seq, d]. key_bias: optional additive [batch, seq] term
/// applied to every query's scores for the given key position.
Var attention(Var q, Var k, Var v, std::size_t num_heads,
              const Tensor *key_bias = nullptr);

/// Row lookup: table[V, d], ids of shape `ids_shape` -> [ids_shape..., d].
Var embedding(Var table, std::span<const int> ids, const Shape &ids_shape);
/// Broadcasts rows of `table` [P, d] as positions 0..seq-1 over a batch:
/// output [batch, seq, d].
Var position_rows(Var table, std::size_t batch, std::size_t seq);
/// x[batch, seq, d] -> x[:, 0, :] of shape [batch, d].
Var first_token(Var x);

/// Mean softmax cross-entropy of logits[batch, C] against integer labels.
Var cross_entropy(Var logits, std::span<const int> labels);
/// Mean squared error of pred[batch, 1] against targets.
Var mse(Var pred, std::span<const double> targets);

// Plain helpers shared by ops and tests.
double normal_cdf(double x);
double gelu_value(double x);

} // namespace spafit
