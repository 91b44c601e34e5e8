// SPDX-License-Identifier: Apache-2.0

#include <spafit/autograd.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace spafit {

const Tensor &Var::value() const { return graph->value(*this); }

Var Graph::constant(Tensor t) {
  Node n;
  n.owned = std::move(t);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Graph::leaf(Tensor t) {
  Node n;
  n.owned = std::move(t);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Graph::param(const Tensor &t, Tensor *grad_sink) {
  Node n;
  n.external = &t;
  n.sink = grad_sink;
  n.requires_grad = grad_sink != nullptr;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

const Tensor &Graph::value(Var v) const { return nodes_.at(v.id).value(); }

Var Graph::record(Tensor value, bool requires_grad, BackwardFn backward) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad)
    n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

std::vector<double> &Graph::grad_acc(Var v) {
  auto &n = nodes_[v.id];
  if (n.grad.empty())
    n.grad.assign(n.value().numel(), 0.0);
  return n.grad;
}

void Graph::backward(Var loss) {
  if (loss.graph != this)
    throw ContractError("backward: loss belongs to another graph");
  if (value(loss).numel() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_str(value(loss).shape()));
  if (backward_done_)
    throw ContractError("backward: already called on this graph");
  backward_done_ = true;
  if (!nodes_[loss.id].requires_grad)
    return;
  grad_acc(loss)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto &n = nodes_[i];
    if (n.grad.empty())
      continue;
    if (n.backward)
      n.backward(*this, n.grad);
    if (n.sink) {
      auto g = n.sink->grad();
      for (std::size_t j = 0; j < g.size(); ++j)
        g[j] += n.grad[j];
    }
  }
}

namespace {

void require_same_graph(Var a, Var b, const char *op) {
  if (a.graph != b.graph)
    throw ContractError(std::string(op) + ": operands from different graphs");
}

void require_same_shape(const Tensor &a, const Tensor &b, const char *op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Shape with_last(Shape s, std::size_t last) {
  s.back() = last;
  return s;
}

} // namespace

double normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

double gelu_value(double x) { return x * normal_cdf(x); }

Var matmul(Var a, Var b) {
  require_same_graph(a, b, "matmul");
  Graph &g = *a.graph;
  const Tensor &A = a.value();
  const Tensor &B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw ShapeError("matmul: cannot multiply " + shape_str(A.shape()) +
                     " by " + shape_str(B.shape()));
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor C({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j)
        C[i * n + j] += aip * B[p * n + j];
    }
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.record(std::move(C), rg,
                  [a, b, m, k, n](Graph &g, std::span<const double> dC) {
                    const Tensor &A = a.value();
                    const Tensor &B = b.value();
                    if (g.requires_grad(a)) {
                      auto &dA = g.grad_acc(a);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                          double s = 0.0;
                          for (std::size_t j = 0; j < n; ++j)
                            s += dC[i * n + j] * B[p * n + j];
                          dA[i * k + p] += s;
                        }
                    }
                    if (g.requires_grad(b)) {
                      auto &dB = g.grad_acc(b);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                          const double aip = A[i * k + p];
                          for (std::size_t j = 0; j < n; ++j)
                            dB[p * n + j] += aip * dC[i * n + j];
                        }
                    }
                  });
}

Var linear(Var x, Var w, std::optional<Var> bias) {
  require_same_graph(x, w, "linear");
  Graph &g = *x.graph;
  const Tensor &X = x.value();
  const Tensor &W = w.value();
  if (W.rank() != 2 || X.cols() != W.dim(1))
    throw ShapeError("linear: input " + shape_str(X.shape()) +
                     " incompatible with weight " + shape_str(W.shape()));
  const std::size_t rows = X.rows(), in = W.dim(1), out = W.dim(0);
  if (bias) {
    require_same_graph(x, *bias, "linear");
    const Tensor &b = bias->value();
    if (b.numel() != out || b.rank() != 1)
      throw ShapeError("linear: bias " + shape_str(b.shape()) +
                       " does not match weight " + shape_str(W.shape()));
  }
  Tensor Y(with_last(X.shape(), out));
  for (std::size_t r = 0; r < rows; ++r) {
    const double *xr = &X[r * in];
    for (std::size_t o = 0; o < out; ++o) {
      const double *wo = &W[o * in];
      double s = 0.0;
      for (std::size_t j = 0; j < in; ++j)
        s += xr[j] * wo[j];
      Y[r * out + o] = bias ? s + bias->value()[o] : s;
    }
  }
  bool rg = g.requires_grad(x) || g.requires_grad(w) ||
            (bias && g.requires_grad(*bias));
  return g.record(
      std::move(Y), rg,
      [x, w, bias, rows, in, out](Graph &g, std::span<const double> dY) {
        const Tensor &X = x.value();
        const Tensor &W = w.value();
        if (g.requires_grad(x)) {
          auto &dX = g.grad_acc(x);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out; ++o) {
              const double d = dY[r * out + o];
              const double *wo = &W[o * in];
              double *dxr = &dX[r * in];
              for (std::size_t j = 0; j < in; ++j)
                dxr[j] += d * wo[j];
            }
        }
        if (g.requires_grad(w)) {
          auto &dW = g.grad_acc(w);
          for (std::size_t r = 0; r < rows; ++r) {
            const double *xr = &X[r * in];
            for (std::size_t o = 0; o < out; ++o) {
              const double d = dY[r * out + o];
              double *dwo = &dW[o * in];
              for (std::size_t j = 0; j < in; ++j)
                dwo[j] += d * xr[j];
            }
          }
        }
        if (bias && g.requires_grad(*bias)) {
          auto &db = g.grad_acc(*bias);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out; ++o)
              db[o] += dY[r * out + o];
        }
      });
}

Var add(Var a, Var b) {
  require_same_graph(a, b, "add");
  Graph &g = *a.graph;
  require_same_shape(a.value(), b.value(), "add");
  Tensor Y = a.value();
  Y.clear_grad();
  const Tensor &B = b.value();
  for (std::size_t i = 0; i < Y.numel(); ++i)
    Y[i] += B[i];
  return g.record(std::move(Y), g.requires_grad(a) || g.requires_grad(b),
                  [a, b](Graph &g, std::span<const double> dY) {
                    for (Var v : {a, b}) {
                      if (!g.requires_grad(v))
                        continue;
                      auto &d = g.grad_acc(v);
                      for (std::size_t i = 0; i < d.size(); ++i)
                        d[i] += dY[i];
                    }
                  });
}

Var mul(Var a, Var b) {
  require_same_graph(a, b, "mul");
  Graph &g = *a.graph;
  require_same_shape(a.value(), b.value(), "mul");
  Tensor Y = a.value();
  Y.clear_grad();
  const Tensor &B = b.value();
  for (std::size_t i = 0; i < Y.numel(); ++i)
    Y[i] *= B[i];
  return g.record(std::move(Y), g.requires_grad(a) || g.requires_grad(b),
                  [a, b](Graph &g, std::span<const double> dY) {
                    const Tensor &A = a.value();
                    const Tensor &B = b.value();
                    if (g.requires_grad(a)) {
                      auto &d = g.grad_acc(a);
                      for (std::size_t i = 0; i < d.size(); ++i)
                        d[i] += dY[i] * B[i];
                    }
                    if (g.requires_grad(b)) {
                      auto &d = g.grad_acc(b);
                      for (std::size_t i = 0; i < d.size(); ++i)
                        d[i] += dY[i] * A[i];
                    }
                  });
}

Var scale(Var a, double s) {
  Graph &g = *a.graph;
  Tensor Y = a.value();
  Y.clear_grad();
  for (auto &y : Y.data())
    y *= s;
  return g.record(std::move(Y), g.requires_grad(a),
                  [a, s](Graph &g, std::span<const double> dY) {
                    auto &d = g.grad_acc(a);
                    for (std::size_t i = 0; i < d.size(); ++i)
                      d[i] += s * dY[i];
                  });
}

Var sum(Var a) {
  Graph &g = *a.graph;
  double s = 0.0;
  for (double v : a.value().data())
    s += v;
  return g.record(Tensor::scalar(s), g.requires_grad(a),
                  [a](Graph &g, std::span<const double> dY) {
                    auto &d = g.grad_acc(a);
                    for (auto &v : d)
                      v += dY[0];
                  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_same_graph(x, gamma, "layer_norm");
  require_same_graph(x, beta, "layer_norm");
  Graph &g = *x.graph;
  const Tensor &X = x.value();
  const std::size_t d = X.cols();
  if (d == 0)
    throw ShapeError("layer_norm: empty normalized dimension");
  if (gamma.value().numel() != d || beta.value().numel() != d)
    throw ShapeError("layer_norm: affine parameters " +
                     shape_str(gamma.value().shape()) + "/" +
                     shape_str(beta.value().shape()) +
                     " do not match last dimension of " +
                     shape_str(X.shape()));
  const std::size_t rows = X.rows();
  const Tensor &G = gamma.value();
  const Tensor &B = beta.value();
  Tensor Y(X.shape());
  std::vector<double> xhat(X.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double *xr = &X[r * d];
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * is;
      xhat[r * d + j] = h;
      Y[r * d + j] = G[j] * h + B[j];
    }
  }
  const bool rg =
      g.requires_grad(x) || g.requires_grad(gamma) || g.requires_grad(beta);
  return g.record(
      std::move(Y), rg,
      [x, gamma, beta, rows, d, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Graph &g, std::span<const double> dY) {
        const Tensor &G = gamma.value();
        if (g.requires_grad(gamma)) {
          auto &dg = g.grad_acc(gamma);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j)
              dg[j] += dY[r * d + j] * xhat[r * d + j];
        }
        if (g.requires_grad(beta)) {
          auto &db = g.grad_acc(beta);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j)
              db[j] += dY[r * d + j];
        }
        if (g.requires_grad(x)) {
          auto &dX = g.grad_acc(x);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dY[r * d + j] * G[j];
              m1 += dh;
              m2 += dh * xhat[r * d + j];
            }
            m1 *= inv_d;
            m2 *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dY[r * d + j] * G[j];
              dX[r * d + j] += inv_std[r] * (dh - m1 - xhat[r * d + j] * m2);
            }
          }
        }
      });
}

Var gelu(Var x) {
  Graph &g = *x.graph;
  Tensor Y(x.value().shape());
  const Tensor &X = x.value();
  for (std::size_t i = 0; i < X.numel(); ++i)
    Y[i] = gelu_value(X[i]);
  return g.record(std::move(Y), g.requires_grad(x),
                  [x](Graph &g, std::span<const double> dY) {
                    const Tensor &X = x.value();
                    auto &d = g.grad_acc(x);
                    const double inv_sqrt_2pi =
                        std::numbers::inv_sqrtpi / std::numbers::sqrt2;
                    for (std::size_t i = 0; i < d.size(); ++i) {
                      const double v = X[i];
                      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                      d[i] += dY[i] * (normal_cdf(v) + v * pdf);
                    }
                  });
}

Var tanh(Var x) {
  Graph &g = *x.graph;
  Tensor Y(x.value().shape());
  const Tensor &X = x.value();
  for (std::size_t i = 0; i < X.numel(); ++i)
    Y[i] = std::tanh(X[i]);
  std::vector<double> saved = Y.values();
  return g.record(std::move(Y), g.requires_grad(x),
                  [x, saved = std::move(saved)](Graph &g,
                                                std::span<const double> dY) {
                    auto &d = g.grad_acc(x);
                    for (std::size_t i = 0; i < d.size(); ++i)
                      d[i] += dY[i] * (1.0 - saved[i] * saved[i]);
                  });
}

Var softmax(Var x) {
  Graph &g = *x.graph;
  const Tensor &X = x.value();
  const std::size_t n = X.cols(), rows = X.rows();
  Tensor Y(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double *xr = &X[r * n];
    double *yr = &Y[r * n];
    const double mx = *std::max_element(xr, xr + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j)
      yr[j] /= s;
  }
  std::vector<double> saved = Y.values();
  return g.record(std::move(Y), g.requires_grad(x),
                  [x, n, rows, saved = std::move(saved)](
                      Graph &g, std::span<const double> dY) {
                    auto &d = g.grad_acc(x);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double dot = 0.0;
                      for (std::size_t j = 0; j < n; ++j)
                        dot += dY[r * n + j] * saved[r * n + j];
                      for (std::size_t j = 0; j < n; ++j)
                        d[r * n + j] += saved[r * n + j] * (dY[r * n + j] - dot);
                    }
                  });
}

Var dropout(Var x, double p) {
  if (!(p >= 0.0 && p < 1.0))
    throw ParameterError("dropout: probability must lie in [0, 1), got " +
                         std::to_string(p));
  Graph &g = *x.graph;
  if (g.mode() == Mode::Eval || p == 0.0)
    return x;
  const Tensor &X = x.value();
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(X.numel());
  Tensor Y(X.shape());
  auto &rng = g.rng();
  for (std::size_t i = 0; i < X.numel(); ++i) {
    // 53 random bits -> uniform in [0, 1); independent of the standard
    // library's distribution implementations.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    mask[i] = u < p ? 0.0 : keep_scale;
    Y[i] = X[i] * mask[i];
  }
  return g.record(std::move(Y), g.requires_grad(x),
                  [x, mask = std::move(mask)](Graph &g,
                                              std::span<const double> dY) {
                    auto &d = g.grad_acc(x);
                    for (std::size_t i = 0; i < d.size(); ++i)
                      d[i] += dY[i] * mask[i];
                  });
}

Var attention(Var q, Var k, Var v, std::size_t num_heads,
              const Tensor *key_bias) {
  require_same_graph(q, k, "attention");
  require_same_graph(q, v, "attention");
  Graph &g = *q.graph;
  const Tensor &Q = q.value();
  const Tensor &K = k.value();
  const Tensor &V = v.value();
  if (Q.rank() != 3)
    throw ShapeError("attention: expected [batch, seq, d], got " +
                     shape_str(Q.shape()));
  require_same_shape(Q, K, "attention");
  require_same_shape(Q, V, "attention");
  const std::size_t B = Q.dim(0), S = Q.dim(1), D = Q.dim(2);
  if (num_heads == 0 || D % num_heads != 0)
    throw ShapeError("attention: hidden size " + std::to_string(D) +
                     " not divisible by " + std::to_string(num_heads) +
                     " heads");
  if (key_bias && key_bias->numel() != B * S)
    throw ShapeError("attention: key bias " + shape_str(key_bias->shape()) +
                     " does not match batch x seq");
  const std::size_t H = num_heads, dh = D / H;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor Ctx(Q.shape());
  std::vector<double> probs(B * H * S * S);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h) {
      double *P = &probs[((b * H + h) * S) * S];
      for (std::size_t i = 0; i < S; ++i) {
        const double *qi = &Q[(b * S + i) * D + h * dh];
        double *pi = &P[i * S];
        double mx = -INFINITY;
        for (std::size_t j = 0; j < S; ++j) {
          const double *kj = &K[(b * S + j) * D + h * dh];
          double s = 0.0;
          for (std::size_t t = 0; t < dh; ++t)
            s += qi[t] * kj[t];
          s *= sc;
          if (key_bias)
            s += (*key_bias)[b * S + j];
          pi[j] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < S; ++j) {
          pi[j] = std::exp(pi[j] - mx);
          z += pi[j];
        }
        double *ci = &Ctx[(b * S + i) * D + h * dh];
        for (std::size_t j = 0; j < S; ++j) {
          pi[j] /= z;
          const double *vj = &V[(b * S + j) * D + h * dh];
          for (std::size_t t = 0; t < dh; ++t)
            ci[t] += pi[j] * vj[t];
        }
      }
    }
  const bool rg =
      g.requires_grad(q) || g.requires_grad(k) || g.requires_grad(v);
  return g.record(
      std::move(Ctx), rg,
      [q, k, v, B, S, D, H, dh, sc,
       probs = std::move(probs)](Graph &g, std::span<const double> dC) {
        const Tensor &Q = q.value();
        const Tensor &K = k.value();
        const Tensor &V = v.value();
        std::vector<double> *dQ = g.requires_grad(q) ? &g.grad_acc(q) : nullptr;
        std::vector<double> *dK = g.requires_grad(k) ? &g.grad_acc(k) : nullptr;
        std::vector<double> *dV = g.requires_grad(v) ? &g.grad_acc(v) : nullptr;
        std::vector<double> dS(S);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t h = 0; h < H; ++h) {
            const double *P = &probs[((b * H + h) * S) * S];
            for (std::size_t i = 0; i < S; ++i) {
              const double *dci = &dC[(b * S + i) * D + h * dh];
              const double *pi = &P[i * S];
              double dot = 0.0;
              for (std::size_t j = 0; j < S; ++j) {
                const double *vj = &V[(b * S + j) * D + h * dh];
                double dp = 0.0;
                for (std::size_t t = 0; t < dh; ++t)
                  dp += dci[t] * vj[t];
                dS[j] = dp;
                dot += pi[j] * dp;
                if (dV) {
                  double *dvj = &(*dV)[(b * S + j) * D + h * dh];
                  for (std::size_t t = 0; t < dh; ++t)
                    dvj[t] += pi[j] * dci[t];
                }
              }
              const double *qi = &Q[(b * S + i) * D + h * dh];
              for (std::size_t j = 0; j < S; ++j) {
                const double ds = pi[j] * (dS[j] - dot) * sc;
                if (ds == 0.0)
                  continue;
                if (dQ) {
                  const double *kj = &K[(b * S + j) * D + h * dh];
                  double *dqi = &(*dQ)[(b * S + i) * D + h * dh];
                  for (std::size_t t = 0; t < dh; ++t)
                    dqi[t] += ds * kj[t];
                }
                if (dK) {
                  double *dkj = &(*dK)[(b * S + j) * D + h * dh];
                  for (std::size_t t = 0; t < dh; ++t)
                    dkj[t] += ds * qi[t];
                }
              }
            }
          }
      });
}

Var embedding(Var table, std::span<const int> ids, const Shape &ids_shape) {
  Graph &g = *table.graph;
  const Tensor &T = table.value();
  if (T.rank() != 2)
    throw ShapeError("embedding: table must be 2-D, got " +
                     shape_str(T.shape()));
  if (shape_numel(ids_shape) != ids.size())
    throw ShapeError("embedding: id shape " + shape_str(ids_shape) +
                     " does not match " + std::to_string(ids.size()) + " ids");
  const std::size_t V = T.dim(0), D = T.dim(1);
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      throw std::out_of_range("embedding: id " + std::to_string(id) +
                              " outside table of " + std::to_string(V) +
                              " rows");
  Shape out_shape = ids_shape;
  out_shape.push_back(D);
  Tensor Y(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(&T[static_cast<std::size_t>(ids[i]) * D], D, &Y[i * D]);
  std::vector<int> saved(ids.begin(), ids.end());
  return g.record(std::move(Y), g.requires_grad(table),
                  [table, D, saved = std::move(saved)](
                      Graph &g, std::span<const double> dY) {
                    auto &d = g.grad_acc(table);
                    for (std::size_t i = 0; i < saved.size(); ++i) {
                      double *row = &d[static_cast<std::size_t>(saved[i]) * D];
                      for (std::size_t t = 0; t < D; ++t)
                        row[t] += dY[i * D + t];
                    }
                  });
}

Var position_rows(Var table, std::size_t batch, std::size_t seq) {
  Graph &g = *table.graph;
  const Tensor &T = table.value();
  if (T.rank() != 2 || seq > T.dim(0))
    throw ShapeError("position_rows: sequence length " + std::to_string(seq) +
                     " exceeds table " + shape_str(T.shape()));
  const std::size_t D = T.dim(1);
  Tensor Y({batch, seq, D});
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(&T[0], seq * D, &Y[b * seq * D]);
  return g.record(std::move(Y), g.requires_grad(table),
                  [table, batch, seq, D](Graph &g, std::span<const double> dY) {
                    auto &d = g.grad_acc(table);
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t i = 0; i < seq * D; ++i)
                        d[i] += dY[b * seq * D + i];
                  });
}

Var first_token(Var x) {
  Graph &g = *x.graph;
  const Tensor &X = x.value();
  if (X.rank() != 3)
    throw ShapeError("first_token: expected [batch, seq, d], got " +
                     shape_str(X.shape()));
  const std::size_t B = X.dim(0), S = X.dim(1), D = X.dim(2);
  Tensor Y({B, D});
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(&X[b * S * D], D, &Y[b * D]);
  return g.record(std::move(Y), g.requires_grad(x),
                  [x, B, S, D](Graph &g, std::span<const double> dY) {
                    auto &d = g.grad_acc(x);
                    for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t t = 0; t < D; ++t)
                        d[b * S * D + t] += dY[b * D + t];
                  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  Graph &g = *logits.graph;
  const Tensor &L = logits.value();
  if (L.rank() != 2 || L.dim(0) != labels.size())
    throw ShapeError("cross_entropy: logits " + shape_str(L.shape()) +
                     " vs " + std::to_string(labels.size()) + " labels");
  const std::size_t B = L.dim(0), C = L.dim(1);
  std::vector<double> probs(B * C);
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= C)
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) +
                              " outside " + std::to_string(C) + " classes");
    const double *lb = &L[b * C];
    const double mx = *std::max_element(lb, lb + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c)
      z += std::exp(lb[c] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t c = 0; c < C; ++c)
      probs[b * C + c] = std::exp(lb[c] - log_z);
    loss += log_z - lb[y];
  }
  loss /= static_cast<double>(B);
  std::vector<int> saved(labels.begin(), labels.end());
  return g.record(Tensor::scalar(loss), g.requires_grad(logits),
                  [logits, B, C, probs = std::move(probs),
                   saved = std::move(saved)](Graph &g,
                                             std::span<const double> dY) {
                    auto &d = g.grad_acc(logits);
                    const double s = dY[0] / static_cast<double>(B);
                    for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t c = 0; c < C; ++c) {
                        const double onehot =
                            static_cast<std::size_t>(saved[b]) == c ? 1.0 : 0.0;
                        d[b * C + c] += s * (probs[b * C + c] - onehot);
                      }
                  });
}

Var mse(Var pred, std::span<const double> targets) {
  Graph &g = *pred.graph;
  const Tensor &P = pred.value();
  if (P.numel() != targets.size())
    throw ShapeError("mse: predictions " + shape_str(P.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  const std::size_t n = targets.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    loss += (P[i] - targets[i]) * (P[i] - targets[i]);
  loss /= static_cast<double>(n);
  std::vector<double> saved(targets.begin(), targets.end());
  return g.record(Tensor::scalar(loss), g.requires_grad(pred),
                  [pred, n, saved = std::move(saved)](
                      Graph &g, std::span<const double> dY) {
                    const Tensor &P = pred.value();
                    auto &d = g.grad_acc(pred);
                    const double s = 2.0 * dY[0] / static_cast<double>(n);
                    for (std::size_t i = 0; i < n; ++i)
                      d[i] += s * (P[i] - saved[i]);
                  });
}

} // namespace spafit
