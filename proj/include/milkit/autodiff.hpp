#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "milkit/error.hpp"
#include "milkit/tensor.hpp"

namespace milkit {

/// Handle to a node recorded on a Graph. Only meaningful for the graph that produced it.
struct Var {
  std::size_t id = 0;
  bool operator==(const Var&) const = default;
};

class Graph;

/// Local gradient rule. Reads the node's output gradient from the graph and
/// accumulates into the gradients of its inputs.
using BackwardFn = std::function<void(Graph&, std::size_t self)>;

/// A tape of tensor operations recorded in execution order. Backward walks
/// the tape in exact reverse order; gradients into shared inputs add up.
class Graph {
 public:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    // Per-column selected row indices, descending by value. Set by top-k pooling only.
    std::vector<std::vector<std::size_t>> selection;
  };

  Var leaf(Tensor value) { return record(std::move(value), {}, nullptr); }

  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), {}});
    grads_.emplace_back();
    return Var{nodes_.size() - 1};
  }

  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(Var v) const { return node(v.id).value; }
  const Tensor& value(std::size_t id) const { return node(id).value; }

  const std::vector<std::vector<std::size_t>>& selection(Var v) const { return node(v.id).selection; }
  void set_selection(Var v, std::vector<std::vector<std::size_t>> sel) { node(v.id).selection = std::move(sel); }

  /// Gradient of the last backward() target with respect to v. Zero when v
  /// did not influence the target.
  Tensor grad(Var v) const {
    const Tensor& g = grads_.at(v.id);
    return g.empty() ? Tensor(node(v.id).value.shape()) : g;
  }

  /// Accumulator for node id's gradient, zero-initialised on first touch.
  Tensor& grad_accumulator(std::size_t id) {
    Tensor& g = grads_.at(id);
    if (g.empty()) g = Tensor(node(id).value.shape());
    return g;
  }

  const Tensor& output_grad(std::size_t id) { return grad_accumulator(id); }

  void backward(Var output) {
    require(node(output.id).value.size() == 1,
            "backward: output must be a scalar, got shape " + shape_string(node(output.id).value.shape()));
    for (auto& g : grads_) g = Tensor();
    grad_accumulator(output.id)[0] = 1.0;
    for (std::size_t i = output.id + 1; i-- > 0;) {
      if (grads_[i].empty() || !nodes_[i].backward) continue;
      nodes_[i].backward(*this, i);
    }
  }

 private:
  const Node& node(std::size_t id) const {
    require(id < nodes_.size(), "graph: unknown node " + std::to_string(id));
    return nodes_[id];
  }
  Node& node(std::size_t id) {
    require(id < nodes_.size(), "graph: unknown node " + std::to_string(id));
    return nodes_[id];
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

inline void backward(Graph& graph, Var output) { graph.backward(output); }

// ---------------------------------------------------------------------------
// Element-wise operations

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.same_shape(b), std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                               shape_string(b.shape()));
}

template <typename F>
Tensor map(const Tensor& a, F&& f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Var add(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  detail::require_same_shape(x, y, "add");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return g.record(std::move(out), {a.id, b.id}, [a, b](Graph& gr, std::size_t self) {
    const Tensor go = gr.output_grad(self);
    for (std::size_t i = 0; i < go.size(); ++i) gr.grad_accumulator(a.id)[i] += go[i];
    for (std::size_t i = 0; i < go.size(); ++i) gr.grad_accumulator(b.id)[i] += go[i];
  });
}

inline Var sub(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  detail::require_same_shape(x, y, "sub");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return g.record(std::move(out), {a.id, b.id}, [a, b](Graph& gr, std::size_t self) {
    const Tensor go = gr.output_grad(self);
    for (std::size_t i = 0; i < go.size(); ++i) gr.grad_accumulator(a.id)[i] += go[i];
    for (std::size_t i = 0; i < go.size(); ++i) gr.grad_accumulator(b.id)[i] -= go[i];
  });
}

inline Var mul(Graph& g, Var a, Var b) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  detail::require_same_shape(x, y, "mul");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return g.record(std::move(out), {a.id, b.id}, [a, b](Graph& gr, std::size_t self) {
    const Tensor go = gr.output_grad(self);
    const Tensor x = gr.value(a);
    const Tensor y = gr.value(b);
    for (std::size_t i = 0; i < go.size(); ++i) gr.grad_accumulator(a.id)[i] += go[i] * y[i];
    for (std::size_t i = 0; i < go.size(); ++i) gr.grad_accumulator(b.id)[i] += go[i] * x[i];
  });
}

inline Var scale(Graph& g, Var a, double factor) {
  Tensor out = detail::map(g.value(a), [factor](double v) { return v * factor; });
  return g.record(std::move(out), {a.id}, [a, factor](Graph& gr, std::size_t self) {
    const Tensor go = gr.output_grad(self);
    Tensor& ga = gr.grad_accumulator(a.id);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * factor;
  });
}

inline Var add_scalar(Graph& g, Var a, double offset) {
  Tensor out = detail::map(g.value(a), [offset](double v) { return v + offset; });
  return g.record(std::move(out), {a.id}, [a](Graph& gr, std::size_t self) {
    const Tensor go = gr.output_grad(self);
    Tensor& ga = gr.grad_accumulator(a.id);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

inline Var neg(Graph& g, Var a) { return scale(g, a, -1.0); }

inline Var log(Graph& g, Var a) {
  const Tensor& x = g.value(a);
  for (double v : x.data()) {
    require(v > 0.0, "log: input must be strictly positive, got " + std::to_string(v));
  }
  Tensor out = detail::map(x, [](double v) { return std::log(v); });
  return g.record(std::move(out), {a.id}, [a](Graph& gr, std::size_t self) {
    const Tensor go = gr.output_grad(self);
    const Tensor x = gr.value(a);
    Tensor& ga = gr.grad_accumulator(a.id);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / x[i];
  });
}

/// Clamp into [lo, hi]. Gradient passes only where the input was strictly inside.
inline Var clamp(Graph& g, Var a, double lo, double hi) {
  Tensor out = detail::map(g.value(a), [lo, hi](double v) { return std::clamp(v, lo, hi); });
  return g.record(std::move(out), {a.id}, [a, lo, hi](Graph& gr, std::size_t self) {
    const Tensor go = gr.output_grad(self);
    const Tensor x = gr.value(a);
    Tensor& ga = gr.grad_accumulator(a.id);
    for (std::size_t i = 0; i < go.size(); ++i) {
      if (x[i] > lo && x[i] < hi) ga[i] += go[i];
    }
  });
}

/// Single entry of a, as a one-element tensor.
inline Var pick(Graph& g, Var a, std::size_t index) {
  const Tensor& x = g.value(a);
  require(index < x.size(), "pick: index " + std::to_string(index) + " out of range for " + shape_string(x.shape()));
  return g.record(Tensor({1}, x[index]), {a.id}, [a, index](Graph& gr, std::size_t self) {
    const double go = gr.output_grad(self)[0];
    gr.grad_accumulator(a.id)[index] += go;
  });
}

inline Var sum(Graph& g, Var a) {
  double total = 0.0;
  for (double v : g.value(a).data()) total += v;
  return g.record(Tensor({1}, total), {a.id}, [a](Graph& gr, std::size_t self) {
    const double go = gr.output_grad(self)[0];
    for (auto& v : gr.grad_accumulator(a.id).data()) v += go;
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and activations

/// Row-per-instance affine map: out[j][c] = sum_d W[c][d] * Z[j][d] + b[c].
/// W is C x D, Z is M x D, b has C entries, result is M x C.
inline Var matmul_bias(Graph& g, Var w, Var z, Var b) {
  const Tensor& W = g.value(w);
  const Tensor& Z = g.value(z);
  const Tensor& B = g.value(b);
  require(W.rank() == 2 && Z.rank() == 2, "matmul_bias: W and Z must be matrices");
  const std::size_t C = W.rows(), D = W.cols(), M = Z.rows();
  require(Z.cols() == D, "matmul_bias: inner dimension mismatch, W is " + shape_string(W.shape()) + ", Z is " +
                             shape_string(Z.shape()));
  require(B.size() == C, "matmul_bias: bias length " + std::to_string(B.size()) + " != " + std::to_string(C));

  Tensor out({M, C});
  for (std::size_t j = 0; j < M; ++j) {
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t d = 0; d < D; ++d) acc += W.at(c, d) * Z.at(j, d);
      out.at(j, c) = acc + B[c];
    }
  }
  return g.record(std::move(out), {w.id, z.id, b.id}, [w, z, b, C, D, M](Graph& gr, std::size_t self) {
    const Tensor go = gr.output_grad(self);
    const Tensor W = gr.value(w);
    const Tensor Z = gr.value(z);
    {
      Tensor& gw = gr.grad_accumulator(w.id);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t d = 0; d < D; ++d) {
          double acc = 0.0;
          for (std::size_t j = 0; j < M; ++j) acc += go.at(j, c) * Z.at(j, d);
          gw.at(c, d) += acc;
        }
    }
    {
      Tensor& gz = gr.grad_accumulator(z.id);
      for (std::size_t j = 0; j < M; ++j)
        for (std::size_t d = 0; d < D; ++d) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c) acc += go.at(j, c) * W.at(c, d);
          gz.at(j, d) += acc;
        }
    }
    {
      Tensor& gb = gr.grad_accumulator(b.id);
      for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < M; ++j) acc += go.at(j, c);
        gb[c] += acc;
      }
    }
  });
}

/// max(0, x); the gradient at exactly 0 is 0.
inline Var relu(Graph& g, Var a) {
  Tensor out = detail::map(g.value(a), [](double v) { return v > 0.0 ? v : 0.0; });
  return g.record(std::move(out), {a.id}, [a](Graph& gr, std::size_t self) {
    const Tensor go = gr.output_grad(self);
    const Tensor x = gr.value(a);
    Tensor& ga = gr.grad_accumulator(a.id);
    for (std::size_t i = 0; i < go.size(); ++i) {
      if (x[i] > 0.0) ga[i] += go[i];
    }
  });
}

inline Var sigmoid(Graph& g, Var a) {
  Tensor out = detail::map(g.value(a), detail::stable_sigmoid);
  return g.record(std::move(out), {a.id}, [a](Graph& gr, std::size_t self) {
    const Tensor go = gr.output_grad(self);
    const Tensor y = gr.value(self);
    Tensor& ga = gr.grad_accumulator(a.id);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i] * (1.0 - y[i]);
  });
}

/// Row-wise softmax with max-shift. Requires at least two columns.
inline Var softmax_rows(Graph& g, Var a) {
  const Tensor& x = g.value(a);
  require(x.rank() == 2, "softmax_rows: input must be a matrix");
  const std::size_t M = x.rows(), C = x.cols();
  require(C >= 2, "softmax_rows: need at least 2 columns");
  Tensor out(x.shape());
  for (std::size_t r = 0; r < M; ++r) {
    double mx = x.at(r, 0);
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x.at(r, c));
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      out.at(r, c) = std::exp(x.at(r, c) - mx);
      total += out.at(r, c);
    }
    for (std::size_t c = 0; c < C; ++c) out.at(r, c) /= total;
  }
  return g.record(std::move(out), {a.id}, [a, M, C](Graph& gr, std::size_t self) {
    const Tensor go = gr.output_grad(self);
    const Tensor y = gr.value(self);
    Tensor& ga = gr.grad_accumulator(a.id);
    for (std::size_t r = 0; r < M; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += go.at(r, c) * y.at(r, c);
      for (std::size_t c = 0; c < C; ++c) ga.at(r, c) += y.at(r, c) * (go.at(r, c) - dot);
    }
  });
}

/// Row indices of the k largest entries of every column, ordered by value
/// descending; equal values keep the lower row index first.
inline std::vector<std::vector<std::size_t>> topk_select(const Tensor& m, std::size_t k) {
  const std::size_t M = m.rows(), C = m.cols();
  std::vector<std::vector<std::size_t>> selected(C);
  std::vector<std::size_t> order(M);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t r = 0; r < M; ++r) order[r] = r;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t lhs, std::size_t rhs) { return m.at(lhs, c) > m.at(rhs, c); });
    selected[c].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return selected;
}

/// Column-wise mean of the k largest entries; M x C in, 1 x C out.
/// k = 1 is the column max, k = M the column mean. The selected rows are kept
/// on the node (Graph::selection) and receive gradient 1/k; all other rows 0.
inline Var topk_mean_columns(Graph& g, Var a, std::size_t k) {
  const Tensor& x = g.value(a);
  require(x.rank() == 2, "topk_mean_columns: input must be a matrix");
  const std::size_t M = x.rows(), C = x.cols();
  require(k >= 1 && k <= M, "topk_mean_columns: k=" + std::to_string(k) + " outside [1, " + std::to_string(M) + "]");

  auto selected = topk_select(x, k);
  Tensor out({1, C});
  std::vector<std::size_t> rows_in_order;
  for (std::size_t c = 0; c < C; ++c) {
    // Sum in ascending row order so k = M reproduces the plain column mean exactly.
    rows_in_order = selected[c];
    std::sort(rows_in_order.begin(), rows_in_order.end());
    double acc = 0.0;
    for (auto r : rows_in_order) acc += x.at(r, c);
    out[c] = acc / static_cast<double>(k);
  }
  Var result = g.record(std::move(out), {a.id}, [a, k](Graph& gr, std::size_t self) {
    const Tensor go = gr.output_grad(self);
    const auto sel = gr.selection(Var{self});
    Tensor& ga = gr.grad_accumulator(a.id);
    for (std::size_t c = 0; c < sel.size(); ++c) {
      const double share = go[c] / static_cast<double>(k);
      for (auto r : sel[c]) ga.at(r, c) += share;
    }
  });
  g.set_selection(result, std::move(selected));
  return result;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

using ScalarFn = std::function<Var(Graph&, std::span<const Var>)>;

namespace detail {

inline double evaluate_scalar(const ScalarFn& f, const std::vector<Tensor>& params) {
  Graph g;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(g.leaf(p));
  const Var out = f(g, vars);
  const double v = g.value(out).item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
  return v;
}

}  // namespace detail

/// Largest |analytic - central difference| / max(1, |central difference|) over
/// every entry of every parameter.
inline double grad_check(const ScalarFn& f, std::vector<Tensor> params, double h = 1e-5) {
  Graph g;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(g.leaf(p));
  const Var out = f(g, vars);
  if (!std::isfinite(g.value(out).item())) throw NumericError("grad_check: non-finite function value");
  g.backward(out);

  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor analytic = g.grad(vars[p]);
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      if (!std::isfinite(analytic[i])) throw NumericError("grad_check: non-finite analytic gradient");
      const double saved = params[p][i];
      params[p][i] = saved + h;
      const double up = detail::evaluate_scalar(f, params);
      params[p][i] = saved - h;
      const double down = detail::evaluate_scalar(f, params);
      params[p][i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace milkit
