#pragma once

// Reverse-mode automatic differentiation over a per-forward-pass tape.
//
// Every operation records a node holding its kind, input node ids and output
// tensor; backward() walks the tape in reverse id order, so gradient
// accumulation is deterministic.  Leaf gradients persist across backward
// calls until zero_grad(); running backward twice therefore accumulates
// exactly twice the gradient.

#include <cmath>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stv/tensor.hpp"

namespace stv::ad {

enum class EwKind {
  add,
  sub,
  hadamard_mul,
  scale,
  sqrt_,
  square,
  relu,
  hinge_clamp,
  sum,
  mean,
};

inline const char* ew_kind_name(EwKind k) {
  switch (k) {
    case EwKind::add: return "add";
    case EwKind::sub: return "sub";
    case EwKind::hadamard_mul: return "hadamard_mul";
    case EwKind::scale: return "scale";
    case EwKind::sqrt_: return "sqrt";
    case EwKind::square: return "square";
    case EwKind::relu: return "relu";
    case EwKind::hinge_clamp: return "hinge_clamp";
    case EwKind::sum: return "sum";
    case EwKind::mean: return "mean";
  }
  return "?";
}

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape;

/// Accumulates d(loss)/d(inputs) given d(loss)/d(output).  `flow` indexes
/// per-node gradient buffers of the current backward pass.
using BackwardFn = std::function<void(Tape&, const std::vector<double>& gout,
                                      std::vector<std::vector<double>>& flow)>;

class Tape {
 public:
  struct Node {
    std::string kind;
    std::vector<int> inputs;
    Tensor value;
    BackwardFn backward;
    bool needs_grad = false;
  };

  Var leaf(Tensor t) {
    bool rg = t.requires_grad;
    return record("leaf", {}, std::move(t), nullptr, rg);
  }

  Var record(std::string kind, std::vector<int> inputs, Tensor value,
             BackwardFn backward, bool force_grad = false) {
    bool ng = force_grad;
    for (int i : inputs) ng = ng || node(i).needs_grad;
    nodes_.push_back(Node{std::move(kind), std::move(inputs), std::move(value),
                          std::move(backward), ng});
    leaf_grads_.emplace_back();
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  const Tensor& value(Var v) const { return node(v.id).value; }
  bool needs_grad(Var v) const { return node(v.id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  std::size_t grad_node_count() const {
    std::size_t n = 0;
    for (const auto& nd : nodes_) n += nd.needs_grad ? 1 : 0;
    return n;
  }

  /// Accumulated gradient of a requires_grad leaf (empty until backward ran).
  const std::vector<double>& grad(Var v) const {
    return leaf_grads_.at(static_cast<std::size_t>(v.id));
  }

  Tensor grad_tensor(Var v) const {
    const Node& n = node(v.id);
    Tensor g(n.value.shape);
    const auto& acc = grad(v);
    if (!acc.empty()) g.data = acc;
    return g;
  }

  void zero_grad() {
    for (auto& g : leaf_grads_) g.clear();
  }

  void backward(Var loss) {
    if (!loss.valid() || static_cast<std::size_t>(loss.id) >= nodes_.size())
      throw DomainError("backward: loss node is not part of this graph");
    if (!node(loss.id).value.is_scalar())
      throw ShapeError("backward: loss must be scalar, got shape " +
                       shape_str(node(loss.id).value.shape));

    std::vector<std::vector<double>> flow(nodes_.size());
    flow[static_cast<std::size_t>(loss.id)].assign(1, 1.0);

    for (int id = loss.id; id >= 0; --id) {
      auto& g = flow[static_cast<std::size_t>(id)];
      const Node& n = nodes_[static_cast<std::size_t>(id)];
      if (g.empty() || !n.needs_grad) continue;
      if (n.backward) n.backward(*this, g, flow);
      if (n.inputs.empty()) {
        // requires_grad leaf: fold into the persistent accumulator
        auto& acc = leaf_grads_[static_cast<std::size_t>(id)];
        if (acc.empty()) acc.assign(n.value.numel(), 0.0);
        for (std::size_t k = 0; k < g.size(); ++k) acc[k] += g[k];
      }
      g.clear();
    }
  }

  /// Ensures a flow buffer exists for `id` and returns it.
  static std::vector<double>& flow_of(std::vector<std::vector<double>>& flow, int id,
                                      std::size_t n) {
    auto& f = flow[static_cast<std::size_t>(id)];
    if (f.empty()) f.assign(n, 0.0);
    return f;
  }

 private:
  // deques keep node/grad references valid while new nodes are recorded
  std::deque<Node> nodes_;
  std::deque<std::vector<double>> leaf_grads_;
};

// --- elementwise / reduction ops --------------------------------------------

namespace detail {

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                     " vs " + shape_str(b.shape));
}

}  // namespace detail

inline Var ew_binary(Tape& t, EwKind kind, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  detail::check_same_shape(ew_kind_name(kind), av, bv);
  Tensor out(av.shape);
  const std::size_t n = out.numel();
  switch (kind) {
    case EwKind::add:
      for (std::size_t i = 0; i < n; ++i) out.data[i] = av.data[i] + bv.data[i];
      break;
    case EwKind::sub:
      for (std::size_t i = 0; i < n; ++i) out.data[i] = av.data[i] - bv.data[i];
      break;
    case EwKind::hadamard_mul:
      for (std::size_t i = 0; i < n; ++i) out.data[i] = av.data[i] * bv.data[i];
      break;
    default:
      throw DomainError(std::string("ew_binary: ") + ew_kind_name(kind) +
                        " is not a binary kind");
  }
  int aid = a.id, bid = b.id;
  BackwardFn bw;
  switch (kind) {
    case EwKind::add:
      bw = [aid, bid, n](Tape& tp, const std::vector<double>& g, auto& flow) {
        if (tp.node(aid).needs_grad) {
          auto& fa = Tape::flow_of(flow, aid, n);
          for (std::size_t i = 0; i < n; ++i) fa[i] += g[i];
        }
        if (tp.node(bid).needs_grad) {
          auto& fb = Tape::flow_of(flow, bid, n);
          for (std::size_t i = 0; i < n; ++i) fb[i] += g[i];
        }
      };
      break;
    case EwKind::sub:
      bw = [aid, bid, n](Tape& tp, const std::vector<double>& g, auto& flow) {
        if (tp.node(aid).needs_grad) {
          auto& fa = Tape::flow_of(flow, aid, n);
          for (std::size_t i = 0; i < n; ++i) fa[i] += g[i];
        }
        if (tp.node(bid).needs_grad) {
          auto& fb = Tape::flow_of(flow, bid, n);
          for (std::size_t i = 0; i < n; ++i) fb[i] -= g[i];
        }
      };
      break;
    default:  // hadamard
      bw = [aid, bid, n](Tape& tp, const std::vector<double>& g, auto& flow) {
        const auto& av = tp.node(aid).value.data;
        const auto& bv = tp.node(bid).value.data;
        if (tp.node(aid).needs_grad) {
          auto& fa = Tape::flow_of(flow, aid, n);
          for (std::size_t i = 0; i < n; ++i) fa[i] += g[i] * bv[i];
        }
        if (tp.node(bid).needs_grad) {
          auto& fb = Tape::flow_of(flow, bid, n);
          for (std::size_t i = 0; i < n; ++i) fb[i] += g[i] * av[i];
        }
      };
      break;
  }
  return t.record(ew_kind_name(kind), {aid, bid}, std::move(out), std::move(bw));
}

inline Var ew_unary(Tape& t, EwKind kind, Var a, double param = 0.0) {
  const Tensor& av = t.value(a);
  const std::size_t n = av.numel();
  Tensor out;
  switch (kind) {
    case EwKind::scale: {
      out = Tensor(av.shape);
      for (std::size_t i = 0; i < n; ++i) out.data[i] = av.data[i] * param;
      break;
    }
    case EwKind::sqrt_: {
      out = Tensor(av.shape);
      for (std::size_t i = 0; i < n; ++i) {
        if (av.data[i] < 0.0)
          throw DomainError("sqrt: negative entry " + std::to_string(av.data[i]));
        out.data[i] = std::sqrt(av.data[i]);
      }
      break;
    }
    case EwKind::square: {
      out = Tensor(av.shape);
      for (std::size_t i = 0; i < n; ++i) out.data[i] = av.data[i] * av.data[i];
      break;
    }
    case EwKind::relu:
    case EwKind::hinge_clamp: {
      out = Tensor(av.shape);
      for (std::size_t i = 0; i < n; ++i) out.data[i] = av.data[i] > 0.0 ? av.data[i] : 0.0;
      break;
    }
    case EwKind::sum: {
      double s = 0.0;
      for (double v : av.data) s += v;
      out = Tensor::scalar(s);
      break;
    }
    case EwKind::mean: {
      double s = 0.0;
      for (double v : av.data) s += v;
      out = Tensor::scalar(s / static_cast<double>(n));
      break;
    }
    default:
      throw DomainError(std::string("ew_unary: ") + ew_kind_name(kind) +
                        " is not a unary kind");
  }
  int aid = a.id;
  BackwardFn bw;
  switch (kind) {
    case EwKind::scale:
      bw = [aid, n, param](Tape& tp, const std::vector<double>& g, auto& flow) {
        if (!tp.node(aid).needs_grad) return;
        auto& fa = Tape::flow_of(flow, aid, n);
        for (std::size_t i = 0; i < n; ++i) fa[i] += g[i] * param;
      };
      break;
    case EwKind::sqrt_:
      // subgradient 0 at the x == 0 kink
      bw = [aid, n](Tape& tp, const std::vector<double>& g, auto& flow) {
        if (!tp.node(aid).needs_grad) return;
        const auto& xv = tp.node(aid).value.data;
        auto& fa = Tape::flow_of(flow, aid, n);
        for (std::size_t i = 0; i < n; ++i)
          if (xv[i] > 0.0) fa[i] += g[i] * 0.5 / std::sqrt(xv[i]);
      };
      break;
    case EwKind::square:
      bw = [aid, n](Tape& tp, const std::vector<double>& g, auto& flow) {
        if (!tp.node(aid).needs_grad) return;
        const auto& xv = tp.node(aid).value.data;
        auto& fa = Tape::flow_of(flow, aid, n);
        for (std::size_t i = 0; i < n; ++i) fa[i] += g[i] * 2.0 * xv[i];
      };
      break;
    case EwKind::relu:
    case EwKind::hinge_clamp:
      // derivative 0 at exactly the kink
      bw = [aid, n](Tape& tp, const std::vector<double>& g, auto& flow) {
        if (!tp.node(aid).needs_grad) return;
        const auto& xv = tp.node(aid).value.data;
        auto& fa = Tape::flow_of(flow, aid, n);
        for (std::size_t i = 0; i < n; ++i)
          if (xv[i] > 0.0) fa[i] += g[i];
      };
      break;
    case EwKind::sum:
      bw = [aid, n](Tape& tp, const std::vector<double>& g, auto& flow) {
        if (!tp.node(aid).needs_grad) return;
        auto& fa = Tape::flow_of(flow, aid, n);
        for (std::size_t i = 0; i < n; ++i) fa[i] += g[0];
      };
      break;
    case EwKind::mean:
      bw = [aid, n](Tape& tp, const std::vector<double>& g, auto& flow) {
        if (!tp.node(aid).needs_grad) return;
        auto& fa = Tape::flow_of(flow, aid, n);
        const double s = g[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) fa[i] += s;
      };
      break;
    default:
      break;
  }
  return t.record(ew_kind_name(kind), {aid}, std::move(out), std::move(bw));
}

inline Var add(Tape& t, Var a, Var b) { return ew_binary(t, EwKind::add, a, b); }
inline Var sub(Tape& t, Var a, Var b) { return ew_binary(t, EwKind::sub, a, b); }
inline Var mul(Tape& t, Var a, Var b) { return ew_binary(t, EwKind::hadamard_mul, a, b); }
inline Var scale(Tape& t, Var a, double s) { return ew_unary(t, EwKind::scale, a, s); }
inline Var sqrt(Tape& t, Var a) { return ew_unary(t, EwKind::sqrt_, a); }
inline Var square(Tape& t, Var a) { return ew_unary(t, EwKind::square, a); }
inline Var relu(Tape& t, Var a) { return ew_unary(t, EwKind::relu, a); }
inline Var hinge_clamp(Tape& t, Var a) { return ew_unary(t, EwKind::hinge_clamp, a); }
inline Var sum(Tape& t, Var a) { return ew_unary(t, EwKind::sum, a); }
inline Var mean(Tape& t, Var a) { return ew_unary(t, EwKind::mean, a); }

/// y = s * x + c, elementwise.
inline Var affine(Tape& t, Var a, double s, double c) {
  const Tensor& av = t.value(a);
  const std::size_t n = av.numel();
  Tensor out(av.shape);
  for (std::size_t i = 0; i < n; ++i) out.data[i] = s * av.data[i] + c;
  int aid = a.id;
  return t.record("affine", {aid}, std::move(out),
                  [aid, n, s](Tape& tp, const std::vector<double>& g, auto& flow) {
                    if (!tp.node(aid).needs_grad) return;
                    auto& fa = Tape::flow_of(flow, aid, n);
                    for (std::size_t i = 0; i < n; ++i) fa[i] += g[i] * s;
                  });
}

// --- matmul ------------------------------------------------------------------

inline Var matmul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.rank() != 2 || bv.rank() != 2)
    throw ShapeError("matmul: rank-2 operands required, got " + shape_str(av.shape) +
                     " and " + shape_str(bv.shape));
  if (av.shape[1] != bv.shape[0])
    throw ShapeError("matmul: inner dimensions " + shape_str(av.shape) + " x " +
                     shape_str(bv.shape) + " do not match");
  const std::size_t m = av.shape[0], k = av.shape[1], p = bv.shape[1];
  Tensor out({m, p});
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = &av.data[i * k];
    double* orow = &out.data[i * p];
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      const double* brow = &bv.data[kk * p];
      for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
    }
  }
  int aid = a.id, bid = b.id;
  return t.record(
      "matmul", {aid, bid}, std::move(out),
      [aid, bid, m, k, p](Tape& tp, const std::vector<double>& g, auto& flow) {
        const auto& av2 = tp.node(aid).value.data;
        const auto& bv2 = tp.node(bid).value.data;
        if (tp.node(aid).needs_grad) {
          auto& fa = Tape::flow_of(flow, aid, m * k);
          // dA = G * B^T
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
              double s = 0.0;
              for (std::size_t j = 0; j < p; ++j) s += g[i * p + j] * bv2[kk * p + j];
              fa[i * k + kk] += s;
            }
        }
        if (tp.node(bid).needs_grad) {
          auto& fb = Tape::flow_of(flow, bid, k * p);
          // dB = A^T * G
          for (std::size_t kk = 0; kk < k; ++kk)
            for (std::size_t i = 0; i < m; ++i) {
              const double aik = av2[i * k + kk];
              for (std::size_t j = 0; j < p; ++j) fb[kk * p + j] += aik * g[i * p + j];
            }
        }
      });
}

// --- normalization and softmax ----------------------------------------------

inline constexpr double kL2NormEps = 1e-12;

namespace detail {

// dx = (g - y * <g, y>) / r for one row
inline void l2norm_row_backward(const double* y, const double* g, double r, double* fx,
                                std::size_t d) {
  double dot = 0.0;
  for (std::size_t i = 0; i < d; ++i) dot += g[i] * y[i];
  for (std::size_t i = 0; i < d; ++i) fx[i] += (g[i] - y[i] * dot) / r;
}

}  // namespace detail

inline Var l2_normalize(Tape& t, Var v) {
  const Tensor& xv = t.value(v);
  if (xv.rank() != 1)
    throw ShapeError("l2_normalize: rank-1 input required, got " + shape_str(xv.shape));
  const std::size_t d = xv.numel();
  double sq = 0.0;
  for (double x : xv.data) sq += x * x;
  const double r = std::sqrt(sq);
  if (r <= kL2NormEps)
    throw DomainError("l2_normalize: near-zero vector (norm " + std::to_string(r) + ")");
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < d; ++i) out.data[i] = xv.data[i] / r;
  int xid = v.id;
  return t.record("l2_normalize", {xid}, std::move(out),
                  [xid, d, r](Tape& tp, const std::vector<double>& g, auto& flow) {
                    if (!tp.node(xid).needs_grad) return;
                    const auto& xv2 = tp.node(xid).value.data;
                    auto& fx = Tape::flow_of(flow, xid, d);
                    std::vector<double> y(d);
                    for (std::size_t i = 0; i < d; ++i) y[i] = xv2[i] / r;
                    detail::l2norm_row_backward(y.data(), g.data(), r, fx.data(), d);
                  });
}

/// Row-wise L2 normalization of an [n, d] matrix.
inline Var l2_normalize_rows(Tape& t, Var m) {
  const Tensor& xv = t.value(m);
  if (xv.rank() != 2)
    throw ShapeError("l2_normalize_rows: rank-2 input required, got " + shape_str(xv.shape));
  const std::size_t n = xv.shape[0], d = xv.shape[1];
  Tensor out(xv.shape);
  std::vector<double> radii(n);
  for (std::size_t r = 0; r < n; ++r) {
    double sq = 0.0;
    for (std::size_t i = 0; i < d; ++i) sq += xv.data[r * d + i] * xv.data[r * d + i];
    radii[r] = std::sqrt(sq);
    if (radii[r] <= kL2NormEps)
      throw DomainError("l2_normalize_rows: near-zero row " + std::to_string(r));
    for (std::size_t i = 0; i < d; ++i) out.data[r * d + i] = xv.data[r * d + i] / radii[r];
  }
  int xid = m.id;
  return t.record("l2_normalize_rows", {xid}, std::move(out),
                  [xid, n, d, radii](Tape& tp, const std::vector<double>& g, auto& flow) {
                    if (!tp.node(xid).needs_grad) return;
                    const auto& xv2 = tp.node(xid).value.data;
                    auto& fx = Tape::flow_of(flow, xid, n * d);
                    std::vector<double> y(d);
                    for (std::size_t r = 0; r < n; ++r) {
                      for (std::size_t i = 0; i < d; ++i) y[i] = xv2[r * d + i] / radii[r];
                      detail::l2norm_row_backward(y.data(), &g[r * d], radii[r],
                                                  &fx[r * d], d);
                    }
                  });
}

namespace detail {

// max-subtracted softmax of one row; returns outputs into y
inline void softmax_row(const double* x, double* y, std::size_t d) {
  double mx = x[0];
  for (std::size_t i = 1; i < d; ++i) mx = x[i] > mx ? x[i] : mx;
  double z = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    y[i] = std::exp(x[i] - mx);
    z += y[i];
  }
  for (std::size_t i = 0; i < d; ++i) y[i] /= z;
}

// dx = y ⊙ (g - <g, y>)
inline void softmax_row_backward(const double* y, const double* g, double* fx,
                                 std::size_t d) {
  double dot = 0.0;
  for (std::size_t i = 0; i < d; ++i) dot += g[i] * y[i];
  for (std::size_t i = 0; i < d; ++i) fx[i] += y[i] * (g[i] - dot);
}

inline void check_finite(const char* op, const Tensor& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) throw DomainError(std::string(op) + ": non-finite input entry");
}

}  // namespace detail

inline Var softmax(Tape& t, Var v) {
  const Tensor& xv = t.value(v);
  if (xv.rank() != 1)
    throw ShapeError("softmax: rank-1 input required, got " + shape_str(xv.shape));
  detail::check_finite("softmax", xv);
  const std::size_t d = xv.numel();
  Tensor out(xv.shape);
  detail::softmax_row(xv.data.data(), out.data.data(), d);
  std::vector<double> y = out.data;
  int xid = v.id;
  return t.record("softmax", {xid}, std::move(out),
                  [xid, d, y](Tape& tp, const std::vector<double>& g, auto& flow) {
                    if (!tp.node(xid).needs_grad) return;
                    auto& fx = Tape::flow_of(flow, xid, d);
                    detail::softmax_row_backward(y.data(), g.data(), fx.data(), d);
                  });
}

/// Softmax over the last dimension of an [n, c] matrix.
inline Var softmax_rows(Tape& t, Var m) {
  const Tensor& xv = t.value(m);
  if (xv.rank() != 2)
    throw ShapeError("softmax_rows: rank-2 input required, got " + shape_str(xv.shape));
  detail::check_finite("softmax_rows", xv);
  const std::size_t n = xv.shape[0], c = xv.shape[1];
  Tensor out(xv.shape);
  for (std::size_t r = 0; r < n; ++r)
    detail::softmax_row(&xv.data[r * c], &out.data[r * c], c);
  std::vector<double> y = out.data;
  int xid = m.id;
  return t.record("softmax_rows", {xid}, std::move(out),
                  [xid, n, c, y](Tape& tp, const std::vector<double>& g, auto& flow) {
                    if (!tp.node(xid).needs_grad) return;
                    auto& fx = Tape::flow_of(flow, xid, n * c);
                    for (std::size_t r = 0; r < n; ++r)
                      detail::softmax_row_backward(&y[r * c], &g[r * c], &fx[r * c], c);
                  });
}

// --- structural ops -----------------------------------------------------------

inline Var reshape(Tape& t, Var v, Shape s) {
  const Tensor& xv = t.value(v);
  if (shape_numel(s) != xv.numel())
    throw ShapeError("reshape: cannot view " + shape_str(xv.shape) + " as " + shape_str(s));
  Tensor out;
  out.shape = std::move(s);
  out.data = xv.data;
  int xid = v.id;
  const std::size_t n = xv.numel();
  return t.record("reshape", {xid}, std::move(out),
                  [xid, n](Tape& tp, const std::vector<double>& g, auto& flow) {
                    if (!tp.node(xid).needs_grad) return;
                    auto& fx = Tape::flow_of(flow, xid, n);
                    for (std::size_t i = 0; i < n; ++i) fx[i] += g[i];
                  });
}

/// Selects rows of an [n, d] matrix; duplicate indices allowed.
inline Var gather_rows(Tape& t, Var m, std::vector<std::size_t> idx) {
  const Tensor& xv = t.value(m);
  if (xv.rank() != 2)
    throw ShapeError("gather_rows: rank-2 input required, got " + shape_str(xv.shape));
  const std::size_t n = xv.shape[0], d = xv.shape[1];
  for (std::size_t i : idx)
    if (i >= n)
      throw DomainError("gather_rows: row index " + std::to_string(i) + " out of range [0," +
                        std::to_string(n) + ")");
  Tensor out({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(&xv.data[idx[r] * d], d, &out.data[r * d]);
  int xid = m.id;
  return t.record("gather_rows", {xid}, std::move(out),
                  [xid, idx, n, d](Tape& tp, const std::vector<double>& g, auto& flow) {
                    if (!tp.node(xid).needs_grad) return;
                    auto& fx = Tape::flow_of(flow, xid, n * d);
                    for (std::size_t r = 0; r < idx.size(); ++r)
                      for (std::size_t i = 0; i < d; ++i) fx[idx[r] * d + i] += g[r * d + i];
                  });
}

/// Extracts column j of an [n, c] matrix as an [n] vector.
inline Var select_column(Tape& t, Var m, std::size_t j) {
  const Tensor& xv = t.value(m);
  if (xv.rank() != 2)
    throw ShapeError("select_column: rank-2 input required, got " + shape_str(xv.shape));
  const std::size_t n = xv.shape[0], c = xv.shape[1];
  if (j >= c) throw DomainError("select_column: column " + std::to_string(j) + " out of range");
  Tensor out({n});
  for (std::size_t r = 0; r < n; ++r) out.data[r] = xv.data[r * c + j];
  int xid = m.id;
  return t.record("select_column", {xid}, std::move(out),
                  [xid, n, c, j](Tape& tp, const std::vector<double>& g, auto& flow) {
                    if (!tp.node(xid).needs_grad) return;
                    auto& fx = Tape::flow_of(flow, xid, n * c);
                    for (std::size_t r = 0; r < n; ++r) fx[r * c + j] += g[r];
                  });
}

/// Concatenates rank-1 vectors into one rank-1 vector.
inline Var concat(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw DomainError("concat: empty input list");
  std::size_t total = 0;
  for (Var p : parts) {
    if (t.value(p).rank() != 1)
      throw ShapeError("concat: rank-1 parts required, got " + shape_str(t.value(p).shape));
    total += t.value(p).numel();
  }
  Tensor out({total});
  std::vector<int> ids;
  std::vector<std::size_t> sizes;
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& pv = t.value(p);
    std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + static_cast<long>(off));
    off += pv.numel();
    ids.push_back(p.id);
    sizes.push_back(pv.numel());
  }
  return t.record("concat", ids, std::move(out),
                  [ids, sizes](Tape& tp, const std::vector<double>& g, auto& flow) {
                    std::size_t off2 = 0;
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (tp.node(ids[k]).needs_grad) {
                        auto& f = Tape::flow_of(flow, ids[k], sizes[k]);
                        for (std::size_t i = 0; i < sizes[k]; ++i) f[i] += g[off2 + i];
                      }
                      off2 += sizes[k];
                    }
                  });
}

/// Single-kind dispatch mirroring the elementwise/reduce contract.
inline Var elementwise_and_reduce(Tape& t, EwKind kind, const std::vector<Var>& inputs,
                                  double scalar = 0.0) {
  switch (kind) {
    case EwKind::add:
    case EwKind::sub:
    case EwKind::hadamard_mul:
      if (inputs.size() != 2)
        throw DomainError(std::string(ew_kind_name(kind)) + ": expects 2 inputs");
      return ew_binary(t, kind, inputs[0], inputs[1]);
    case EwKind::scale:
      if (inputs.size() != 1) throw DomainError("scale: expects 1 input");
      return ew_unary(t, kind, inputs[0], scalar);
    default:
      if (inputs.size() != 1)
        throw DomainError(std::string(ew_kind_name(kind)) + ": expects 1 input");
      return ew_unary(t, kind, inputs[0]);
  }
}

}  // namespace stv::ad
