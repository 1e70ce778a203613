#pragma once

// Tape-based reverse-mode automatic differentiation.
//
// A Graph owns every intermediate value. Nodes are appended as operations
// execute, so the node list is always in topological order and backward()
// is a single reverse sweep. Binary elementwise ops broadcast a [1,n] row,
// an [m,1] column or a scalar against an [m,n] operand.

#include "cotd/tensor.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace cotd {

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
};

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  Tanh,
  Relu,
  Exp,
  Log,
  Square,
  Clamp,
  Sum,
  Mean,
  RowSum,
  SliceCols,
  ConcatCols,
};

class Graph {
 public:
  Var constant(Tensor t) { return push(Op::Leaf, std::move(t), -1, -1, false); }
  Var parameter(Tensor t) { return push(Op::Leaf, std::move(t), -1, -1, true); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }

  /// Gradient of the last backward() loss. Zero-filled for nodes the loss
  /// does not depend on.
  const Tensor& grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (!n.grad) n.grad = Tensor(n.value.shape(), 0.0);
    return *n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var loss);

  // Primitive operations. Free-function wrappers below are the public API.
  Var matmul(Var a, Var b);
  Var binary(Op op, Var a, Var b);
  Var unary(Op op, Var a, double c0 = 0.0, double c1 = 0.0);
  Var reduce(Op op, Var a);
  Var slice_cols(Var a, std::size_t begin, std::size_t end);
  Var concat_cols(Var a, Var b);

 private:
  struct Node {
    Op op = Op::Leaf;
    Tensor value;
    mutable std::optional<Tensor> grad;
    long a = -1;
    long b = -1;
    double c0 = 0.0;
    double c1 = 0.0;
    bool requires_grad = false;
  };

  Var push(Op op, Tensor value, long a, long b, bool requires_grad, double c0 = 0.0,
           double c1 = 0.0) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.a = a;
    n.b = b;
    n.c0 = c0;
    n.c1 = c1;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Tensor& grad_slot(long id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad) n.grad = Tensor(n.value.shape(), 0.0);
    return *n.grad;
  }

  bool needs(long id) const { return id >= 0 && nodes_[static_cast<std::size_t>(id)].requires_grad; }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(*this); }
inline const Tensor& Var::grad() const { return graph->grad(*this); }

namespace detail {

struct Broadcast {
  std::size_t rows = 0, cols = 0;
  Shape shape;
};

inline Broadcast broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  Broadcast r;
  r.rows = std::max(a.rows(), b.rows());
  r.cols = std::max(a.cols(), b.cols());
  auto fits = [&](const Tensor& t) {
    return (t.rows() == 1 || t.rows() == r.rows) && (t.cols() == 1 || t.cols() == r.cols);
  };
  if (!fits(a) || !fits(b))
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                         shape_str(b.shape()));
  if (a.shape() == b.shape())
    r.shape = a.shape();
  else if (a.size() == r.rows * r.cols)
    r.shape = a.shape();
  else if (b.size() == r.rows * r.cols)
    r.shape = b.shape();
  else
    r.shape = Shape{r.rows, r.cols};
  return r;
}

/// Flat index into a broadcast operand for output element (r, c).
inline std::size_t bidx(const Tensor& t, std::size_t r, std::size_t c) {
  return (t.rows() == 1 ? 0 : r) * t.cols() + (t.cols() == 1 ? 0 : c);
}

}  // namespace detail

inline Var Graph::matmul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.rank() != 2 || bv.rank() != 2)
    throw DimensionError("matmul: operands must be rank 2, got " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
  Tensor out = kernels::matmul(av, bv);
  const bool rg = needs(static_cast<long>(a.id)) || needs(static_cast<long>(b.id));
  return push(Op::MatMul, std::move(out), static_cast<long>(a.id), static_cast<long>(b.id), rg);
}

inline Var Graph::binary(Op op, Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  const char* name = op == Op::Add ? "add" : op == Op::Sub ? "sub" : "mul";
  auto bc = detail::broadcast_shape(av, bv, name);
  Tensor out(bc.shape);
  auto o = out.data();
  for (std::size_t r = 0; r < bc.rows; ++r) {
    for (std::size_t c = 0; c < bc.cols; ++c) {
      const double x = av[detail::bidx(av, r, c)];
      const double y = bv[detail::bidx(bv, r, c)];
      double v = 0.0;
      switch (op) {
        case Op::Add: v = x + y; break;
        case Op::Sub: v = x - y; break;
        case Op::Mul: v = x * y; break;
        default: throw ContractError("binary: not a binary op");
      }
      o[r * bc.cols + c] = v;
    }
  }
  const bool rg = needs(static_cast<long>(a.id)) || needs(static_cast<long>(b.id));
  return push(op, std::move(out), static_cast<long>(a.id), static_cast<long>(b.id), rg);
}

inline Var Graph::unary(Op op, Var a, double c0, double c1) {
  Tensor out = value(a);
  for (double& x : out.values()) {
    switch (op) {
      case Op::Scale: x *= c0; break;
      case Op::Tanh: x = std::tanh(x); break;
      case Op::Relu: x = x > 0.0 ? x : 0.0; break;
      case Op::Exp: x = std::exp(x); break;
      case Op::Log:
        if (!(x > 0.0)) throw ContractError("log: non-positive argument");
        x = std::log(x);
        break;
      case Op::Square: x = x * x; break;
      case Op::Clamp: x = std::clamp(x, c0, c1); break;
      default: throw ContractError("unary: not a unary op");
    }
  }
  return push(op, std::move(out), static_cast<long>(a.id), -1, needs(static_cast<long>(a.id)), c0, c1);
}

inline Var Graph::reduce(Op op, Var a) {
  const Tensor& av = value(a);
  Tensor out;
  if (op == Op::Sum || op == Op::Mean) {
    double s = 0.0;
    for (double x : av.values()) s += x;
    if (op == Op::Mean) s /= static_cast<double>(av.size());
    out = Tensor::scalar(s);
  } else if (op == Op::RowSum) {
    out = Tensor(Shape{av.rows(), 1});
    for (std::size_t r = 0; r < av.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < av.cols(); ++c) s += av[r * av.cols() + c];
      out[r] = s;
    }
  } else {
    throw ContractError("reduce: not a reduction");
  }
  return push(op, std::move(out), static_cast<long>(a.id), -1, needs(static_cast<long>(a.id)));
}

inline Var Graph::slice_cols(Var a, std::size_t begin, std::size_t end) {
  Tensor out = cotd::slice_cols(value(a), begin, end);
  return push(Op::SliceCols, std::move(out), static_cast<long>(a.id), -1,
              needs(static_cast<long>(a.id)), static_cast<double>(begin), static_cast<double>(end));
}

inline Var Graph::concat_cols(Var a, Var b) {
  Tensor out = cotd::concat_cols(value(a), value(b));
  const bool rg = needs(static_cast<long>(a.id)) || needs(static_cast<long>(b.id));
  return push(Op::ConcatCols, std::move(out), static_cast<long>(a.id), static_cast<long>(b.id), rg);
}

inline void Graph::backward(Var loss) {
  if (loss.graph != this) throw ContractError("backward: loss belongs to another graph");
  const Tensor& lv = value(loss);
  if (lv.size() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
  for (auto& n : nodes_) n.grad.reset();
  grad_slot(static_cast<long>(loss.id)).fill(1.0);

  for (std::size_t k = loss.id + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (n.op == Op::Leaf || !n.requires_grad || !n.grad) continue;
    const Tensor g = *n.grad;
    const long ia = n.a, ib = n.b;

    switch (n.op) {
      case Op::MatMul: {
        const Tensor& av = nodes_[static_cast<std::size_t>(ia)].value;
        const Tensor& bv = nodes_[static_cast<std::size_t>(ib)].value;
        if (needs(ia)) kernels::view(grad_slot(ia)) += kernels::view(kernels::matmul_nt(g, bv));
        if (needs(ib)) kernels::view(grad_slot(ib)) += kernels::view(kernels::matmul_tn(av, g));
        break;
      }
      case Op::Add:
      case Op::Sub:
      case Op::Mul: {
        const Tensor& av = nodes_[static_cast<std::size_t>(ia)].value;
        const Tensor& bv = nodes_[static_cast<std::size_t>(ib)].value;
        const std::size_t R = std::max(av.rows(), bv.rows());
        const std::size_t C = std::max(av.cols(), bv.cols());
        Tensor* ga = needs(ia) ? &grad_slot(ia) : nullptr;
        Tensor* gb = needs(ib) ? &grad_slot(ib) : nullptr;
        for (std::size_t r = 0; r < R; ++r) {
          for (std::size_t c = 0; c < C; ++c) {
            const double go = g[r * C + c];
            const std::size_t ja = detail::bidx(av, r, c), jb = detail::bidx(bv, r, c);
            if (n.op == Op::Add) {
              if (ga) (*ga)[ja] += go;
              if (gb) (*gb)[jb] += go;
            } else if (n.op == Op::Sub) {
              if (ga) (*ga)[ja] += go;
              if (gb) (*gb)[jb] -= go;
            } else {
              if (ga) (*ga)[ja] += go * bv[jb];
              if (gb) (*gb)[jb] += go * av[ja];
            }
          }
        }
        break;
      }
      case Op::Scale:
      case Op::Tanh:
      case Op::Relu:
      case Op::Exp:
      case Op::Log:
      case Op::Square:
      case Op::Clamp: {
        if (!needs(ia)) break;
        const Tensor& x = nodes_[static_cast<std::size_t>(ia)].value;
        Tensor& gx = grad_slot(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
          double d = 0.0;
          switch (n.op) {
            case Op::Scale: d = n.c0; break;
            case Op::Tanh: d = 1.0 - n.value[i] * n.value[i]; break;
            case Op::Relu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
            case Op::Exp: d = n.value[i]; break;
            case Op::Log: d = 1.0 / x[i]; break;
            case Op::Square: d = 2.0 * x[i]; break;
            case Op::Clamp: d = (x[i] > n.c0 && x[i] < n.c1) ? 1.0 : 0.0; break;
            default: break;
          }
          gx[i] += g[i] * d;
        }
        break;
      }
      case Op::Sum:
      case Op::Mean: {
        if (!needs(ia)) break;
        Tensor& gx = grad_slot(ia);
        const double scale = n.op == Op::Mean ? 1.0 / static_cast<double>(gx.size()) : 1.0;
        for (double& v : gx.values()) v += g[0] * scale;
        break;
      }
      case Op::RowSum: {
        if (!needs(ia)) break;
        Tensor& gx = grad_slot(ia);
        const std::size_t C = gx.cols();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i / C];
        break;
      }
      case Op::SliceCols: {
        if (!needs(ia)) break;
        Tensor& gx = grad_slot(ia);
        const auto begin = static_cast<std::size_t>(n.c0);
        const std::size_t w = g.cols(), C = gx.cols();
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) gx[r * C + begin + c] += g[r * w + c];
        break;
      }
      case Op::ConcatCols: {
        const std::size_t ca = nodes_[static_cast<std::size_t>(ia)].value.cols();
        const std::size_t cb = nodes_[static_cast<std::size_t>(ib)].value.cols();
        for (std::size_t r = 0; r < g.rows(); ++r) {
          if (needs(ia)) {
            Tensor& gx = grad_slot(ia);
            for (std::size_t c = 0; c < ca; ++c) gx[r * ca + c] += g[r * (ca + cb) + c];
          }
          if (needs(ib)) {
            Tensor& gy = grad_slot(ib);
            for (std::size_t c = 0; c < cb; ++c) gy[r * cb + c] += g[r * (ca + cb) + ca + c];
          }
        }
        break;
      }
      case Op::Leaf: break;
    }
  }
}

// Public operation API.

inline Var matmul(Var a, Var b) { return a.graph->matmul(a, b); }
inline Var operator+(Var a, Var b) { return a.graph->binary(Op::Add, a, b); }
inline Var operator-(Var a, Var b) { return a.graph->binary(Op::Sub, a, b); }
inline Var operator*(Var a, Var b) { return a.graph->binary(Op::Mul, a, b); }
inline Var scale(Var a, double c) { return a.graph->unary(Op::Scale, a, c); }
inline Var operator-(Var a) { return scale(a, -1.0); }
inline Var tanh(Var a) { return a.graph->unary(Op::Tanh, a); }
inline Var relu(Var a) { return a.graph->unary(Op::Relu, a); }
inline Var exp(Var a) { return a.graph->unary(Op::Exp, a); }
inline Var log(Var a) { return a.graph->unary(Op::Log, a); }
inline Var square(Var a) { return a.graph->unary(Op::Square, a); }
inline Var clamp(Var a, double lo, double hi) { return a.graph->unary(Op::Clamp, a, lo, hi); }
inline Var sum(Var a) { return a.graph->reduce(Op::Sum, a); }
inline Var mean(Var a) { return a.graph->reduce(Op::Mean, a); }
inline Var row_sum(Var a) { return a.graph->reduce(Op::RowSum, a); }
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  return a.graph->slice_cols(a, begin, end);
}
inline Var concat_cols(Var a, Var b) { return a.graph->concat_cols(a, b); }

/// Row-wise log-softmax, composed from primitives. The row max is subtracted
/// as a constant for stability; it cancels analytically.
inline Var log_softmax(Var logits) {
  const Tensor& x = logits.value();
  Tensor shift(Shape{x.rows(), 1});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double m = x[r * x.cols()];
    for (std::size_t c = 1; c < x.cols(); ++c) m = std::max(m, x[r * x.cols() + c]);
    shift[r] = m;
  }
  Var z = logits - logits.graph->constant(std::move(shift));
  return z - log(row_sum(exp(z)));
}

}  // namespace cotd
