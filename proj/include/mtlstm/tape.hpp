#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "mtlstm/tensor.hpp"

namespace mtlstm {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid until the tape is reset.
struct Value {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& tensor() const;
  const Tensor& grad() const;
};

/// Floor applied to predicted probabilities before taking logs.
inline constexpr double kLogFloor = 1e-12;

/// Record of a forward computation enabling reverse-mode gradient
/// accumulation. Node ids are topologically ordered by construction:
/// every input id is smaller than the node that consumes it.
class Tape {
public:
  enum class Op {
    kLeaf,
    kMatMul,
    kAdd,
    kMul,
    kSigmoid,
    kTanh,
    kSoftmax,
    kConcat,
    kCrossEntropy,
    kEmbedRow,
    kScale,
    kSum,
    kSumSquares,
  };

  Value leaf(Tensor v) {
    check_finite(v, "leaf");
    return push(Op::kLeaf, {}, std::move(v));
  }

  Value leaf(const std::vector<double>& v) { return leaf(Tensor::from_vector(v)); }

  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(Value v) const { return nodes_[check(v)].value; }
  const Tensor& grad(Value v) const { return nodes_[check(v)].grad; }

  void reset() { nodes_.clear(); }

  /// Reverse topological sweep seeding d(loss)/d(loss) = 1. Nodes that do
  /// not reach the loss keep a zero gradient. Gradients accumulate
  /// additively when a node feeds multiple consumers.
  void backward(Value loss) {
    std::size_t root = check(loss);
    if (nodes_[root].value.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " +
                       nodes_[root].value.shape_str());
    }
    for (Node& n : nodes_) {
      n.grad = Tensor(n.value.shape());
    }
    nodes_[root].grad[0] = 1.0;
    for (std::size_t i = root + 1; i-- > 0;) {
      propagate(i);
    }
    for (const Node& n : nodes_) {
      check_finite(n.grad, "backward");
    }
  }

  // ---- differentiable operations ------------------------------------

  friend Value matmul(Value a, Value b);
  friend Value add(Value a, Value b);
  friend Value mul(Value a, Value b);
  friend Value sigmoid(Value a);
  friend Value tanh(Value a);
  friend Value softmax(Value a);
  friend Value concat(const std::vector<Value>& parts);
  friend Value cross_entropy(Value pred, Value truth);
  friend Value embed_row(Value table, std::size_t row);
  friend Value scale(Value a, double factor);
  friend Value sum(Value a);
  friend Value sum_squares(Value a);

private:
  struct Node {
    Op op;
    std::vector<int> inputs;
    Tensor value;
    Tensor grad;
    double scalar_arg = 0.0;
    std::size_t index_arg = 0;
  };

  std::size_t check(Value v) const {
    if (v.tape != this || v.id < 0 ||
        static_cast<std::size_t>(v.id) >= nodes_.size()) {
      throw std::logic_error("Value does not belong to this tape");
    }
    return static_cast<std::size_t>(v.id);
  }

  Value push(Op op, std::vector<int> inputs, Tensor value, double scalar_arg = 0.0,
             std::size_t index_arg = 0) {
    nodes_.push_back(Node{op, std::move(inputs), std::move(value), Tensor{},
                          scalar_arg, index_arg});
    return Value{this, static_cast<int>(nodes_.size() - 1)};
  }

  Tensor& g(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  const Tensor& v(int id) const {
    return nodes_[static_cast<std::size_t>(id)].value;
  }

  void propagate(std::size_t i) {
    Node& n = nodes_[i];
    const Tensor& go = n.grad;
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kMatMul: {
        const Tensor& a = v(n.inputs[0]);
        const Tensor& b = v(n.inputs[1]);
        Tensor& ga = g(n.inputs[0]);
        Tensor& gb = g(n.inputs[1]);
        const std::size_t m = a.rows(), k = a.cols();
        if (b.rank() == 1) {
          // C[i] = sum_j A[i,j] B[j]
          for (std::size_t r = 0; r < m; ++r) {
            const double gr = go[r];
            for (std::size_t c = 0; c < k; ++c) {
              ga(r, c) += gr * b[c];
              gb[c] += a(r, c) * gr;
            }
          }
        } else {
          const std::size_t p = b.cols();
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < k; ++c) {
              double acc = 0.0;
              for (std::size_t q = 0; q < p; ++q) acc += go(r, q) * b(c, q);
              ga(r, c) += acc;
            }
          }
          for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t q = 0; q < p; ++q) {
              double acc = 0.0;
              for (std::size_t r = 0; r < m; ++r) acc += a(r, c) * go(r, q);
              gb(c, q) += acc;
            }
          }
        }
        break;
      }
      case Op::kAdd: {
        Tensor& ga = g(n.inputs[0]);
        Tensor& gb = g(n.inputs[1]);
        for (std::size_t j = 0; j < go.size(); ++j) {
          ga[j] += go[j];
          gb[j] += go[j];
        }
        break;
      }
      case Op::kMul: {
        const Tensor& a = v(n.inputs[0]);
        const Tensor& b = v(n.inputs[1]);
        Tensor& ga = g(n.inputs[0]);
        Tensor& gb = g(n.inputs[1]);
        for (std::size_t j = 0; j < go.size(); ++j) {
          ga[j] += go[j] * b[j];
          gb[j] += go[j] * a[j];
        }
        break;
      }
      case Op::kSigmoid: {
        Tensor& ga = g(n.inputs[0]);
        for (std::size_t j = 0; j < go.size(); ++j) {
          const double s = n.value[j];
          ga[j] += go[j] * s * (1.0 - s);
        }
        break;
      }
      case Op::kTanh: {
        Tensor& ga = g(n.inputs[0]);
        for (std::size_t j = 0; j < go.size(); ++j) {
          const double t = n.value[j];
          ga[j] += go[j] * (1.0 - t * t);
        }
        break;
      }
      case Op::kSoftmax: {
        Tensor& ga = g(n.inputs[0]);
        double dot = 0.0;
        for (std::size_t j = 0; j < go.size(); ++j) dot += go[j] * n.value[j];
        for (std::size_t j = 0; j < go.size(); ++j) {
          ga[j] += n.value[j] * (go[j] - dot);
        }
        break;
      }
      case Op::kConcat: {
        std::size_t off = 0;
        for (int in : n.inputs) {
          Tensor& gi = g(in);
          for (std::size_t j = 0; j < gi.size(); ++j) gi[j] += go[off + j];
          off += gi.size();
        }
        break;
      }
      case Op::kCrossEntropy: {
        const Tensor& p = v(n.inputs[0]);
        const Tensor& t = v(n.inputs[1]);
        Tensor& gp = g(n.inputs[0]);
        Tensor& gt = g(n.inputs[1]);
        const double gs = go[0];
        for (std::size_t j = 0; j < p.size(); ++j) {
          if (p[j] > kLogFloor) gp[j] += -gs * t[j] / p[j];
          gt[j] += -gs * std::log(std::max(p[j], kLogFloor));
        }
        break;
      }
      case Op::kEmbedRow: {
        const Tensor& table = v(n.inputs[0]);
        Tensor& gt = g(n.inputs[0]);
        const std::size_t d = table.cols();
        for (std::size_t j = 0; j < d; ++j) {
          gt(n.index_arg, j) += go[j];
        }
        break;
      }
      case Op::kScale: {
        Tensor& ga = g(n.inputs[0]);
        for (std::size_t j = 0; j < go.size(); ++j) ga[j] += n.scalar_arg * go[j];
        break;
      }
      case Op::kSum: {
        Tensor& ga = g(n.inputs[0]);
        for (std::size_t j = 0; j < ga.size(); ++j) ga[j] += go[0];
        break;
      }
      case Op::kSumSquares: {
        const Tensor& a = v(n.inputs[0]);
        Tensor& ga = g(n.inputs[0]);
        for (std::size_t j = 0; j < a.size(); ++j) ga[j] += 2.0 * go[0] * a[j];
        break;
      }
    }
  }

  // deque keeps references from Value::tensor() stable while nodes append
  std::deque<Node> nodes_;
};

inline const Tensor& Value::tensor() const { return tape->value(*this); }
inline const Tensor& Value::grad() const { return tape->grad(*this); }

namespace detail {
inline Tape* same_tape(Value a, Value b, const char* where) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw std::logic_error(std::string(where) + ": operands on different tapes");
  }
  return a.tape;
}
}  // namespace detail

/// Matrix product. Accepts [m x k]*[k x n] and the matrix-vector case
/// [m x k]*[k]. No other broadcasting: explicit shapes catch wiring bugs.
inline Value matmul(Value a, Value b) {
  Tape* t = detail::same_tape(a, b, "matmul");
  const Tensor& ta = t->value(a);
  const Tensor& tb = t->value(b);
  if (ta.rank() != 2) {
    throw ShapeError("matmul: left operand must be a matrix, got " +
                     ta.shape_str());
  }
  const std::size_t m = ta.rows(), k = ta.cols();
  if (tb.rank() == 1) {
    if (tb.size() != k) {
      throw ShapeError("matmul: inner dimensions differ, " + ta.shape_str() +
                       " vs " + tb.shape_str());
    }
    Tensor out({m});
    for (std::size_t r = 0; r < m; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < k; ++c) acc += ta(r, c) * tb[c];
      out[r] = acc;
    }
    check_finite(out, "matmul");
    return t->push(Tape::Op::kMatMul, {a.id, b.id}, std::move(out));
  }
  if (tb.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ, " + ta.shape_str() +
                     " vs " + tb.shape_str());
  }
  const std::size_t p = tb.cols();
  Tensor out({m, p});
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t q = 0; q < p; ++q) {
      double acc = 0.0;
      for (std::size_t c = 0; c < k; ++c) acc += ta(r, c) * tb(c, q);
      out(r, q) = acc;
    }
  }
  check_finite(out, "matmul");
  return t->push(Tape::Op::kMatMul, {a.id, b.id}, std::move(out));
}

inline Value add(Value a, Value b) {
  Tape* t = detail::same_tape(a, b, "add");
  const Tensor& ta = t->value(a);
  const Tensor& tb = t->value(b);
  check_same_shape(ta, tb, "add");
  Tensor out(ta.shape());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = ta[j] + tb[j];
  check_finite(out, "add");
  return t->push(Tape::Op::kAdd, {a.id, b.id}, std::move(out));
}

inline Value mul(Value a, Value b) {
  Tape* t = detail::same_tape(a, b, "elementwise_mul");
  const Tensor& ta = t->value(a);
  const Tensor& tb = t->value(b);
  check_same_shape(ta, tb, "elementwise_mul");
  Tensor out(ta.shape());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = ta[j] * tb[j];
  check_finite(out, "elementwise_mul");
  return t->push(Tape::Op::kMul, {a.id, b.id}, std::move(out));
}

inline Value operator+(Value a, Value b) { return add(a, b); }

/// Elementwise logistic sigmoid; saturates instead of overflowing.
inline Value sigmoid(Value a) {
  Tape* t = a.tape;
  const Tensor& ta = t->value(a);
  Tensor out(ta.shape());
  for (std::size_t j = 0; j < out.size(); ++j) {
    const double x = ta[j];
    out[j] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                      : std::exp(x) / (1.0 + std::exp(x));
  }
  check_finite(out, "sigmoid");
  return t->push(Tape::Op::kSigmoid, {a.id}, std::move(out));
}

inline Value tanh(Value a) {
  Tape* t = a.tape;
  const Tensor& ta = t->value(a);
  Tensor out(ta.shape());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = std::tanh(ta[j]);
  check_finite(out, "tanh");
  return t->push(Tape::Op::kTanh, {a.id}, std::move(out));
}

/// Numerically stable softmax over a vector of at least two logits.
inline Value softmax(Value a) {
  Tape* t = a.tape;
  const Tensor& ta = t->value(a);
  if (ta.rank() != 1 || ta.size() < 2) {
    throw ShapeError("softmax: expects a vector of >= 2 logits, got " +
                     ta.shape_str());
  }
  double m = ta[0];
  for (std::size_t j = 1; j < ta.size(); ++j) m = std::max(m, ta[j]);
  Tensor out(ta.shape());
  double z = 0.0;
  for (std::size_t j = 0; j < ta.size(); ++j) {
    out[j] = std::exp(ta[j] - m);
    z += out[j];
  }
  for (std::size_t j = 0; j < ta.size(); ++j) out[j] /= z;
  check_finite(out, "softmax");
  return t->push(Tape::Op::kSoftmax, {a.id}, std::move(out));
}

/// Last-axis concatenation: vectors chain end to end; matrices require
/// equal leading dimensions. Gradients split back to the operands.
inline Value concat(const std::vector<Value>& parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  Tape* t = parts[0].tape;
  std::vector<int> ids;
  ids.reserve(parts.size());
  const std::size_t rank = t->value(parts[0]).rank();
  std::size_t lead = rank == 2 ? t->value(parts[0]).rows() : 0;
  std::size_t total = 0;
  for (Value p : parts) {
    detail::same_tape(parts[0], p, "concat");
    const Tensor& tp = t->value(p);
    if (tp.rank() != rank || (rank == 2 && tp.rows() != lead)) {
      throw ShapeError("concat: incompatible leading dimensions, " +
                       t->value(parts[0]).shape_str() + " vs " + tp.shape_str());
    }
    total += rank == 2 ? tp.cols() : tp.size();
    ids.push_back(p.id);
  }
  Tensor out = rank == 2 ? Tensor({lead, total}) : Tensor({total});
  if (rank == 1) {
    std::size_t off = 0;
    for (Value p : parts) {
      const Tensor& tp = t->value(p);
      for (std::size_t j = 0; j < tp.size(); ++j) out[off + j] = tp[j];
      off += tp.size();
    }
  } else {
    std::size_t off = 0;
    for (Value p : parts) {
      const Tensor& tp = t->value(p);
      for (std::size_t r = 0; r < lead; ++r) {
        for (std::size_t c = 0; c < tp.cols(); ++c) out(r, off + c) = tp(r, c);
      }
      off += tp.cols();
    }
  }
  return t->push(Tape::Op::kConcat, std::move(ids), std::move(out));
}

inline Value concat(Value a, Value b) { return concat(std::vector<Value>{a, b}); }

/// -sum_j truth[j] * ln(pred[j]); predictions are clamped at kLogFloor
/// before the log so a zero never produces -inf.
inline Value cross_entropy(Value pred, Value truth) {
  Tape* t = detail::same_tape(pred, truth, "cross_entropy");
  const Tensor& p = t->value(pred);
  const Tensor& y = t->value(truth);
  check_same_shape(p, y, "cross_entropy");
  double acc = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    acc -= y[j] * std::log(std::max(p[j], kLogFloor));
  }
  Tensor out = Tensor::scalar(acc);
  check_finite(out, "cross_entropy");
  return t->push(Tape::Op::kCrossEntropy, {pred.id, truth.id}, std::move(out));
}

/// Row lookup into an embedding matrix; the gradient scatters back into
/// that row only.
inline Value embed_row(Value table, std::size_t row) {
  Tape* t = table.tape;
  const Tensor& m = t->value(table);
  if (m.rank() != 2 || row >= m.rows()) {
    throw ShapeError("embed_row: row " + std::to_string(row) +
                     " out of range for " + m.shape_str());
  }
  Tensor out({m.cols()});
  for (std::size_t j = 0; j < m.cols(); ++j) out[j] = m(row, j);
  return t->push(Tape::Op::kEmbedRow, {table.id}, std::move(out), 0.0, row);
}

inline Value scale(Value a, double factor) {
  Tape* t = a.tape;
  const Tensor& ta = t->value(a);
  Tensor out(ta.shape());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = factor * ta[j];
  check_finite(out, "scale");
  return t->push(Tape::Op::kScale, {a.id}, std::move(out), factor);
}

inline Value sum(Value a) {
  Tape* t = a.tape;
  const Tensor& ta = t->value(a);
  double acc = 0.0;
  for (std::size_t j = 0; j < ta.size(); ++j) acc += ta[j];
  Tensor out = Tensor::scalar(acc);
  check_finite(out, "sum");
  return t->push(Tape::Op::kSum, {a.id}, std::move(out));
}

inline Value sum_squares(Value a) {
  Tape* t = a.tape;
  const Tensor& ta = t->value(a);
  double acc = 0.0;
  for (std::size_t j = 0; j < ta.size(); ++j) acc += ta[j] * ta[j];
  Tensor out = Tensor::scalar(acc);
  check_finite(out, "sum_squares");
  return t->push(Tape::Op::kSumSquares, {a.id}, std::move(out));
}

/// Central finite differences (f(x+h e_i) - f(x-h e_i)) / 2h per
/// coordinate. The verification oracle for every backward pass.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                               const Tensor& x, double h = 1e-5) {
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// Relative error with the guarded denominator used by all gradient checks.
inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

}  // namespace mtlstm
