#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mtlstm/rng.hpp"
#include "mtlstm/tape.hpp"
#include "mtlstm/tensor.hpp"

namespace mtlstm {

/// One gate's parameters: sigma(W x + U h + V c + b). The peephole matrix
/// V is full n x n, matching the plain matrix products the transition
/// functions are written with.
struct GateWeights {
  Tensor w;  // n x d
  Tensor u;  // n x n
  Tensor v;  // n x n
  Tensor b;  // n

  static GateWeights init(std::size_t input_dim, std::size_t hidden_dim,
                          Rng& rng, double stddev) {
    GateWeights g;
    g.w = random_init({hidden_dim, input_dim}, rng, stddev);
    g.u = random_init({hidden_dim, hidden_dim}, rng, stddev);
    g.v = random_init({hidden_dim, hidden_dim}, rng, stddev);
    g.b = random_init({hidden_dim}, rng, stddev);
    return g;
  }

  static Tensor random_init(std::vector<std::size_t> shape, Rng& rng,
                            double stddev) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] = rng.truncated_normal(0.0, stddev);
    }
    return t;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w", w);
    f(prefix + ".u", u);
    f(prefix + ".v", v);
    f(prefix + ".b", b);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".w", w);
    f(prefix + ".u", u);
    f(prefix + ".v", v);
    f(prefix + ".b", b);
  }
};

/// Weight standard deviation used everywhere parameters are drawn. The
/// source only fixes "truncated normal with zero mean"; 0.1 is our pick.
inline constexpr double kInitStddev = 0.1;

/// Full LSTM cell parameters: three peephole gates plus the candidate
/// pair (W_c, U_c). The candidate has no bias and no peephole term.
struct LstmWeights {
  GateWeights input, forget, output;
  Tensor w_c;  // n x d
  Tensor u_c;  // n x n

  static LstmWeights init(std::size_t input_dim, std::size_t hidden_dim,
                          Rng& rng, double stddev = kInitStddev) {
    LstmWeights w;
    w.input = GateWeights::init(input_dim, hidden_dim, rng, stddev);
    w.forget = GateWeights::init(input_dim, hidden_dim, rng, stddev);
    w.output = GateWeights::init(input_dim, hidden_dim, rng, stddev);
    w.w_c = GateWeights::random_init({hidden_dim, input_dim}, rng, stddev);
    w.u_c = GateWeights::random_init({hidden_dim, hidden_dim}, rng, stddev);
    return w;
  }

  std::size_t input_dim() const { return w_c.cols(); }
  std::size_t hidden_dim() const { return w_c.rows(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    input.visit(prefix + ".input", f);
    forget.visit(prefix + ".forget", f);
    output.visit(prefix + ".output", f);
    f(prefix + ".w_c", w_c);
    f(prefix + ".u_c", u_c);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    input.visit(prefix + ".input", f);
    forget.visit(prefix + ".forget", f);
    output.visit(prefix + ".output", f);
    f(prefix + ".w_c", w_c);
    f(prefix + ".u_c", u_c);
  }
};

// Tape-lifted views of the weight structs, valid for one tape.
struct GateParams {
  Value w, u, v, b;
};

struct LstmParams {
  GateParams input, forget, output;
  Value w_c, u_c;

  std::size_t hidden_dim() const { return w_c.tensor().rows(); }
};

inline GateParams lift(Tape& tape, const GateWeights& g) {
  return {tape.leaf(g.w), tape.leaf(g.u), tape.leaf(g.v), tape.leaf(g.b)};
}

inline LstmParams lift(Tape& tape, const LstmWeights& w) {
  return {lift(tape, w.input), lift(tape, w.forget), lift(tape, w.output),
          tape.leaf(w.w_c), tape.leaf(w.u_c)};
}

/// Hidden state h and memory cell c at one time step.
struct LstmState {
  Value h, c;
};

inline LstmState zero_state(Tape& tape, std::size_t hidden_dim) {
  return {tape.leaf(Tensor::zeros({hidden_dim})),
          tape.leaf(Tensor::zeros({hidden_dim}))};
}

/// sigma(W x + U h + V c + b). The same composition order is used by
/// every cell in the architecture so degenerate configurations stay
/// bit-identical to the plain cell.
inline Value lstm_gate(const GateParams& g, Value x, Value h_prev,
                       Value c_prev) {
  return sigmoid(
      add(add(add(matmul(g.w, x), matmul(g.u, h_prev)), matmul(g.v, c_prev)),
          g.b));
}

/// One step of the peephole LSTM transition.
inline LstmState lstm_step(const LstmParams& p, Value x,
                           const LstmState& prev) {
  Value i = lstm_gate(p.input, x, prev.h, prev.c);
  Value f = lstm_gate(p.forget, x, prev.h, prev.c);
  Value o = lstm_gate(p.output, x, prev.h, prev.c);
  Value cand = tanh(add(matmul(p.w_c, x), matmul(p.u_c, prev.h)));
  Value c = add(mul(f, prev.c), mul(i, cand));
  Value h = mul(o, tanh(c));
  return {h, c};
}

/// Vanilla recurrent baseline.
struct RnnWeights {
  Tensor w;  // n x d
  Tensor u;  // n x n
  Tensor b;  // n

  static RnnWeights init(std::size_t input_dim, std::size_t hidden_dim,
                         Rng& rng, double stddev = kInitStddev) {
    return {GateWeights::random_init({hidden_dim, input_dim}, rng, stddev),
            GateWeights::random_init({hidden_dim, hidden_dim}, rng, stddev),
            GateWeights::random_init({hidden_dim}, rng, stddev)};
  }
};

struct RnnParams {
  Value w, u, b;
};

inline RnnParams lift(Tape& tape, const RnnWeights& w) {
  return {tape.leaf(w.w), tape.leaf(w.u), tape.leaf(w.b)};
}

/// h_t = tanh(W x_t + U h_{t-1} + b)
inline Value rnn_step(const RnnParams& p, Value x, Value h_prev) {
  return tanh(add(add(matmul(p.w, x), matmul(p.u, h_prev)), p.b));
}

/// Left fold of lstm_step over a sequence, starting from the zero state
/// unless an initial state is supplied. Returns all T states.
inline std::vector<LstmState> lstm_forward(
    const LstmParams& p, const std::vector<Value>& xs,
    std::optional<LstmState> initial = std::nullopt) {
  if (xs.empty()) throw ShapeError("lstm_forward: empty sequence");
  Tape& tape = *xs[0].tape;
  LstmState state =
      initial.has_value() ? *initial : zero_state(tape, p.hidden_dim());
  std::vector<LstmState> states;
  states.reserve(xs.size());
  for (Value x : xs) {
    state = lstm_step(p, x, state);
    states.push_back(state);
  }
  return states;
}

/// Bidirectional pass: the backward direction consumes the reversed
/// sequence and its states are re-reversed so output t is
/// h_fwd_t (+) h_bwd_t in original time order.
inline std::vector<Value> bilstm_forward(const LstmParams& fwd,
                                         const LstmParams& bwd,
                                         const std::vector<Value>& xs) {
  if (xs.empty()) throw ShapeError("bilstm_forward: empty sequence");
  std::vector<Value> reversed(xs.rbegin(), xs.rend());
  std::vector<LstmState> f = lstm_forward(fwd, xs);
  std::vector<LstmState> b = lstm_forward(bwd, reversed);
  std::vector<Value> out;
  out.reserve(xs.size());
  for (std::size_t t = 0; t < xs.size(); ++t) {
    out.push_back(concat(f[t].h, b[xs.size() - 1 - t].h));
  }
  return out;
}

}  // namespace mtlstm
