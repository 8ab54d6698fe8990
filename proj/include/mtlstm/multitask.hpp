#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mtlstm/lstm.hpp"
#include "mtlstm/rng.hpp"
#include "mtlstm/tape.hpp"
#include "mtlstm/tensor.hpp"
#include "mtlstm/vocab.hpp"

namespace mtlstm {

/// Which cross-task interactions exist. Self-recurrence (the coupling
/// diagonal) is always present; the off-diagonal coupling entries, the
/// symmetric local-fusion pairs, and the single global switch can each
/// be removed independently.
struct Topology {
  std::size_t task_count = 0;
  std::vector<std::uint8_t> coupling;      // K x K, row j = sender, col k = receiver
  std::vector<std::uint8_t> local_fusion;  // K x K, symmetric, false diagonal
  bool global_fusion = false;

  static Topology none(std::size_t k) {
    Topology t;
    t.task_count = k;
    t.coupling.assign(k * k, 0);
    t.local_fusion.assign(k * k, 0);
    t.global_fusion = false;
    return t;
  }

  static Topology full(std::size_t k) {
    Topology t = none(k);
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t i = 0; i < k; ++i) {
        if (i != j) {
          t.coupling[j * k + i] = 1;
          t.local_fusion[j * k + i] = 1;
        }
      }
    }
    t.global_fusion = k > 1;
    return t;
  }

  bool coupling_enabled(std::size_t j, std::size_t k) const {
    return j == k || coupling[j * task_count + k] != 0;
  }

  bool local_enabled(std::size_t j, std::size_t k) const {
    return j != k && local_fusion[j * task_count + k] != 0;
  }

  /// Enabled unordered local-fusion pairs, ascending (a < b).
  std::vector<std::pair<std::size_t, std::size_t>> local_pairs() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t a = 0; a < task_count; ++a) {
      for (std::size_t b = a + 1; b < task_count; ++b) {
        if (local_enabled(a, b)) out.emplace_back(a, b);
      }
    }
    return out;
  }

  void validate() const {
    const std::size_t k = task_count;
    if (k == 0) throw ShapeError("Topology: task_count must be positive");
    if (coupling.size() != k * k || local_fusion.size() != k * k) {
      throw ShapeError("Topology: interaction masks must be K x K");
    }
    for (std::size_t a = 0; a < k; ++a) {
      if (local_fusion[a * k + a] != 0) {
        throw ShapeError("Topology: local fusion diagonal must be false");
      }
      for (std::size_t b = 0; b < k; ++b) {
        if (local_fusion[a * k + b] != local_fusion[b * k + a]) {
          throw ShapeError("Topology: local fusion mask must be symmetric");
        }
      }
    }
  }
};

struct ModelConfig {
  std::size_t task_count = 0;
  std::size_t embedding_dim = 0;
  std::size_t hidden_dim = 0;
  std::vector<std::size_t> class_counts;
  std::vector<std::size_t> vocab_sizes;
  bool shared_embedding = false;
  // Literal reading of the coupling sum: the self term is gated like any
  // other sender. Setting this false forces the self gate to 1, which
  // recovers the plain single-task candidate exactly.
  bool gate_self = true;

  void validate() const {
    if (task_count == 0) throw ShapeError("ModelConfig: task_count must be positive");
    if (embedding_dim == 0 || hidden_dim == 0) {
      throw ShapeError("ModelConfig: embedding_dim and hidden_dim must be positive");
    }
    if (class_counts.size() != task_count || vocab_sizes.size() != task_count) {
      throw ShapeError("ModelConfig: class_counts and vocab_sizes must have one entry per task");
    }
    for (std::size_t c : class_counts) {
      if (c < 2) throw ShapeError("ModelConfig: every class count must be >= 2");
    }
    for (std::size_t v : vocab_sizes) {
      if (v < 2) throw ShapeError("ModelConfig: vocabulary must include PAD and UNK");
      if (shared_embedding && v != vocab_sizes[0]) {
        throw ShapeError("ModelConfig: shared embedding requires one common vocabulary");
      }
    }
  }
};

/// All parameters of the joint model: per-task single layers and heads,
/// gated pair-wise couplings, pair-wise bidirectional local fusions and
/// the global fusion memory. Only enabled edges own parameters.
struct MultiTaskModel {
  struct Task {
    GateWeights input, forget, output;
    Tensor w_c;     // n x d
    Tensor head_w;  // C_k x n
    Tensor head_b;  // C_k
  };

  struct LocalFusion {
    std::size_t a = 0, b = 0;  // a < b
    LstmWeights fwd, bwd;      // over concatenated inputs (2d)
    Tensor u_c;                // n x 2n
  };

  struct GlobalFusion {
    LstmWeights fwd, bwd;        // over all K concatenated inputs (K*d)
    Tensor u_c;                  // n x 2n
    std::vector<Tensor> gate_w;  // per task, n x d
    std::vector<Tensor> gate_u;  // per task, n x 2n
  };

  ModelConfig config;
  Topology topology;
  std::vector<Tensor> embeddings;               // one per task, or one shared
  std::vector<Task> tasks;
  std::vector<std::vector<Tensor>> coupling_u;  // [sender j][receiver k], empty if disabled
  std::vector<Tensor> coupling_gate_w;          // per receiver k, empty if never gated
  std::vector<Tensor> coupling_gate_u;          // per sender j, empty if never gated
  std::vector<LocalFusion> local_fusions;
  std::vector<Tensor> local_gate_w;             // per receiver k, empty if no pair
  std::vector<Tensor> local_gate_u;             // per partner j, empty if no pair
  std::optional<GlobalFusion> global_fusion;

  bool coupling_gate_needed_in(std::size_t k) const {
    if (config.gate_self) return true;
    for (std::size_t j = 0; j < config.task_count; ++j) {
      if (j != k && topology.coupling_enabled(j, k)) return true;
    }
    return false;
  }

  bool coupling_gate_needed_out(std::size_t j) const {
    if (config.gate_self) return true;
    for (std::size_t k = 0; k < config.task_count; ++k) {
      if (j != k && topology.coupling_enabled(j, k)) return true;
    }
    return false;
  }

  bool in_local_pair(std::size_t k) const {
    for (std::size_t j = 0; j < config.task_count; ++j) {
      if (topology.local_enabled(j, k)) return true;
    }
    return false;
  }

  /// Builds the parameter skeleton (all zeros) matching config + topology.
  static MultiTaskModel allocate(ModelConfig config, Topology topology) {
    config.validate();
    topology.validate();
    if (topology.task_count != config.task_count) {
      throw ShapeError("MultiTaskModel: topology and config disagree on task count");
    }
    MultiTaskModel m;
    m.config = std::move(config);
    m.topology = std::move(topology);
    const std::size_t k_count = m.config.task_count;
    const std::size_t d = m.config.embedding_dim;
    const std::size_t n = m.config.hidden_dim;

    if (m.config.shared_embedding) {
      m.embeddings.push_back(Tensor({m.config.vocab_sizes[0], d}));
    } else {
      for (std::size_t k = 0; k < k_count; ++k) {
        m.embeddings.push_back(Tensor({m.config.vocab_sizes[k], d}));
      }
    }

    auto zero_gate = [&](std::size_t in_dim) {
      GateWeights g;
      g.w = Tensor({n, in_dim});
      g.u = Tensor({n, n});
      g.v = Tensor({n, n});
      g.b = Tensor({n});
      return g;
    };
    auto zero_lstm = [&](std::size_t in_dim) {
      LstmWeights w;
      w.input = zero_gate(in_dim);
      w.forget = zero_gate(in_dim);
      w.output = zero_gate(in_dim);
      w.w_c = Tensor({n, in_dim});
      w.u_c = Tensor({n, n});
      return w;
    };

    for (std::size_t k = 0; k < k_count; ++k) {
      Task t;
      t.input = zero_gate(d);
      t.forget = zero_gate(d);
      t.output = zero_gate(d);
      t.w_c = Tensor({n, d});
      t.head_w = Tensor({m.config.class_counts[k], n});
      t.head_b = Tensor({m.config.class_counts[k]});
      m.tasks.push_back(std::move(t));
    }

    m.coupling_u.assign(k_count, std::vector<Tensor>(k_count));
    for (std::size_t j = 0; j < k_count; ++j) {
      for (std::size_t k = 0; k < k_count; ++k) {
        if (m.topology.coupling_enabled(j, k)) {
          m.coupling_u[j][k] = Tensor({n, n});
        }
      }
    }
    m.coupling_gate_w.resize(k_count);
    m.coupling_gate_u.resize(k_count);
    for (std::size_t k = 0; k < k_count; ++k) {
      if (m.coupling_gate_needed_in(k)) m.coupling_gate_w[k] = Tensor({n, d});
      if (m.coupling_gate_needed_out(k)) m.coupling_gate_u[k] = Tensor({n, n});
    }

    for (auto [a, b] : m.topology.local_pairs()) {
      LocalFusion lf;
      lf.a = a;
      lf.b = b;
      lf.fwd = zero_lstm(2 * d);
      lf.bwd = zero_lstm(2 * d);
      lf.u_c = Tensor({n, 2 * n});
      m.local_fusions.push_back(std::move(lf));
    }
    m.local_gate_w.resize(k_count);
    m.local_gate_u.resize(k_count);
    for (std::size_t k = 0; k < k_count; ++k) {
      if (m.in_local_pair(k)) {
        m.local_gate_w[k] = Tensor({n, d});
        m.local_gate_u[k] = Tensor({n, 2 * n});
      }
    }

    if (m.topology.global_fusion) {
      GlobalFusion g;
      g.fwd = zero_lstm(k_count * d);
      g.bwd = zero_lstm(k_count * d);
      g.u_c = Tensor({n, 2 * n});
      for (std::size_t k = 0; k < k_count; ++k) {
        g.gate_w.push_back(Tensor({n, d}));
        g.gate_u.push_back(Tensor({n, 2 * n}));
      }
      m.global_fusion = std::move(g);
    }
    return m;
  }

  /// Allocates and randomly initializes every parameter from a truncated
  /// normal; the PAD embedding row stays zero.
  static MultiTaskModel init(ModelConfig config, Topology topology, Rng& rng,
                             double stddev = kInitStddev) {
    MultiTaskModel m = allocate(std::move(config), std::move(topology));
    m.visit_params([&](const std::string&, Tensor& t) {
      for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = rng.truncated_normal(0.0, stddev);
      }
    });
    for (Tensor& emb : m.embeddings) {
      for (std::size_t j = 0; j < emb.cols(); ++j) {
        emb(static_cast<std::size_t>(kPadToken), j) = 0.0;
      }
    }
    return m;
  }

  const Tensor& embedding_for(std::size_t task) const {
    return embeddings[config.shared_embedding ? 0 : task];
  }

  std::size_t vocab_size(std::size_t task) const {
    return config.vocab_sizes[config.shared_embedding ? 0 : task];
  }

  /// Visits every trainable tensor in a fixed canonical order; this order
  /// defines SGD application, checkpoint layout and gradient reports.
  template <typename F>
  void visit_params(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit_params(F&& f) const {
    visit_impl(*this, f);
  }

  void save(const std::string& path) const;
  static MultiTaskModel load(const std::string& path);

private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    const std::size_t k_count = self.config.task_count;
    if (self.config.shared_embedding) {
      f("embedding.shared", self.embeddings[0]);
    } else {
      for (std::size_t k = 0; k < k_count; ++k) {
        f("embedding." + std::to_string(k), self.embeddings[k]);
      }
    }
    for (std::size_t k = 0; k < k_count; ++k) {
      const std::string p = "task" + std::to_string(k);
      auto& t = self.tasks[k];
      t.input.visit(p + ".input", f);
      t.forget.visit(p + ".forget", f);
      t.output.visit(p + ".output", f);
      f(p + ".w_c", t.w_c);
      f(p + ".head.w", t.head_w);
      f(p + ".head.b", t.head_b);
    }
    for (std::size_t j = 0; j < k_count; ++j) {
      for (std::size_t k = 0; k < k_count; ++k) {
        if (!self.coupling_u[j][k].empty()) {
          f("coupling.u." + std::to_string(j) + "to" + std::to_string(k),
            self.coupling_u[j][k]);
        }
      }
    }
    for (std::size_t k = 0; k < k_count; ++k) {
      if (!self.coupling_gate_w[k].empty()) {
        f("coupling.gate_w." + std::to_string(k), self.coupling_gate_w[k]);
      }
    }
    for (std::size_t j = 0; j < k_count; ++j) {
      if (!self.coupling_gate_u[j].empty()) {
        f("coupling.gate_u." + std::to_string(j), self.coupling_gate_u[j]);
      }
    }
    for (auto& lf : self.local_fusions) {
      const std::string p =
          "local." + std::to_string(lf.a) + "-" + std::to_string(lf.b);
      lf.fwd.visit(p + ".fwd", f);
      lf.bwd.visit(p + ".bwd", f);
      f(p + ".u_c", lf.u_c);
    }
    for (std::size_t k = 0; k < k_count; ++k) {
      if (!self.local_gate_w[k].empty()) {
        f("local.gate_w." + std::to_string(k), self.local_gate_w[k]);
      }
    }
    for (std::size_t j = 0; j < k_count; ++j) {
      if (!self.local_gate_u[j].empty()) {
        f("local.gate_u." + std::to_string(j), self.local_gate_u[j]);
      }
    }
    if (self.global_fusion.has_value()) {
      auto& g = *self.global_fusion;
      g.fwd.visit("global.fwd", f);
      g.bwd.visit("global.bwd", f);
      f("global.u_c", g.u_c);
      for (std::size_t k = 0; k < k_count; ++k) {
        f("global.gate_w." + std::to_string(k), g.gate_w[k]);
      }
      for (std::size_t k = 0; k < k_count; ++k) {
        f("global.gate_u." + std::to_string(k), g.gate_u[k]);
      }
    }
  }
};

// ---- tape views -----------------------------------------------------

struct TaskView {
  GateParams input, forget, output;
  Value w_c, head_w, head_b;
};

struct LocalFusionView {
  std::size_t a = 0, b = 0;
  LstmParams fwd, bwd;
  Value u_c;
};

struct GlobalFusionView {
  LstmParams fwd, bwd;
  Value u_c;
  std::vector<Value> gate_w, gate_u;
};

/// Per-tape view of a model: every parameter lifted once as a leaf.
struct MultiTaskView {
  const MultiTaskModel* model = nullptr;
  Tape* tape = nullptr;
  std::vector<Value> embeddings;
  std::vector<TaskView> tasks;
  std::vector<std::vector<Value>> coupling_u;
  std::vector<Value> coupling_gate_w, coupling_gate_u;
  std::vector<LocalFusionView> local_fusions;
  std::vector<Value> local_gate_w, local_gate_u;
  std::optional<GlobalFusionView> global_fusion;
  /// (name, leaf) pairs in canonical visit order.
  std::vector<std::pair<std::string, Value>> params;

  Value embedding_for(std::size_t task) const {
    return embeddings[model->config.shared_embedding ? 0 : task];
  }
};

inline MultiTaskView lift(Tape& tape, const MultiTaskModel& m) {
  MultiTaskView v;
  v.model = &m;
  v.tape = &tape;
  std::unordered_map<const Tensor*, Value> leaf_of;
  m.visit_params([&](const std::string& name, const Tensor& t) {
    Value val = tape.leaf(t);
    leaf_of.emplace(&t, val);
    v.params.emplace_back(name, val);
  });
  auto at = [&](const Tensor& t) { return leaf_of.at(&t); };
  auto lift_gate = [&](const GateWeights& g) {
    return GateParams{at(g.w), at(g.u), at(g.v), at(g.b)};
  };
  auto lift_lstm = [&](const LstmWeights& w) {
    return LstmParams{lift_gate(w.input), lift_gate(w.forget),
                      lift_gate(w.output), at(w.w_c), at(w.u_c)};
  };

  for (const Tensor& e : m.embeddings) v.embeddings.push_back(at(e));
  for (const auto& t : m.tasks) {
    v.tasks.push_back(TaskView{lift_gate(t.input), lift_gate(t.forget),
                               lift_gate(t.output), at(t.w_c), at(t.head_w),
                               at(t.head_b)});
  }
  const std::size_t k_count = m.config.task_count;
  v.coupling_u.assign(k_count, std::vector<Value>(k_count));
  for (std::size_t j = 0; j < k_count; ++j) {
    for (std::size_t k = 0; k < k_count; ++k) {
      if (!m.coupling_u[j][k].empty()) v.coupling_u[j][k] = at(m.coupling_u[j][k]);
    }
  }
  v.coupling_gate_w.resize(k_count);
  v.coupling_gate_u.resize(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    if (!m.coupling_gate_w[k].empty()) v.coupling_gate_w[k] = at(m.coupling_gate_w[k]);
    if (!m.coupling_gate_u[k].empty()) v.coupling_gate_u[k] = at(m.coupling_gate_u[k]);
  }
  for (const auto& lf : m.local_fusions) {
    v.local_fusions.push_back(LocalFusionView{lf.a, lf.b, lift_lstm(lf.fwd),
                                              lift_lstm(lf.bwd), at(lf.u_c)});
  }
  v.local_gate_w.resize(k_count);
  v.local_gate_u.resize(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    if (!m.local_gate_w[k].empty()) v.local_gate_w[k] = at(m.local_gate_w[k]);
    if (!m.local_gate_u[k].empty()) v.local_gate_u[k] = at(m.local_gate_u[k]);
  }
  if (m.global_fusion.has_value()) {
    const auto& g = *m.global_fusion;
    GlobalFusionView gv;
    gv.fwd = lift_lstm(g.fwd);
    gv.bwd = lift_lstm(g.bwd);
    gv.u_c = at(g.u_c);
    for (const Tensor& t : g.gate_w) gv.gate_w.push_back(at(t));
    for (const Tensor& t : g.gate_u) gv.gate_u.push_back(at(t));
    v.global_fusion = std::move(gv);
  }
  return v;
}

// ---- forward computation --------------------------------------------

/// Gate on the information flow sender j -> receiver k:
/// sigma(W_gc^(k) x_t^(k) + U_gc^(j) h_{t-1}^(j)).
inline Value coupling_gate(const MultiTaskView& v, std::size_t k, std::size_t j,
                           Value x_k, Value h_prev_j) {
  if (j != k && !v.model->topology.coupling_enabled(j, k)) {
    throw ShapeError("coupling_gate: edge " + std::to_string(j) + "->" +
                     std::to_string(k) + " is disabled");
  }
  return sigmoid(add(matmul(v.coupling_gate_w[k], x_k),
                     matmul(v.coupling_gate_u[j], h_prev_j)));
}

/// Gate on the flow from the local fusion layer shared by k and partner:
/// sigma(W_gf^(k) x_t^(k) + U_gf^(j) h_t^(j,k)).
inline Value local_fusion_gate(const MultiTaskView& v, std::size_t k,
                               std::size_t partner, Value x_k, Value h_pair) {
  if (!v.model->topology.local_enabled(k, partner)) {
    throw ShapeError("local_fusion_gate: pair " + std::to_string(k) + "-" +
                     std::to_string(partner) + " is disabled");
  }
  return sigmoid(add(matmul(v.local_gate_w[k], x_k),
                     matmul(v.local_gate_u[partner], h_pair)));
}

/// Gate on the flow from the global memory into task k:
/// sigma(W_gg^(k) x_t^(k) + U_gg^(k) h_t^(g)).
inline Value global_fusion_gate(const MultiTaskView& v, std::size_t k,
                                Value x_k, Value h_global) {
  if (!v.global_fusion.has_value()) {
    throw ShapeError("global_fusion_gate: global fusion is disabled");
  }
  const GlobalFusionView& g = *v.global_fusion;
  return sigmoid(add(matmul(g.gate_w[k], x_k), matmul(g.gate_u[k], h_global)));
}

/// Candidate memory of task k: tanh of W_c x plus the gated coupling sum,
/// the gated local-fusion terms and the gated global-fusion term.
/// Disabled interactions contribute nothing.
inline Value candidate_memory(const MultiTaskView& v, std::size_t k, Value x_k,
                              const std::vector<LstmState>& prev,
                              const std::vector<Value>& lf_t,
                              std::optional<Value> gf_t) {
  const MultiTaskModel& m = *v.model;
  const std::size_t k_count = m.config.task_count;
  Value pre = matmul(v.tasks[k].w_c, x_k);

  for (std::size_t j = 0; j < k_count; ++j) {
    if (!m.topology.coupling_enabled(j, k)) continue;
    Value term = matmul(v.coupling_u[j][k], prev[j].h);
    if (j != k || m.config.gate_self) {
      term = mul(coupling_gate(v, k, j, x_k, prev[j].h), term);
    }
    pre = add(pre, term);
  }

  for (std::size_t pi = 0; pi < v.local_fusions.size(); ++pi) {
    const LocalFusionView& lf = v.local_fusions[pi];
    if (lf.a != k && lf.b != k) continue;
    const std::size_t partner = lf.a == k ? lf.b : lf.a;
    if (pi >= lf_t.size() || !lf_t[pi].valid()) {
      throw ShapeError("candidate_memory: missing local fusion output for pair " +
                       std::to_string(lf.a) + "-" + std::to_string(lf.b));
    }
    Value h_pair = lf_t[pi];
    Value gate = local_fusion_gate(v, k, partner, x_k, h_pair);
    pre = add(pre, mul(gate, matmul(lf.u_c, h_pair)));
  }

  if (m.topology.global_fusion) {
    if (!gf_t.has_value()) {
      throw ShapeError("candidate_memory: missing global fusion output");
    }
    Value gate = global_fusion_gate(v, k, x_k, *gf_t);
    pre = add(pre, mul(gate, matmul(v.global_fusion->u_c, *gf_t)));
  }
  return tanh(pre);
}

/// Advances every task one step in lockstep: gates read the previous
/// states of all tasks, candidates take the interaction terms, then the
/// memory and hidden updates apply per task.
inline std::vector<LstmState> multitask_step(const MultiTaskView& v,
                                             const std::vector<Value>& x_t,
                                             const std::vector<LstmState>& prev,
                                             const std::vector<Value>& lf_t,
                                             std::optional<Value> gf_t) {
  const std::size_t k_count = v.model->config.task_count;
  if (x_t.size() != k_count || prev.size() != k_count) {
    throw ShapeError("multitask_step: expected one input and one state per task");
  }
  std::vector<LstmState> next;
  next.reserve(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    const TaskView& task = v.tasks[k];
    Value i = lstm_gate(task.input, x_t[k], prev[k].h, prev[k].c);
    Value f = lstm_gate(task.forget, x_t[k], prev[k].h, prev[k].c);
    Value o = lstm_gate(task.output, x_t[k], prev[k].h, prev[k].c);
    Value cand = candidate_memory(v, k, x_t[k], prev, lf_t, gf_t);
    Value c = add(mul(f, prev[k].c), mul(i, cand));
    Value h = mul(o, tanh(c));
    next.push_back(LstmState{h, c});
  }
  return next;
}

struct MultiTaskOutput {
  std::vector<Value> distributions;  // one class distribution per task
  std::vector<Value> final_hidden;   // h at each task's true last position
};

/// Embeds one aligned collection of token sequences, runs the fusion
/// layers over the whole sequence, folds the joint step over time and
/// applies each task's softmax head at its true last position.
inline MultiTaskOutput multitask_forward(
    const MultiTaskView& v, const std::vector<std::vector<int>>& inputs,
    const std::vector<std::size_t>& lengths) {
  const MultiTaskModel& m = *v.model;
  Tape& tape = *v.tape;
  const std::size_t k_count = m.config.task_count;
  if (inputs.size() != k_count || lengths.size() != k_count) {
    throw ShapeError("multitask_forward: expected one sequence per task");
  }
  const std::size_t steps = inputs[0].size();
  if (steps == 0) throw ShapeError("multitask_forward: empty sequence");
  for (std::size_t k = 0; k < k_count; ++k) {
    if (inputs[k].size() != steps) {
      throw ShapeError("multitask_forward: sequences must be padded to equal length");
    }
    if (lengths[k] == 0 || lengths[k] > steps) {
      throw ShapeError("multitask_forward: invalid true length for task " +
                       std::to_string(k));
    }
  }

  // PAD positions embed as a constant zero vector outside the tables.
  Value zero_embed = tape.leaf(Tensor::zeros({m.config.embedding_dim}));
  std::vector<std::vector<Value>> xs(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    xs[k].reserve(steps);
    for (int tok : inputs[k]) {
      if (tok < 0 || static_cast<std::size_t>(tok) >= m.vocab_size(k)) {
        throw ShapeError("multitask_forward: token id " + std::to_string(tok) +
                         " out of vocabulary range for task " + std::to_string(k));
      }
      xs[k].push_back(tok == kPadToken
                          ? zero_embed
                          : embed_row(v.embedding_for(k),
                                      static_cast<std::size_t>(tok)));
    }
  }

  // Bidirectional layers need the whole sequence, so fusion outputs are
  // computed up front and consumed as exogenous sequences by the cells.
  std::vector<std::vector<Value>> lf_seq(v.local_fusions.size());
  for (std::size_t pi = 0; pi < v.local_fusions.size(); ++pi) {
    const LocalFusionView& lf = v.local_fusions[pi];
    std::vector<Value> pair_inputs;
    pair_inputs.reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      pair_inputs.push_back(concat(xs[lf.a][t], xs[lf.b][t]));
    }
    lf_seq[pi] = bilstm_forward(lf.fwd, lf.bwd, pair_inputs);
  }
  std::vector<Value> gf_seq;
  if (v.global_fusion.has_value()) {
    std::vector<Value> all_inputs;
    all_inputs.reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      std::vector<Value> parts;
      parts.reserve(k_count);
      for (std::size_t k = 0; k < k_count; ++k) parts.push_back(xs[k][t]);
      all_inputs.push_back(concat(parts));
    }
    gf_seq = bilstm_forward(v.global_fusion->fwd, v.global_fusion->bwd, all_inputs);
  }

  std::vector<LstmState> states;
  states.reserve(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    states.push_back(zero_state(tape, m.config.hidden_dim));
  }
  std::vector<Value> final_hidden(k_count);
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<Value> x_t;
    x_t.reserve(k_count);
    for (std::size_t k = 0; k < k_count; ++k) x_t.push_back(xs[k][t]);
    std::vector<Value> lf_t(v.local_fusions.size());
    for (std::size_t pi = 0; pi < v.local_fusions.size(); ++pi) {
      lf_t[pi] = lf_seq[pi][t];
    }
    std::optional<Value> gf_t;
    if (!gf_seq.empty()) gf_t = gf_seq[t];
    states = multitask_step(v, x_t, states, lf_t, gf_t);
    for (std::size_t k = 0; k < k_count; ++k) {
      if (lengths[k] == t + 1) final_hidden[k] = states[k].h;
    }
  }

  MultiTaskOutput out;
  out.final_hidden = final_hidden;
  out.distributions.reserve(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    Value logits =
        add(matmul(v.tasks[k].head_w, final_hidden[k]), v.tasks[k].head_b);
    out.distributions.push_back(softmax(logits));
  }
  return out;
}

// ---- checkpoint io ----------------------------------------------------

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'M', 'T', 'L', 'S',
                                             'T', 'M', '0', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace detail

/// Self-describing little-endian binary container: version, topology, all
/// shapes and raw f64 payloads. Round-trips bit-exactly.
inline void MultiTaskModel::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::write_pod<std::uint32_t>(os, 1);  // format version
  detail::write_pod<std::uint64_t>(os, config.task_count);
  detail::write_pod<std::uint64_t>(os, config.embedding_dim);
  detail::write_pod<std::uint64_t>(os, config.hidden_dim);
  detail::write_pod<std::uint8_t>(os, config.shared_embedding ? 1 : 0);
  detail::write_pod<std::uint8_t>(os, config.gate_self ? 1 : 0);
  detail::write_pod<std::uint8_t>(os, topology.global_fusion ? 1 : 0);
  for (std::size_t c : config.class_counts) {
    detail::write_pod<std::uint64_t>(os, c);
  }
  for (std::size_t vsz : config.vocab_sizes) {
    detail::write_pod<std::uint64_t>(os, vsz);
  }
  os.write(reinterpret_cast<const char*>(topology.coupling.data()),
           static_cast<std::streamsize>(topology.coupling.size()));
  os.write(reinterpret_cast<const char*>(topology.local_fusion.data()),
           static_cast<std::streamsize>(topology.local_fusion.size()));

  std::uint64_t count = 0;
  visit_params([&](const std::string&, const Tensor&) { ++count; });
  detail::write_pod<std::uint64_t>(os, count);
  visit_params([&](const std::string& name, const Tensor& t) {
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) {
      detail::write_pod<std::uint64_t>(os, dim);
    }
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  });
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline MultiTaskModel MultiTaskModel::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != 1) {
    throw std::runtime_error("checkpoint: unsupported format version " +
                             std::to_string(version));
  }
  ModelConfig cfg;
  cfg.task_count = detail::read_pod<std::uint64_t>(is);
  cfg.embedding_dim = detail::read_pod<std::uint64_t>(is);
  cfg.hidden_dim = detail::read_pod<std::uint64_t>(is);
  cfg.shared_embedding = detail::read_pod<std::uint8_t>(is) != 0;
  cfg.gate_self = detail::read_pod<std::uint8_t>(is) != 0;
  const bool global = detail::read_pod<std::uint8_t>(is) != 0;
  for (std::size_t k = 0; k < cfg.task_count; ++k) {
    cfg.class_counts.push_back(detail::read_pod<std::uint64_t>(is));
  }
  for (std::size_t k = 0; k < cfg.task_count; ++k) {
    cfg.vocab_sizes.push_back(detail::read_pod<std::uint64_t>(is));
  }
  Topology topo = Topology::none(cfg.task_count);
  topo.global_fusion = global;
  is.read(reinterpret_cast<char*>(topo.coupling.data()),
          static_cast<std::streamsize>(topo.coupling.size()));
  is.read(reinterpret_cast<char*>(topo.local_fusion.data()),
          static_cast<std::streamsize>(topo.local_fusion.size()));
  if (!is) throw std::runtime_error("checkpoint: truncated file");

  MultiTaskModel m = allocate(std::move(cfg), std::move(topo));
  std::unordered_map<std::string, Tensor*> by_name;
  m.visit_params([&](const std::string& name, Tensor& t) { by_name[name] = &t; });

  const auto count = detail::read_pod<std::uint64_t>(is);
  if (count != by_name.size()) {
    throw std::runtime_error("checkpoint: parameter count mismatch");
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rank = detail::read_pod<std::uint32_t>(is);
    std::vector<std::size_t> dims;
    for (std::uint32_t r = 0; r < rank; ++r) {
      dims.push_back(detail::read_pod<std::uint64_t>(is));
    }
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw std::runtime_error("checkpoint: unexpected parameter " + name);
    }
    Tensor& dst = *it->second;
    if (dst.shape() != dims) {
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    }
    is.read(reinterpret_cast<char*>(dst.data().data()),
            static_cast<std::streamsize>(dst.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated payload for " + name);
  }
  return m;
}

}  // namespace mtlstm
