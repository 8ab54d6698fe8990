#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mtlstm/data.hpp"
#include "mtlstm/multitask.hpp"
#include "mtlstm/rng.hpp"
#include "mtlstm/tape.hpp"

namespace mtlstm {

class TrainingDiverged : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double learning_rate = 0.1;  // initial learning rate
  double l2_weight = 1e-5;     // regularization weight
  std::vector<double> task_weights;  // empty means all ones
  std::size_t n0 = 2;          // upsampling coefficient
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  std::size_t embedding_dim = 300;
  std::size_t hidden_dim = 100;
  std::size_t patience = 0;    // epochs without improvement; 0 disables

  std::vector<double> weights_for(std::size_t task_count) const {
    std::vector<double> w = task_weights;
    if (w.empty()) w.assign(task_count, 1.0);
    if (w.size() != task_count) {
      throw ShapeError("TrainConfig: expected one task weight per task");
    }
    bool any = false;
    for (double v : w) {
      if (v < 0) throw ShapeError("TrainConfig: task weights must be >= 0");
      any = any || v > 0;
    }
    if (!any) throw ShapeError("TrainConfig: at least one task weight must be positive");
    return w;
  }

  void validate() const {
    if (learning_rate <= 0) throw ShapeError("TrainConfig: learning_rate must be > 0");
    if (l2_weight < 0) throw ShapeError("TrainConfig: l2_weight must be >= 0");
    if (n0 < 1) throw ShapeError("TrainConfig: n0 must be >= 1");
    if (embedding_dim == 0 || hidden_dim == 0) {
      throw ShapeError("TrainConfig: model dimensions must be positive");
    }
  }
};

// ---- joint objective ---------------------------------------------------

struct JointLossValues {
  Value total;
  std::vector<Value> per_task;  // unweighted cross-entropies
};

/// Weighted sum of per-task cross-entropies for one collection plus the
/// L2 penalty over weight matrices (biases and embeddings excluded).
inline JointLossValues joint_loss(const MultiTaskView& view,
                                  const SampleCollection& collection,
                                  const std::vector<double>& task_weights,
                                  double l2_weight) {
  const MultiTaskModel& m = *view.model;
  Tape& tape = *view.tape;
  const std::size_t k_count = m.config.task_count;
  if (collection.inputs.size() != k_count ||
      task_weights.size() != k_count) {
    throw ShapeError("joint_loss: collection and weights must match the task count");
  }

  MultiTaskOutput out =
      multitask_forward(view, collection.inputs, collection.lengths);

  JointLossValues result;
  std::optional<Value> total;
  for (std::size_t k = 0; k < k_count; ++k) {
    Tensor onehot({m.config.class_counts[k]});
    const auto label = static_cast<std::size_t>(collection.labels[k]);
    if (label >= onehot.size()) {
      throw ShapeError("joint_loss: label out of range for task " + std::to_string(k));
    }
    onehot[label] = 1.0;
    Value ce = cross_entropy(out.distributions[k], tape.leaf(onehot));
    result.per_task.push_back(ce);
    Value weighted = scale(ce, task_weights[k]);
    total = total.has_value() ? add(*total, weighted) : weighted;
  }

  if (l2_weight > 0.0) {
    std::optional<Value> penalty;
    for (const auto& [name, value] : view.params) {
      if (value.tensor().rank() != 2) continue;           // biases stay free
      if (name.starts_with("embedding.")) continue;       // embeddings too
      Value sq = sum_squares(value);
      penalty = penalty.has_value() ? add(*penalty, sq) : sq;
    }
    if (penalty.has_value()) {
      total = add(*total, scale(*penalty, l2_weight));
    }
  }
  result.total = *total;
  return result;
}

// ---- optimizer -----------------------------------------------------------

/// Gradient per parameter, keyed by canonical name in canonical order.
struct GradientMap {
  std::vector<std::pair<std::string, Tensor>> entries;
};

inline GradientMap collect_gradients(const MultiTaskView& view) {
  GradientMap g;
  g.entries.reserve(view.params.size());
  for (const auto& [name, value] : view.params) {
    g.entries.emplace_back(name, value.grad());
  }
  return g;
}

/// theta <- theta - eta * grad, applied in canonical parameter order.
inline void sgd_step(MultiTaskModel& model, const GradientMap& gradients,
                     double learning_rate) {
  std::size_t next = 0;
  model.visit_params([&](const std::string& name, Tensor& t) {
    if (next >= gradients.entries.size() ||
        gradients.entries[next].first != name) {
      throw ShapeError("sgd_step: missing gradient for " + name);
    }
    const Tensor& g = gradients.entries[next].second;
    check_same_shape(t, g, "sgd_step");
    if (!g.all_finite()) {
      throw NumericError("sgd_step: non-finite gradient for " + name);
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] -= learning_rate * g[i];
    }
    ++next;
  });
  if (next != gradients.entries.size()) {
    throw ShapeError("sgd_step: gradient map has unknown extra entries");
  }
}

// ---- training loop --------------------------------------------------------

struct StepRecord {
  std::size_t step = 0;
  double joint = 0.0;
  std::vector<double> per_task;
};

struct TrainResult {
  std::vector<StepRecord> trajectory;
};

/// Stochastic training: epochs x N steps, each drawing one collection
/// uniformly with the seeded stream and taking one gradient step.
inline TrainResult train(MultiTaskModel& model,
                         const std::vector<SampleCollection>& collections,
                         const TrainConfig& config) {
  config.validate();
  if (collections.empty()) throw DataError("train: no collections");
  const std::vector<double> weights = config.weights_for(model.config.task_count);

  TrainResult result;
  Rng pick = Rng(config.seed).derive(0x7261696eULL);  // training stream
  const std::size_t per_epoch = collections.size();
  double best_epoch_loss = std::numeric_limits<double>::infinity();
  std::size_t stale_epochs = 0;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t s = 0; s < per_epoch; ++s, ++step) {
      const SampleCollection& c = collections[pick.uniform_index(per_epoch)];
      Tape tape;
      MultiTaskView view = lift(tape, model);
      double joint = 0.0;
      try {
        JointLossValues loss = joint_loss(view, c, weights, config.l2_weight);
        joint = loss.total.tensor()[0];
        if (!std::isfinite(joint)) {
          throw NumericError("joint loss is not finite");
        }
        tape.backward(loss.total);
        StepRecord rec;
        rec.step = step;
        rec.joint = joint;
        for (const Value& ce : loss.per_task) {
          rec.per_task.push_back(ce.tensor()[0]);
        }
        result.trajectory.push_back(std::move(rec));
        sgd_step(model, collect_gradients(view), config.learning_rate);
      } catch (const NumericError& e) {
        throw TrainingDiverged("training diverged at step " +
                               std::to_string(step) + ": " + e.what());
      }
      epoch_loss += joint;
    }
    epoch_loss /= static_cast<double>(per_epoch);
    if (config.patience > 0) {
      if (epoch_loss < best_epoch_loss - 1e-12) {
        best_epoch_loss = epoch_loss;
        stale_epochs = 0;
      } else if (++stale_epochs >= config.patience) {
        break;
      }
    }
  }
  return result;
}

// ---- evaluation ------------------------------------------------------------

/// Scores task k over its evaluation pool. Inference still needs K inputs,
/// so the other tasks' sequences are drawn deterministically (seeded) from
/// their training pools. Argmax ties resolve to the lowest class index.
inline std::vector<double> evaluate_accuracy(
    const MultiTaskModel& model, const std::vector<TaskDataset>& datasets,
    const std::vector<std::vector<std::size_t>>& eval_pools,
    const std::vector<std::vector<std::size_t>>& companion_pools,
    std::uint64_t seed) {
  const std::size_t k_count = model.config.task_count;
  if (datasets.size() != k_count || eval_pools.size() != k_count ||
      companion_pools.size() != k_count) {
    throw ShapeError("evaluate_accuracy: need datasets and pools for every task");
  }
  std::vector<double> accuracies(k_count, 0.0);
  for (std::size_t k = 0; k < k_count; ++k) {
    if (eval_pools[k].empty()) {
      throw DataError("evaluate_accuracy: empty evaluation split for task " +
                      datasets[k].name);
    }
    Rng rng = Rng(seed).derive(0x6576616cULL + k);
    std::size_t correct = 0;
    for (std::size_t idx : eval_pools[k]) {
      std::vector<std::vector<int>> seqs(k_count);
      std::vector<int> labels(k_count, 0);
      for (std::size_t j = 0; j < k_count; ++j) {
        std::size_t pick = idx;
        if (j != k) {
          if (companion_pools[j].empty()) {
            throw DataError("evaluate_accuracy: empty companion pool for task " +
                            datasets[j].name);
          }
          pick = companion_pools[j][rng.uniform_index(companion_pools[j].size())];
        }
        seqs[j] = datasets[j].samples[pick].tokens;
        labels[j] = datasets[j].samples[pick].label;
      }
      SampleCollection c = pad_collection(std::move(seqs), std::move(labels));
      Tape tape;
      MultiTaskView view = lift(tape, model);
      MultiTaskOutput out = multitask_forward(view, c.inputs, c.lengths);
      const Tensor& dist = out.distributions[k].tensor();
      std::size_t best = 0;
      for (std::size_t cidx = 1; cidx < dist.size(); ++cidx) {
        if (dist[cidx] > dist[best]) best = cidx;
      }
      if (best == static_cast<std::size_t>(c.labels[k])) ++correct;
    }
    accuracies[k] =
        static_cast<double>(correct) / static_cast<double>(eval_pools[k].size());
  }
  return accuracies;
}

// ---- pair-wise performance gain ---------------------------------------------

/// PPG_ij = sqrt((P_i' P_j') / (P_i P_j)).
inline double ppg(double p_i, double p_j, double p_i_joint, double p_j_joint) {
  for (double v : {p_i, p_j, p_i_joint, p_j_joint}) {
    if (!(v > 0.0) || v > 1.0) {
      throw ShapeError("ppg: performances must lie in (0, 1]");
    }
  }
  return std::sqrt((p_i_joint * p_j_joint) / (p_i * p_j));
}

// ---- model construction helpers ---------------------------------------------

inline ModelConfig model_config_for(const std::vector<TaskDataset>& datasets,
                                    std::size_t embedding_dim,
                                    std::size_t hidden_dim,
                                    bool shared_embedding, bool gate_self) {
  ModelConfig cfg;
  cfg.task_count = datasets.size();
  cfg.embedding_dim = embedding_dim;
  cfg.hidden_dim = hidden_dim;
  cfg.shared_embedding = shared_embedding;
  cfg.gate_self = gate_self;
  for (const auto& ds : datasets) {
    cfg.class_counts.push_back(ds.class_count);
    cfg.vocab_sizes.push_back(ds.vocab.size());
  }
  return cfg;
}

/// The single-task baseline: a K=1 model with no interactions and the
/// self gate forced to 1, i.e. exactly the plain peephole cell plus head.
inline MultiTaskModel make_single_task_model(const TaskDataset& dataset,
                                             std::size_t embedding_dim,
                                             std::size_t hidden_dim,
                                             std::uint64_t init_seed) {
  ModelConfig cfg = model_config_for({dataset}, embedding_dim, hidden_dim,
                                     false, false);
  Rng rng = Rng(init_seed).derive(0x696e6974ULL);
  return MultiTaskModel::init(cfg, Topology::none(1), rng);
}

// ---- pair-wise training harness ----------------------------------------------

struct PairTrainOptions {
  TrainConfig train;
  bool shared_embedding = false;
  bool coupling = true;
  bool local_fusion = true;
  bool global_fusion = false;  // redundant with local fusion at K=2
  double train_frac = 0.8;
  double validation_frac = 0.1;
};

struct PpgResult {
  std::vector<std::string> task_names;
  std::vector<double> individual;           // P_k when trained alone
  std::vector<std::vector<double>> matrix;  // PPG, diagonal 1.0 by convention
};

namespace detail {

inline std::vector<std::vector<std::size_t>> pools_of(
    const std::vector<SplitIndices>& splits, bool test) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& s : splits) out.push_back(test ? s.test : s.train);
  return out;
}

/// Trains a fresh model on TOS collections oriented at `oriented` and
/// returns test accuracies for every task.
inline std::vector<double> train_and_eval(std::vector<TaskDataset> datasets,
                                          Topology topology,
                                          const TrainConfig& config,
                                          bool shared_embedding,
                                          bool gate_self, std::size_t oriented,
                                          std::uint64_t run_seed,
                                          double train_frac = 0.8,
                                          double validation_frac = 0.1) {
  if (shared_embedding && datasets.size() > 1) unify_vocab(datasets);
  std::vector<SplitIndices> splits;
  for (std::size_t k = 0; k < datasets.size(); ++k) {
    Rng split_rng = Rng(config.seed).derive(0x73706c69ULL + k);
    splits.push_back(split_dataset(datasets[k].samples.size(), train_frac,
                                   validation_frac, split_rng));
  }
  Rng tos_rng = Rng(run_seed).derive(0x746f73ULL);
  auto collections = tos_sample(datasets, pools_of(splits, false), oriented,
                                config.n0, tos_rng);
  ModelConfig cfg = model_config_for(datasets, config.embedding_dim,
                                     config.hidden_dim, shared_embedding,
                                     gate_self);
  Rng init_rng = Rng(run_seed).derive(0x696e6974ULL);
  MultiTaskModel model = MultiTaskModel::init(cfg, std::move(topology), init_rng);
  TrainConfig run_config = config;
  run_config.seed = run_seed;
  train(model, collections, run_config);
  return evaluate_accuracy(model, datasets, pools_of(splits, true),
                           pools_of(splits, false), run_seed);
}

}  // namespace detail

/// For every unordered pair, trains the pair jointly (oriented at each
/// member in turn, accuracies averaged) and each member individually,
/// then fills the symmetric PPG matrix.
inline PpgResult ppg_matrix(const std::vector<TaskDataset>& datasets,
                            const PairTrainOptions& opt) {
  const std::size_t k_count = datasets.size();
  if (k_count < 2) throw DataError("ppg_matrix: need at least two tasks");

  PpgResult result;
  for (const auto& ds : datasets) result.task_names.push_back(ds.name);
  result.matrix.assign(k_count, std::vector<double>(k_count, 1.0));

  for (std::size_t k = 0; k < k_count; ++k) {
    std::uint64_t run_seed = Rng(opt.train.seed).derive(0x73696e67ULL + k).seed();
    result.individual.push_back(
        detail::train_and_eval({datasets[k]}, Topology::none(1), opt.train,
                               false, false, 0, run_seed, opt.train_frac,
                               opt.validation_frac)[0]);
  }

  for (std::size_t i = 0; i < k_count; ++i) {
    for (std::size_t j = i + 1; j < k_count; ++j) {
      Topology topo = Topology::none(2);
      if (opt.coupling) {
        topo.coupling[0 * 2 + 1] = 1;
        topo.coupling[1 * 2 + 0] = 1;
      }
      if (opt.local_fusion) {
        topo.local_fusion[0 * 2 + 1] = 1;
        topo.local_fusion[1 * 2 + 0] = 1;
      }
      topo.global_fusion = opt.global_fusion;

      std::vector<TaskDataset> pair = {datasets[i], datasets[j]};
      double acc_i = 0.0, acc_j = 0.0;
      for (std::size_t oriented = 0; oriented < 2; ++oriented) {
        std::uint64_t run_seed =
            Rng(opt.train.seed).derive(0x70616972ULL + i * 131 + j * 7 + oriented).seed();
        auto accs = detail::train_and_eval(pair, topo, opt.train,
                                           opt.shared_embedding, true,
                                           oriented, run_seed, opt.train_frac,
                                           opt.validation_frac);
        acc_i += accs[0] / 2.0;
        acc_j += accs[1] / 2.0;
      }
      const double value =
          ppg(result.individual[i], result.individual[j], acc_i, acc_j);
      result.matrix[i][j] = value;
      result.matrix[j][i] = value;
    }
  }
  return result;
}

// ---- end-to-end gradient verification ---------------------------------------

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double worst = 0.0;

  bool pass(double tol) const { return worst < tol; }
};

inline double eval_joint_loss(const MultiTaskModel& model,
                              const SampleCollection& collection,
                              const std::vector<double>& weights,
                              double l2_weight) {
  Tape tape;
  MultiTaskView view = lift(tape, model);
  return joint_loss(view, collection, weights, l2_weight).total.tensor()[0];
}

/// Compares the reverse-mode gradient of the full joint loss against
/// central finite differences, coordinate by coordinate, reporting the
/// worst relative error per parameter group. The default step balances
/// truncation against round-off noise for a loss built from thousands of
/// operations. `corrupt` deliberately perturbs one group's analytic
/// gradient (a fault-injection hook used to prove the check can fail).
inline GradCheckReport gradient_check(MultiTaskModel& model,
                                      const SampleCollection& collection,
                                      const std::vector<double>& task_weights,
                                      double l2_weight, double h = 1e-4,
                                      const std::string& corrupt = "") {
  const std::vector<double> weights =
      task_weights.empty()
          ? std::vector<double>(model.config.task_count, 1.0)
          : task_weights;

  Tape tape;
  MultiTaskView view = lift(tape, model);
  JointLossValues loss = joint_loss(view, collection, weights, l2_weight);
  tape.backward(loss.total);
  GradientMap analytic = collect_gradients(view);
  if (!corrupt.empty()) {
    bool found = false;
    for (auto& [name, grad] : analytic.entries) {
      if (name == corrupt) {
        grad[0] += 0.5;
        found = true;
      }
    }
    if (!found) throw ShapeError("gradient_check: unknown parameter " + corrupt);
  }

  GradCheckReport report;
  std::size_t index = 0;
  model.visit_params([&](const std::string& name, Tensor& t) {
    const Tensor& grad = analytic.entries[index].second;
    GradCheckGroup group;
    group.name = name;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = eval_joint_loss(model, collection, weights, l2_weight);
      t[i] = orig - h;
      const double down = eval_joint_loss(model, collection, weights, l2_weight);
      t[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      group.max_rel_err = std::max(group.max_rel_err, rel_err(grad[i], numeric));
    }
    report.worst = std::max(report.worst, group.max_rel_err);
    report.groups.push_back(std::move(group));
    ++index;
  });
  return report;
}

}  // namespace mtlstm
