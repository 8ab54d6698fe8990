#pragma once

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtlstm/data.hpp"
#include "mtlstm/report.hpp"
#include "mtlstm/train.hpp"

namespace mtlstm {

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Everything a reproducible run needs: data source (scenario preset or
/// dataset manifest), topology switches, model dimensions and training
/// hyperparameters. CLI flags override config fields.
struct ExperimentConfig {
  int version = 1;
  std::uint64_t seed = 0;

  // data: either a synthetic scenario preset or explicit dataset files
  std::string scenario;  // empty when datasets are given
  std::size_t synth_task_count = 3;
  std::size_t synth_samples = 600;
  struct DatasetRef {
    std::string name;
    std::string path;
    std::size_t class_count = 2;
  };
  std::vector<DatasetRef> datasets;

  double train_frac = 0.8;
  double validation_frac = 0.1;

  std::size_t embedding_dim = 300;
  std::size_t hidden_dim = 100;
  bool shared_embedding = false;

  bool coupling = true;
  bool local_fusion = true;
  bool global_fusion = true;
  bool gate_self = true;

  double learning_rate = 0.1;
  double l2_weight = 1e-5;
  std::vector<double> task_weights;
  std::size_t n0 = 2;
  std::size_t epochs = 1;
  std::size_t patience = 0;

  std::size_t oriented_task = 0;
  std::string out_dir;  // optional fixed output directory

  TrainConfig train_config() const {
    TrainConfig t;
    t.learning_rate = learning_rate;
    t.l2_weight = l2_weight;
    t.task_weights = task_weights;
    t.n0 = n0;
    t.epochs = epochs;
    t.seed = seed;
    t.embedding_dim = embedding_dim;
    t.hidden_dim = hidden_dim;
    t.patience = patience;
    return t;
  }

  Topology topology(std::size_t task_count) const {
    Topology topo = Topology::none(task_count);
    for (std::size_t j = 0; j < task_count; ++j) {
      for (std::size_t k = 0; k < task_count; ++k) {
        if (j == k) continue;
        if (coupling) topo.coupling[j * task_count + k] = 1;
        if (local_fusion) topo.local_fusion[j * task_count + k] = 1;
      }
    }
    topo.global_fusion = global_fusion && task_count > 1;
    return topo;
  }

  static ExperimentConfig load(const std::string& path);
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;
};

namespace detail {

template <typename T>
T field(const nlohmann::json& j, const std::string& path, T fallback) {
  const nlohmann::json* cur = &j;
  std::string walked;
  std::size_t begin = 0;
  while (begin <= path.size()) {
    const std::size_t dot = path.find('.', begin);
    const std::string key = path.substr(begin, dot - begin);
    walked = walked.empty() ? key : walked + "." + key;
    auto it = cur->find(key);
    if (it == cur->end() || it->is_null()) return fallback;
    cur = &*it;
    if (dot == std::string::npos) break;
    begin = dot + 1;
  }
  try {
    return cur->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config field " + path + ": wrong type (" +
                      cur->dump() + ")");
  }
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.version = detail::field<int>(j, "version", 1);
  if (c.version != 1) {
    throw ConfigError("config field version: unsupported value " +
                      std::to_string(c.version));
  }
  c.seed = detail::field<std::uint64_t>(j, "seed", 0);
  c.scenario = detail::field<std::string>(j, "scenario", "");
  c.synth_task_count = detail::field<std::size_t>(j, "synth.task_count", 3);
  c.synth_samples = detail::field<std::size_t>(j, "synth.samples_per_task", 600);
  auto read_refs = [&c](const nlohmann::json& arr, const std::string& where,
                        const std::string& base) {
    if (!arr.is_array()) throw ConfigError("config field " + where + ": expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string at = where + "[" + std::to_string(i) + "]";
      DatasetRef ref;
      ref.name = detail::field<std::string>(arr[i], "name", "");
      ref.path = detail::field<std::string>(arr[i], "path", "");
      ref.class_count = detail::field<std::size_t>(arr[i], "class_count", 0);
      if (ref.name.empty()) throw ConfigError("config field " + at + ".name: required");
      if (ref.path.empty()) throw ConfigError("config field " + at + ".path: required");
      if (ref.class_count < 2) {
        throw ConfigError("config field " + at + ".class_count: must be >= 2");
      }
      if (!base.empty() && std::filesystem::path(ref.path).is_relative()) {
        ref.path = (std::filesystem::path(base) / ref.path).string();
      }
      c.datasets.push_back(std::move(ref));
    }
  };
  if (j.contains("datasets")) read_refs(j.at("datasets"), "datasets", "");
  const std::string manifest =
      detail::field<std::string>(j, "datasets_manifest", "");
  if (!manifest.empty()) {
    if (!c.datasets.empty()) {
      throw ConfigError("config: datasets and datasets_manifest are mutually exclusive");
    }
    std::ifstream ms(manifest);
    if (!ms) {
      throw ConfigError("config field datasets_manifest: file not found: " + manifest);
    }
    nlohmann::json mj;
    try {
      ms >> mj;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("manifest parse error in " + manifest + ": " + e.what());
    }
    read_refs(mj, "datasets_manifest", std::filesystem::path(manifest).parent_path().string());
  }
  c.train_frac = detail::field<double>(j, "split.train", 0.8);
  c.validation_frac = detail::field<double>(j, "split.validation", 0.1);
  c.embedding_dim = detail::field<std::size_t>(j, "model.embedding_dim", 300);
  c.hidden_dim = detail::field<std::size_t>(j, "model.hidden_dim", 100);
  c.shared_embedding = detail::field<bool>(j, "model.shared_embedding", false);
  c.coupling = detail::field<bool>(j, "topology.coupling", true);
  c.local_fusion = detail::field<bool>(j, "topology.local_fusion", true);
  c.global_fusion = detail::field<bool>(j, "topology.global_fusion", true);
  c.gate_self = detail::field<bool>(j, "topology.gate_self", true);
  c.learning_rate = detail::field<double>(j, "train.learning_rate", 0.1);
  c.l2_weight = detail::field<double>(j, "train.l2_weight", 1e-5);
  c.task_weights = detail::field<std::vector<double>>(j, "train.task_weights", {});
  c.n0 = detail::field<std::size_t>(j, "train.n0", 2);
  c.epochs = detail::field<std::size_t>(j, "train.epochs", 1);
  c.patience = detail::field<std::size_t>(j, "train.patience", 0);
  c.oriented_task = detail::field<std::size_t>(j, "oriented_task", 0);
  c.out_dir = detail::field<std::string>(j, "out_dir", "");
  c.validate();
  return c;
}

inline void ExperimentConfig::validate() const {
  if (scenario.empty() && datasets.empty()) {
    throw ConfigError("config: either scenario or datasets must be given");
  }
  if (!scenario.empty() && !datasets.empty()) {
    throw ConfigError("config: scenario and datasets are mutually exclusive");
  }
  if (!scenario.empty()) parse_scenario(scenario);  // throws on unknown preset
  if (learning_rate <= 0) throw ConfigError("config field train.learning_rate: must be > 0");
  if (l2_weight < 0) throw ConfigError("config field train.l2_weight: must be >= 0");
  if (n0 < 1) throw ConfigError("config field train.n0: must be >= 1");
  if (embedding_dim == 0) throw ConfigError("config field model.embedding_dim: must be > 0");
  if (hidden_dim == 0) throw ConfigError("config field model.hidden_dim: must be > 0");
  if (train_frac <= 0 || train_frac + validation_frac >= 1.0) {
    throw ConfigError("config field split: train/validation/test fractions must each be positive");
  }
}

inline ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return from_json(j);
}

inline nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["version"] = version;
  j["seed"] = seed;
  if (!scenario.empty()) {
    j["scenario"] = scenario;
    j["synth"] = {{"task_count", synth_task_count},
                  {"samples_per_task", synth_samples}};
  }
  if (!datasets.empty()) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& d : datasets) {
      arr.push_back({{"name", d.name}, {"path", d.path},
                     {"class_count", d.class_count}});
    }
    j["datasets"] = arr;
  }
  j["split"] = {{"train", train_frac}, {"validation", validation_frac}};
  j["model"] = {{"embedding_dim", embedding_dim},
                {"hidden_dim", hidden_dim},
                {"shared_embedding", shared_embedding}};
  j["topology"] = {{"coupling", coupling},
                   {"local_fusion", local_fusion},
                   {"global_fusion", global_fusion},
                   {"gate_self", gate_self}};
  j["train"] = {{"learning_rate", learning_rate}, {"l2_weight", l2_weight},
                {"task_weights", task_weights},   {"n0", n0},
                {"epochs", epochs},               {"patience", patience}};
  j["oriented_task"] = oriented_task;
  return j;
}

// ---- run orchestration -----------------------------------------------------

/// Output directory precedence: --out flag, then config.out_dir, then
/// <root>/<timestamp>-seed<seed> where root is $MTLSTM_OUT_ROOT or ./runs.
inline std::filesystem::path resolve_out_dir(const ExperimentConfig& cfg,
                                             const std::string& out_override) {
  if (!out_override.empty()) return out_override;
  if (!cfg.out_dir.empty()) return cfg.out_dir;
  const char* env_root = std::getenv("MTLSTM_OUT_ROOT");
  std::filesystem::path root = env_root != nullptr ? env_root : "runs";
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
  return root / (std::string(stamp) + "-seed" + std::to_string(cfg.seed));
}

struct LoadedData {
  std::vector<TaskDataset> datasets;
  std::vector<SplitIndices> splits;
};

inline LoadedData load_experiment_data(const ExperimentConfig& cfg) {
  LoadedData data;
  if (!cfg.scenario.empty()) {
    SynthSpec spec;
    spec.scenario = parse_scenario(cfg.scenario);
    spec.task_count = cfg.synth_task_count;
    spec.samples_per_task = cfg.synth_samples;
    spec.seed = Rng(cfg.seed).derive(0x73796e74ULL).seed();
    data.datasets = synth_generate(spec);
  } else {
    for (std::size_t i = 0; i < cfg.datasets.size(); ++i) {
      const auto& ref = cfg.datasets[i];
      if (!std::filesystem::exists(ref.path)) {
        throw ConfigError("config field datasets[" + std::to_string(i) +
                          "].path: file not found: " + ref.path);
      }
      data.datasets.push_back(load_dataset(ref.path, ref.name, ref.class_count));
    }
  }
  if (cfg.shared_embedding) unify_vocab(data.datasets);
  for (std::size_t k = 0; k < data.datasets.size(); ++k) {
    Rng split_rng = Rng(cfg.seed).derive(0x73706c69ULL + k);
    data.splits.push_back(split_dataset(data.datasets[k].samples.size(),
                                        cfg.train_frac, cfg.validation_frac,
                                        split_rng));
  }
  return data;
}

inline void write_effective_config(const ExperimentConfig& cfg,
                                   const std::filesystem::path& dir) {
  std::ofstream os(dir / "config.json", std::ios::binary);
  os << cfg.to_json().dump(2) << '\n';
}

inline void print_accuracy_table(const std::vector<std::string>& names,
                                 const std::vector<double>& accuracies) {
  std::printf("%-20s %s\n", "task", "test_accuracy");
  for (std::size_t k = 0; k < names.size(); ++k) {
    std::printf("%-20s %.4f\n", names[k].c_str(), accuracies[k]);
  }
}

/// train: TOS collections -> stochastic training -> checkpoint + metrics
/// CSV + accuracy report in the run directory.
inline int run_train(const ExperimentConfig& cfg, const std::string& out_override) {
  LoadedData data = load_experiment_data(cfg);
  const std::size_t k_count = data.datasets.size();
  if (cfg.oriented_task >= k_count) {
    throw ConfigError("config field oriented_task: out of range");
  }
  std::filesystem::path dir = resolve_out_dir(cfg, out_override);
  std::filesystem::create_directories(dir);

  std::vector<std::vector<std::size_t>> train_pools, test_pools;
  for (const auto& s : data.splits) {
    train_pools.push_back(s.train);
    test_pools.push_back(s.test);
  }
  Rng tos_rng = Rng(cfg.seed).derive(0x746f73ULL);
  auto collections = tos_sample(data.datasets, train_pools, cfg.oriented_task,
                                cfg.n0, tos_rng);

  ModelConfig mc = model_config_for(data.datasets, cfg.embedding_dim,
                                    cfg.hidden_dim, cfg.shared_embedding,
                                    cfg.gate_self);
  Rng init_rng = Rng(cfg.seed).derive(0x696e6974ULL);
  MultiTaskModel model = MultiTaskModel::init(mc, cfg.topology(k_count), init_rng);

  TrainResult result = train(model, collections, cfg.train_config());
  auto accuracies = evaluate_accuracy(model, data.datasets, test_pools,
                                      train_pools, cfg.seed);

  std::vector<std::string> names;
  for (const auto& ds : data.datasets) names.push_back(ds.name);
  write_effective_config(cfg, dir);
  write_metrics_csv((dir / "metrics.csv").string(), names, result);
  write_accuracy_csv((dir / "accuracy.csv").string(), names, accuracies);
  write_eval_report((dir / "report.txt").string(), names, accuracies, &result);
  model.save((dir / "checkpoint.bin").string());

  std::printf("trained %zu steps on %zu collections (oriented task %zu)\n",
              result.trajectory.size(), collections.size(), cfg.oriented_task);
  print_accuracy_table(names, accuracies);
  std::printf("outputs: %s\n", dir.string().c_str());
  return 0;
}

/// gradcheck: finite-difference verification of the full joint loss on one
/// sampled collection; prints the worst relative error per parameter group.
inline int run_gradcheck(const ExperimentConfig& cfg, double tolerance = 1e-4,
                         const std::string& corrupt = "") {
  LoadedData data = load_experiment_data(cfg);
  std::vector<std::vector<std::size_t>> train_pools;
  for (const auto& s : data.splits) train_pools.push_back(s.train);
  Rng tos_rng = Rng(cfg.seed).derive(0x746f73ULL);
  auto collections = tos_sample(data.datasets, train_pools, cfg.oriented_task,
                                1, tos_rng);

  ModelConfig mc = model_config_for(data.datasets, cfg.embedding_dim,
                                    cfg.hidden_dim, cfg.shared_embedding,
                                    cfg.gate_self);
  Rng init_rng = Rng(cfg.seed).derive(0x696e6974ULL);
  MultiTaskModel model =
      MultiTaskModel::init(mc, cfg.topology(data.datasets.size()), init_rng, 0.5);

  GradCheckReport report = gradient_check(
      model, collections.front(),
      cfg.train_config().weights_for(data.datasets.size()), cfg.l2_weight,
      1e-4, corrupt);
  std::printf("%-28s %s\n", "parameter group", "max_rel_err");
  for (const auto& g : report.groups) {
    std::printf("%-28s %.3e\n", g.name.c_str(), g.max_rel_err);
  }
  std::printf("worst: %.3e (tolerance %.1e): %s\n", report.worst, tolerance,
              report.pass(tolerance) ? "PASS" : "FAIL");
  return report.pass(tolerance) ? 0 : 1;
}

/// sweep-n0: one full training run per requested n0, all from the same
/// base seed; emits accuracy-vs-n0 rows.
inline int run_sweep(const ExperimentConfig& cfg,
                     const std::vector<std::size_t>& n0_values,
                     const std::string& out_override) {
  if (n0_values.empty()) throw ConfigError("sweep: need at least one n0 value");
  for (std::size_t v : n0_values) {
    if (v < 1) throw ConfigError("sweep: n0 values must be >= 1");
  }
  LoadedData data = load_experiment_data(cfg);
  std::filesystem::path dir = resolve_out_dir(cfg, out_override);
  std::filesystem::create_directories(dir);

  std::vector<std::vector<std::size_t>> train_pools, test_pools;
  for (const auto& s : data.splits) {
    train_pools.push_back(s.train);
    test_pools.push_back(s.test);
  }
  std::vector<std::string> names;
  for (const auto& ds : data.datasets) names.push_back(ds.name);

  std::vector<std::pair<std::size_t, std::vector<double>>> rows;
  for (std::size_t n0 : n0_values) {
    Rng tos_rng = Rng(cfg.seed).derive(0x746f73ULL + n0);
    auto collections = tos_sample(data.datasets, train_pools, cfg.oriented_task,
                                  n0, tos_rng);
    ModelConfig mc = model_config_for(data.datasets, cfg.embedding_dim,
                                      cfg.hidden_dim, cfg.shared_embedding,
                                      cfg.gate_self);
    Rng init_rng = Rng(cfg.seed).derive(0x696e6974ULL);
    MultiTaskModel model = MultiTaskModel::init(
        mc, cfg.topology(data.datasets.size()), init_rng);
    TrainConfig tc = cfg.train_config();
    tc.n0 = n0;
    train(model, collections, tc);
    auto accuracies = evaluate_accuracy(model, data.datasets, test_pools,
                                        train_pools, cfg.seed);
    std::printf("n0=%zu:\n", n0);
    print_accuracy_table(names, accuracies);
    rows.emplace_back(n0, accuracies);
  }
  write_effective_config(cfg, dir);
  write_sweep_csv((dir / "sweep_n0.csv").string(), names, rows);
  std::printf("outputs: %s\n", dir.string().c_str());
  return 0;
}

/// ppg: the full pair-wise performance gain matrix as plot-ready CSV.
inline int run_ppg(const ExperimentConfig& cfg, const std::string& out_override) {
  LoadedData data = load_experiment_data(cfg);
  if (data.datasets.size() < 2) {
    throw ConfigError("ppg: need at least two tasks");
  }
  std::filesystem::path dir = resolve_out_dir(cfg, out_override);
  std::filesystem::create_directories(dir);

  PairTrainOptions opt;
  opt.train = cfg.train_config();
  opt.shared_embedding = cfg.shared_embedding;
  opt.coupling = cfg.coupling;
  opt.local_fusion = cfg.local_fusion;
  opt.global_fusion = false;
  opt.train_frac = cfg.train_frac;
  opt.validation_frac = cfg.validation_frac;
  PpgResult result = ppg_matrix(data.datasets, opt);

  write_effective_config(cfg, dir);
  write_ppg_csv((dir / "ppg.csv").string(), result.task_names, result.matrix);
  std::printf("%-16s", "ppg");
  for (const auto& n : result.task_names) std::printf(" %12s", n.c_str());
  std::printf("\n");
  for (std::size_t i = 0; i < result.task_names.size(); ++i) {
    std::printf("%-16s", result.task_names[i].c_str());
    for (std::size_t j = 0; j < result.task_names.size(); ++j) {
      std::printf(" %12.4f", result.matrix[i][j]);
    }
    std::printf("\n");
  }
  std::printf("outputs: %s\n", dir.string().c_str());
  return 0;
}

/// synth: generates the scenario preset and writes one dataset file per
/// task plus a manifest that later runs can reference.
inline int run_synth(const ExperimentConfig& cfg, const std::string& out_override) {
  if (cfg.scenario.empty()) {
    throw ConfigError("synth: config must name a scenario preset");
  }
  LoadedData data = load_experiment_data(cfg);
  std::filesystem::path dir = resolve_out_dir(cfg, out_override);
  std::filesystem::create_directories(dir);

  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& ds : data.datasets) {
    const std::string file = ds.name + ".txt";
    save_dataset((dir / file).string(), ds);
    manifest.push_back({{"name", ds.name},
                        {"path", file},
                        {"class_count", ds.class_count}});
    std::printf("wrote %s (%zu samples, %zu classes, vocab %zu)\n",
                (dir / file).string().c_str(), ds.samples.size(),
                ds.class_count, ds.vocab.size());
  }
  std::ofstream os(dir / "manifest.json", std::ios::binary);
  os << manifest.dump(2) << '\n';
  std::printf("outputs: %s\n", dir.string().c_str());
  return 0;
}

}  // namespace mtlstm
