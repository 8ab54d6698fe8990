#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtlstm/rng.hpp"
#include "mtlstm/vocab.hpp"

namespace mtlstm {

class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Sample {
  std::vector<int> tokens;
  int label = 0;
};

struct TaskDataset {
  std::string name;
  std::size_t class_count = 0;
  Vocab vocab;
  std::vector<Sample> samples;
};

/// One aligned K-tuple of input sequences with K labels: the atomic
/// training unit. Sequences are right-padded to a common length; true
/// lengths and source sample indices are kept for readout and for
/// train/test provenance.
struct SampleCollection {
  std::vector<std::vector<int>> inputs;
  std::vector<int> labels;
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> sources;
};

/// Right-pads the sequences with PAD to their maximum length.
inline SampleCollection pad_collection(std::vector<std::vector<int>> seqs,
                                       std::vector<int> labels,
                                       std::vector<std::size_t> sources = {}) {
  if (seqs.empty() || seqs.size() != labels.size()) {
    throw DataError("pad_collection: need one label per sequence");
  }
  SampleCollection c;
  std::size_t max_len = 0;
  for (const auto& s : seqs) {
    if (s.empty()) throw DataError("pad_collection: empty sequence");
    max_len = std::max(max_len, s.size());
  }
  for (auto& s : seqs) {
    c.lengths.push_back(s.size());
    s.resize(max_len, kPadToken);
  }
  c.inputs = std::move(seqs);
  c.labels = std::move(labels);
  c.sources = std::move(sources);
  return c;
}

/// Strips the padding again using the recorded true lengths.
inline std::vector<std::vector<int>> unpad_collection(const SampleCollection& c) {
  std::vector<std::vector<int>> out;
  for (std::size_t k = 0; k < c.inputs.size(); ++k) {
    out.emplace_back(c.inputs[k].begin(),
                     c.inputs[k].begin() + static_cast<long>(c.lengths[k]));
  }
  return out;
}

// ---- task oriented sampling -------------------------------------------

/// Builds N = n0 * |pool_k| aligned collections biased toward the oriented
/// task k: its pool is repeated n0 times exactly, the other pools are drawn
/// without replacement when large enough and with replacement otherwise,
/// then one sample per task is paired off without replacement.
inline std::vector<SampleCollection> tos_sample(
    const std::vector<TaskDataset>& datasets,
    const std::vector<std::vector<std::size_t>>& pools, std::size_t oriented,
    std::size_t n0, Rng& rng) {
  const std::size_t k_count = datasets.size();
  if (k_count == 0) throw DataError("tos_sample: no datasets");
  if (pools.size() != k_count) {
    throw DataError("tos_sample: need one sample pool per task");
  }
  if (oriented >= k_count) throw DataError("tos_sample: oriented task out of range");
  if (n0 < 1) throw DataError("tos_sample: n0 must be >= 1");
  for (std::size_t i = 0; i < k_count; ++i) {
    if (pools[i].empty()) {
      throw DataError("tos_sample: empty dataset for task " + datasets[i].name);
    }
  }

  const std::size_t total = n0 * pools[oriented].size();
  std::vector<std::vector<std::size_t>> sets(k_count);
  for (std::size_t i = 0; i < k_count; ++i) {
    std::vector<std::size_t>& s = sets[i];
    s.reserve(total);
    if (i == oriented) {
      for (std::size_t idx : pools[i]) {
        for (std::size_t r = 0; r < n0; ++r) s.push_back(idx);
      }
    } else if (pools[i].size() >= total) {
      std::vector<std::size_t> shuffled = pools[i];
      rng.shuffle(shuffled);
      s.assign(shuffled.begin(), shuffled.begin() + static_cast<long>(total));
    } else {
      for (std::size_t j = 0; j < total; ++j) {
        s.push_back(pools[i][rng.uniform_index(pools[i].size())]);
      }
    }
    // pairing without replacement == aligned zip of shuffled sets
    rng.shuffle(s);
  }

  std::vector<SampleCollection> out;
  out.reserve(total);
  for (std::size_t j = 0; j < total; ++j) {
    std::vector<std::vector<int>> seqs;
    std::vector<int> labels;
    std::vector<std::size_t> sources;
    for (std::size_t i = 0; i < k_count; ++i) {
      const Sample& sample = datasets[i].samples[sets[i][j]];
      seqs.push_back(sample.tokens);
      labels.push_back(sample.label);
      sources.push_back(sets[i][j]);
    }
    out.push_back(pad_collection(std::move(seqs), std::move(labels),
                                 std::move(sources)));
  }
  return out;
}

inline std::vector<SampleCollection> tos_sample(
    const std::vector<TaskDataset>& datasets, std::size_t oriented,
    std::size_t n0, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> pools;
  for (const auto& ds : datasets) {
    std::vector<std::size_t> all(ds.samples.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    pools.push_back(std::move(all));
  }
  Rng rng(seed);
  return tos_sample(datasets, pools, oriented, n0, rng);
}

// ---- dataset splits -----------------------------------------------------

struct SplitIndices {
  std::vector<std::size_t> train, validation, test;
};

/// Seeded shuffle split; fractions are train and validation shares, the
/// remainder is the test set.
inline SplitIndices split_dataset(std::size_t count, double train_frac,
                                  double validation_frac, Rng& rng) {
  if (train_frac < 0 || validation_frac < 0 ||
      train_frac + validation_frac > 1.0 + 1e-12) {
    throw DataError("split_dataset: invalid fractions");
  }
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  rng.shuffle(order);
  SplitIndices s;
  const auto n_train = static_cast<std::size_t>(train_frac * static_cast<double>(count));
  const auto n_val =
      static_cast<std::size_t>(validation_frac * static_cast<double>(count));
  for (std::size_t i = 0; i < count; ++i) {
    if (i < n_train) {
      s.train.push_back(order[i]);
    } else if (i < n_train + n_val) {
      s.validation.push_back(order[i]);
    } else {
      s.test.push_back(order[i]);
    }
  }
  return s;
}

// ---- file io -------------------------------------------------------------

/// Parses the one-sample-per-line format "label<TAB>token token ...".
/// With no shared vocabulary the vocabulary is built from this corpus;
/// otherwise unknown tokens map to UNK.
inline TaskDataset load_dataset(const std::string& path, std::string name,
                                std::size_t class_count,
                                const Vocab* shared_vocab = nullptr) {
  std::ifstream is(path);
  if (!is) throw DataError("load_dataset: cannot open " + path);
  if (class_count < 2) throw DataError("load_dataset: class_count must be >= 2");

  std::vector<int> labels;
  std::vector<std::vector<std::string>> docs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError("load_dataset: " + path + ":" + std::to_string(line_no) +
                      ": expected 'label<TAB>tokens'");
    }
    int label = 0;
    try {
      std::size_t used = 0;
      label = std::stoi(line.substr(0, tab), &used);
      if (used != tab) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw DataError("load_dataset: " + path + ":" + std::to_string(line_no) +
                      ": malformed label");
    }
    if (label < 0 || static_cast<std::size_t>(label) >= class_count) {
      throw DataError("load_dataset: " + path + ":" + std::to_string(line_no) +
                      ": label " + std::to_string(label) +
                      " out of range for " + std::to_string(class_count) +
                      " classes");
    }
    std::istringstream rest(line.substr(tab + 1));
    std::vector<std::string> words;
    std::string w;
    while (rest >> w) words.push_back(w);
    if (words.empty()) {
      throw DataError("load_dataset: " + path + ":" + std::to_string(line_no) +
                      ": empty token sequence");
    }
    labels.push_back(label);
    docs.push_back(std::move(words));
  }
  if (docs.empty()) throw DataError("load_dataset: empty dataset: " + path);

  TaskDataset ds;
  ds.name = std::move(name);
  ds.class_count = class_count;
  ds.vocab = shared_vocab != nullptr ? *shared_vocab : Vocab::build(docs);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    Sample s;
    s.label = labels[i];
    for (const std::string& word : docs[i]) {
      s.tokens.push_back(ds.vocab.id_or_unk(word));
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline void save_dataset(const std::string& path, const TaskDataset& ds) {
  std::ofstream os(path);
  if (!os) throw DataError("save_dataset: cannot open " + path + " for writing");
  for (const Sample& s : ds.samples) {
    os << s.label << '\t';
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      if (i) os << ' ';
      os << ds.vocab.word(s.tokens[i]);
    }
    os << '\n';
  }
  if (!os) throw DataError("save_dataset: write failed for " + path);
}

// ---- synthetic correlated tasks ------------------------------------------

enum class Scenario { kMultiCardinality, kMultiDomain, kMultiObjective };

inline Scenario parse_scenario(const std::string& s) {
  if (s == "multi-cardinality") return Scenario::kMultiCardinality;
  if (s == "multi-domain") return Scenario::kMultiDomain;
  if (s == "multi-objective") return Scenario::kMultiObjective;
  throw DataError("unknown scenario preset: " + s);
}

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::kMultiCardinality: return "multi-cardinality";
    case Scenario::kMultiDomain: return "multi-domain";
    case Scenario::kMultiObjective: return "multi-objective";
  }
  return "?";
}

struct SynthSpec {
  Scenario scenario = Scenario::kMultiDomain;
  std::size_t task_count = 3;
  std::size_t samples_per_task = 600;
  std::uint64_t seed = 0;
  // generator knobs; zero / negative means the preset default
  std::size_t tokens_per_cluster = 0;
  double p_signal = -1.0;
  double p_flip = -1.0;
};

namespace detail {

// Shared latent token-cluster generator. Every task's label is a function
// of cluster counts; scenarios differ in which clusters carry each task's
// signal and in the per-task cardinalities and noise vocabularies.
// Signal vocabulary is deliberately wide: each signal word is rare, so
// word-feature learning is the bottleneck that joint training amortizes.
struct ClusterUniverse {
  std::size_t tokens_per_cluster = 48;
  std::size_t neutral_tokens = 40;
  std::size_t domain_tokens = 20;

  std::string signal(std::size_t group, std::size_t cls, std::size_t i) const {
    return "s" + std::to_string(group) + "c" + std::to_string(cls) + "_" +
           std::to_string(i);
  }
  std::string neutral(std::size_t i) const { return "n_" + std::to_string(i); }
  std::string domain(std::size_t task, std::size_t i) const {
    return "d" + std::to_string(task) + "_" + std::to_string(i);
  }

  std::string draw_signal(Rng& rng, std::size_t group, std::size_t cls) const {
    return signal(group, cls, rng.uniform_index(tokens_per_cluster));
  }
  std::string draw_neutral(Rng& rng) const {
    return neutral(rng.uniform_index(neutral_tokens));
  }
  std::string draw_domain(Rng& rng, std::size_t task) const {
    return domain(task, rng.uniform_index(domain_tokens));
  }
};

struct TaskRecipe {
  std::string name;
  std::size_t class_count = 2;
  std::size_t signal_group = 0;   // which cluster group labels this task
  std::size_t min_len = 8, max_len = 14;
  double p_signal = 0.3;          // chance a position carries label signal
  double p_flip = 0.15;           // signal drawn from a wrong class instead
  double p_domain = 0.25;         // chance of a domain-specific noise token
  bool cross_group_noise = false; // mix in other groups' signal tokens
  std::size_t group_count = 1;    // total groups when cross-noise is on
};

inline std::vector<std::vector<std::string>> make_docs(
    const ClusterUniverse& u, const TaskRecipe& r, std::size_t task_index,
    std::size_t count, std::vector<int>& labels, Rng& rng) {
  // exact class balance, shuffled afterwards
  labels.clear();
  for (std::size_t i = 0; i < count; ++i) {
    labels.push_back(static_cast<int>(i % r.class_count));
  }
  rng.shuffle(labels);

  std::vector<std::vector<std::string>> docs;
  docs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto cls = static_cast<std::size_t>(labels[i]);
    const std::size_t len =
        r.min_len + rng.uniform_index(r.max_len - r.min_len + 1);
    std::vector<std::string> doc;
    doc.reserve(len);
    for (std::size_t t = 0; t < len; ++t) {
      const double roll = rng.uniform();
      if (roll < r.p_signal) {
        std::size_t emitted = cls;
        if (rng.uniform() < r.p_flip) {
          emitted = rng.uniform_index(r.class_count);
        }
        doc.push_back(u.draw_signal(rng, r.signal_group, emitted));
      } else if (roll < r.p_signal + r.p_domain) {
        doc.push_back(u.draw_domain(rng, task_index));
      } else if (r.cross_group_noise && rng.uniform() < 0.5) {
        std::size_t other = rng.uniform_index(r.group_count);
        std::size_t any_cls = rng.uniform_index(r.class_count);
        doc.push_back(u.draw_signal(rng, other, any_cls));
      } else {
        doc.push_back(u.draw_neutral(rng));
      }
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

}  // namespace detail

/// Generates correlated synthetic tasks from a shared latent token-cluster
/// model. Multi-cardinality varies sequence lengths and class counts over
/// one shared signal; multi-domain keeps one objective over overlapping
/// vocabularies with domain noise; multi-objective gives every task its
/// own unrelated labeling function over a shared token universe.
inline std::vector<TaskDataset> synth_generate(const SynthSpec& spec) {
  if (spec.task_count < 1) throw DataError("synth_generate: need at least one task");
  detail::ClusterUniverse universe;
  if (spec.tokens_per_cluster > 0) {
    universe.tokens_per_cluster = spec.tokens_per_cluster;
  }
  std::vector<detail::TaskRecipe> recipes;

  for (std::size_t k = 0; k < spec.task_count; ++k) {
    detail::TaskRecipe r;
    if (spec.p_signal > 0) r.p_signal = spec.p_signal;
    if (spec.p_flip >= 0) r.p_flip = spec.p_flip;
    switch (spec.scenario) {
      case Scenario::kMultiDomain:
        r.name = "domain" + std::to_string(k);
        break;
      case Scenario::kMultiCardinality:
        r.name = "cardinality" + std::to_string(k);
        r.class_count = k % 2 == 1 ? 3 : 2;
        r.min_len = 4 + 4 * k;
        r.max_len = 8 + 5 * k;
        break;
      case Scenario::kMultiObjective:
        r.name = "objective" + std::to_string(k);
        r.signal_group = k;
        r.cross_group_noise = true;
        r.group_count = spec.task_count;
        r.p_domain = 0.05;
        break;
    }
    recipes.push_back(std::move(r));
  }

  Rng master(spec.seed);
  std::vector<TaskDataset> out;
  for (std::size_t k = 0; k < spec.task_count; ++k) {
    Rng task_rng = master.derive(k);
    std::vector<int> labels;
    auto docs = detail::make_docs(universe, recipes[k], k,
                                  spec.samples_per_task, labels, task_rng);
    TaskDataset ds;
    ds.name = recipes[k].name;
    ds.class_count = recipes[k].class_count;
    ds.vocab = Vocab::build(docs);
    for (std::size_t i = 0; i < docs.size(); ++i) {
      Sample s;
      s.label = labels[i];
      for (const auto& w : docs[i]) s.tokens.push_back(ds.vocab.id_or_unk(w));
      ds.samples.push_back(std::move(s));
    }
    out.push_back(std::move(ds));
  }
  return out;
}

/// Rebuilds all datasets over one merged vocabulary so a shared embedding
/// table can be used. Ids change; words and labels do not.
inline Vocab unify_vocab(std::vector<TaskDataset>& datasets) {
  std::vector<std::vector<std::string>> all_docs;
  for (const auto& ds : datasets) {
    for (const Sample& s : ds.samples) {
      std::vector<std::string> doc;
      for (int t : s.tokens) doc.push_back(ds.vocab.word(t));
      all_docs.push_back(std::move(doc));
    }
  }
  Vocab merged = Vocab::build(all_docs);
  for (auto& ds : datasets) {
    for (Sample& s : ds.samples) {
      for (int& t : s.tokens) t = merged.id_or_unk(ds.vocab.word(t));
    }
    ds.vocab = merged;
  }
  return merged;
}

}  // namespace mtlstm
