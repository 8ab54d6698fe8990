#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "catch2/catch_amalgamated.hpp"
#include "mtlstm/data.hpp"

using namespace mtlstm;

namespace {

TaskDataset tiny_dataset(const std::string& name, std::size_t count,
                         std::size_t classes = 2) {
  TaskDataset ds;
  ds.name = name;
  ds.class_count = classes;
  for (std::size_t i = 0; i < count; ++i) {
    Sample s;
    s.label = static_cast<int>(i % classes);
    s.tokens = {2 + static_cast<int>(i), 2};
    ds.vocab.add("w" + std::to_string(i));
    ds.samples.push_back(s);
  }
  return ds;
}

std::set<std::string> word_set(const TaskDataset& ds) {
  std::set<std::string> out;
  for (const Sample& s : ds.samples) {
    for (int t : s.tokens) out.insert(ds.vocab.word(t));
  }
  return out;
}

}  // namespace

TEST_CASE("tos_sample follows the sampling algorithm", "[data]") {
  SECTION("worked trace: K=2, N1=3, N2=5, oriented first task, n0=2") {
    std::vector<TaskDataset> ds = {tiny_dataset("a", 3), tiny_dataset("b", 5)};
    auto collections = tos_sample(ds, 0, 2, 42);
    REQUIRE(collections.size() == 6);  // N = n0 * N_k
    std::map<std::size_t, int> oriented_freq;
    for (const auto& c : collections) {
      REQUIRE(c.inputs.size() == 2);
      REQUIRE(c.labels.size() == 2);
      ++oriented_freq[c.sources[0]];
    }
    REQUIRE(oriented_freq.size() == 3);  // every oriented sample appears
    for (auto [idx, freq] : oriented_freq) {
      REQUIRE(idx < 3);
      REQUIRE(freq == 2);  // repeated exactly n0 times
    }
    // the companion task (5 < 6) is drawn with replacement from all 5
    for (const auto& c : collections) REQUIRE(c.sources[1] < 5);
  }
  SECTION("n0=1 with equal sizes permutes every dataset") {
    std::vector<TaskDataset> ds = {tiny_dataset("a", 4), tiny_dataset("b", 4),
                                   tiny_dataset("c", 4)};
    auto collections = tos_sample(ds, 1, 1, 7);
    REQUIRE(collections.size() == 4);
    for (std::size_t k = 0; k < 3; ++k) {
      std::set<std::size_t> seen;
      for (const auto& c : collections) seen.insert(c.sources[k]);
      REQUIRE(seen.size() == 4);  // each sample exactly once
    }
  }
  SECTION("census over randomized shapes") {
    Rng shape_rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t k_count = 2 + shape_rng.uniform_index(3);
      std::vector<TaskDataset> ds;
      for (std::size_t k = 0; k < k_count; ++k) {
        ds.push_back(tiny_dataset("t" + std::to_string(k),
                                  1 + shape_rng.uniform_index(50)));
      }
      const std::size_t oriented = shape_rng.uniform_index(k_count);
      const std::size_t n0 = 1 + shape_rng.uniform_index(3);
      auto collections =
          tos_sample(ds, oriented, n0, 1000 + static_cast<std::uint64_t>(trial));
      const std::size_t total = n0 * ds[oriented].samples.size();
      REQUIRE(collections.size() == total);

      for (std::size_t k = 0; k < k_count; ++k) {
        std::map<std::size_t, std::size_t> freq;
        for (const auto& c : collections) ++freq[c.sources[k]];
        if (k == oriented) {
          REQUIRE(freq.size() == ds[k].samples.size());
          for (auto [idx, f] : freq) REQUIRE(f == n0);
        } else if (ds[k].samples.size() >= total) {
          for (auto [idx, f] : freq) REQUIRE(f == 1);  // no duplicates
        }
      }
    }
  }
  SECTION("reproducible from the seed") {
    std::vector<TaskDataset> ds = {tiny_dataset("a", 6), tiny_dataset("b", 9)};
    auto first = tos_sample(ds, 0, 2, 5);
    auto second = tos_sample(ds, 0, 2, 5);
    REQUIRE(first.size() == second.size());
    for (std::size_t i = 0; i < first.size(); ++i) {
      REQUIRE(first[i].sources == second[i].sources);
      REQUIRE(first[i].inputs == second[i].inputs);
    }
  }
  SECTION("errors") {
    std::vector<TaskDataset> ds = {tiny_dataset("a", 3), tiny_dataset("b", 3)};
    REQUIRE_THROWS_AS(tos_sample(ds, 0, 0, 1), DataError);
    ds[1].samples.clear();
    REQUIRE_THROWS_WITH(tos_sample(ds, 0, 1, 1),
                        Catch::Matchers::ContainsSubstring("empty dataset"));
  }
}

TEST_CASE("pad_collection", "[data]") {
  SECTION("equal lengths stay unchanged") {
    auto c = pad_collection({{2, 3}, {4, 5}}, {0, 1});
    REQUIRE(c.inputs[0] == std::vector<int>{2, 3});
    REQUIRE(c.inputs[1] == std::vector<int>{4, 5});
    REQUIRE(c.lengths == std::vector<std::size_t>{2, 2});
  }
  SECTION("shorter sequences are right-padded with PAD") {
    auto c = pad_collection({{2, 3}, {4, 5, 6, 7, 8}}, {1, 0});
    REQUIRE(c.inputs[0] == std::vector<int>{2, 3, kPadToken, kPadToken, kPadToken});
    REQUIRE(c.lengths == std::vector<std::size_t>{2, 5});
  }
  SECTION("unpadding recovers the originals") {
    std::vector<std::vector<int>> raw = {{5, 6, 7}, {8}, {9, 10, 11, 12}};
    auto c = pad_collection(raw, {0, 1, 0});
    REQUIRE(unpad_collection(c) == raw);
  }
}

TEST_CASE("load_dataset", "[data]") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "mtlstm_data_test";
  fs::create_directories(dir);

  SECTION("parses the line format") {
    fs::path p = dir / "ok.txt";
    std::ofstream(p) << "1\thello world\n0\tworld hello hello\n";
    TaskDataset ds = load_dataset(p.string(), "ok", 2);
    REQUIRE(ds.samples.size() == 2);
    REQUIRE(ds.samples[0].label == 1);
    REQUIRE(ds.samples[0].tokens.size() == 2);
    // "hello" occurs 3 times, "world" 2; ids follow frequency
    REQUIRE(ds.vocab.word(ds.samples[0].tokens[0]) == "hello");
    REQUIRE(ds.samples[0].tokens[0] == 2);
    REQUIRE(ds.samples[0].tokens[1] == 3);
  }
  SECTION("empty file is an error") {
    fs::path p = dir / "empty.txt";
    std::ofstream(p) << "";
    REQUIRE_THROWS_WITH(load_dataset(p.string(), "e", 2),
                        Catch::Matchers::ContainsSubstring("empty dataset"));
  }
  SECTION("malformed line names the line number") {
    fs::path p = dir / "bad.txt";
    std::ofstream(p) << "1\tok tokens\nno tab here\n";
    REQUIRE_THROWS_WITH(load_dataset(p.string(), "b", 2),
                        Catch::Matchers::ContainsSubstring(":2:"));
  }
  SECTION("label out of declared range") {
    fs::path p = dir / "range.txt";
    std::ofstream(p) << "5\ttok\n";
    REQUIRE_THROWS_WITH(load_dataset(p.string(), "r", 2),
                        Catch::Matchers::ContainsSubstring("out of range"));
  }
  SECTION("vocabulary ids are stable across runs") {
    fs::path p = dir / "stable.txt";
    // pairs with tied frequencies force the lexicographic tie-break
    std::ofstream(p) << "0\tbeta alpha\n1\tdelta gamma\n";
    TaskDataset a = load_dataset(p.string(), "s", 2);
    TaskDataset b = load_dataset(p.string(), "s", 2);
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
      REQUIRE(a.samples[i].tokens == b.samples[i].tokens);
    }
    REQUIRE(a.vocab.word(2) == "alpha");  // ties resolve lexicographically
    REQUIRE(a.vocab.word(3) == "beta");
  }
  SECTION("save and reload round-trips token ids") {
    SynthSpec spec;
    spec.scenario = Scenario::kMultiDomain;
    spec.task_count = 1;
    spec.samples_per_task = 40;
    spec.seed = 3;
    TaskDataset ds = synth_generate(spec)[0];
    fs::path p = dir / "round.txt";
    save_dataset(p.string(), ds);
    TaskDataset back = load_dataset(p.string(), ds.name, ds.class_count);
    REQUIRE(back.samples.size() == ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      REQUIRE(back.samples[i].label == ds.samples[i].label);
      REQUIRE(back.samples[i].tokens == ds.samples[i].tokens);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("synth_generate", "[data]") {
  SECTION("same seed reproduces identical datasets") {
    SynthSpec spec;
    spec.samples_per_task = 50;
    spec.seed = 9;
    auto a = synth_generate(spec);
    auto b = synth_generate(spec);
    REQUIRE(a.size() == b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      REQUIRE(a[k].samples.size() == b[k].samples.size());
      for (std::size_t i = 0; i < a[k].samples.size(); ++i) {
        REQUIRE(a[k].samples[i].tokens == b[k].samples[i].tokens);
        REQUIRE(a[k].samples[i].label == b[k].samples[i].label);
      }
    }
  }
  SECTION("multi-domain vocabularies overlap by at least half") {
    SynthSpec spec;
    spec.scenario = Scenario::kMultiDomain;
    spec.samples_per_task = 200;
    spec.seed = 4;
    auto tasks = synth_generate(spec);
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      for (std::size_t j = i + 1; j < tasks.size(); ++j) {
        auto wi = word_set(tasks[i]);
        auto wj = word_set(tasks[j]);
        std::vector<std::string> common;
        std::set_intersection(wi.begin(), wi.end(), wj.begin(), wj.end(),
                              std::back_inserter(common));
        double overlap = static_cast<double>(common.size()) /
                         static_cast<double>(std::min(wi.size(), wj.size()));
        REQUIRE(overlap >= 0.5);
      }
    }
  }
  SECTION("labels are balanced") {
    for (Scenario sc : {Scenario::kMultiCardinality, Scenario::kMultiDomain,
                        Scenario::kMultiObjective}) {
      SynthSpec spec;
      spec.scenario = sc;
      spec.samples_per_task = 300;
      spec.seed = 5;
      for (const TaskDataset& ds : synth_generate(spec)) {
        std::map<int, std::size_t> census;
        for (const Sample& s : ds.samples) ++census[s.label];
        for (auto [label, count] : census) {
          double freq = static_cast<double>(count) /
                        static_cast<double>(ds.samples.size());
          REQUIRE(freq ==
                  Catch::Approx(1.0 / static_cast<double>(ds.class_count))
                      .margin(0.05));
        }
      }
    }
  }
  SECTION("multi-cardinality varies lengths and class counts") {
    SynthSpec spec;
    spec.scenario = Scenario::kMultiCardinality;
    spec.samples_per_task = 100;
    spec.seed = 6;
    auto tasks = synth_generate(spec);
    REQUIRE(tasks[0].class_count == 2);
    REQUIRE(tasks[1].class_count == 3);
    REQUIRE(tasks[2].class_count == 2);
    auto avg_len = [](const TaskDataset& ds) {
      double total = 0;
      for (const Sample& s : ds.samples) total += static_cast<double>(s.tokens.size());
      return total / static_cast<double>(ds.samples.size());
    };
    REQUIRE(avg_len(tasks[0]) < avg_len(tasks[1]));
    REQUIRE(avg_len(tasks[1]) < avg_len(tasks[2]));
  }
  SECTION("unknown preset is an error") {
    REQUIRE_THROWS_AS(parse_scenario("multi-banana"), DataError);
  }
  SECTION("unify_vocab keeps words and aligns ids") {
    SynthSpec spec;
    spec.samples_per_task = 60;
    spec.seed = 7;
    auto tasks = synth_generate(spec);
    std::vector<std::vector<std::string>> words_before;
    for (const auto& ds : tasks) {
      std::vector<std::string> w;
      for (int t : ds.samples[0].tokens) w.push_back(ds.vocab.word(t));
      words_before.push_back(w);
    }
    Vocab merged = unify_vocab(tasks);
    for (std::size_t k = 0; k < tasks.size(); ++k) {
      REQUIRE(tasks[k].vocab.size() == merged.size());
      std::vector<std::string> w;
      for (int t : tasks[k].samples[0].tokens) w.push_back(tasks[k].vocab.word(t));
      REQUIRE(w == words_before[k]);
    }
  }
}

TEST_CASE("split_dataset partitions indices", "[data]") {
  Rng rng(8);
  SplitIndices s = split_dataset(100, 0.8, 0.1, rng);
  REQUIRE(s.train.size() == 80);
  REQUIRE(s.validation.size() == 10);
  REQUIRE(s.test.size() == 10);
  std::set<std::size_t> all;
  for (auto v : s.train) all.insert(v);
  for (auto v : s.validation) all.insert(v);
  for (auto v : s.test) all.insert(v);
  REQUIRE(all.size() == 100);
}
