#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace mtlstm {

/// Reserved token ids. PAD embeds as a frozen zero vector and never
/// receives gradient; UNK is a trained row like any other word.
inline constexpr int kPadToken = 0;
inline constexpr int kUnkToken = 1;

/// Token-to-id map with the two reserved entries at the front. Ids are
/// assigned by descending corpus frequency with lexicographic tie-break,
/// so a vocabulary built from the same corpus is always identical.
class Vocab {
public:
  Vocab() {
    words_ = {"<pad>", "<unk>"};
    index_ = {{"<pad>", kPadToken}, {"<unk>", kUnkToken}};
  }

  static Vocab build(const std::vector<std::vector<std::string>>& docs) {
    std::map<std::string, std::size_t> freq;
    for (const auto& doc : docs) {
      for (const auto& w : doc) ++freq[w];
    }
    std::vector<std::pair<std::string, std::size_t>> entries(freq.begin(),
                                                             freq.end());
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocab v;
    for (const auto& [word, count] : entries) {
      (void)count;
      v.add(word);
    }
    return v;
  }

  int add(const std::string& word) {
    auto it = index_.find(word);
    if (it != index_.end()) return it->second;
    int id = static_cast<int>(words_.size());
    words_.push_back(word);
    index_.emplace(word, id);
    return id;
  }

  int id_or_unk(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnkToken : it->second;
  }

  bool contains(const std::string& word) const {
    return index_.count(word) != 0;
  }

  const std::string& word(int id) const { return words_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return words_.size(); }

private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace mtlstm
