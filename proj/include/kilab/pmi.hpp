#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "kilab/tokenizer.hpp"

namespace kilab {

using NGram = std::vector<TokenId>;

struct NGramHash {
  std::size_t operator()(const NGram& g) const noexcept;
};

/// Exact n-gram counts for orders 1..n_max. N-grams never cross document
/// boundaries, so total(n) = sum over documents of max(0, len - n + 1).
class NGramTable {
 public:
  explicit NGramTable(int n_max = 5);

  void add_document(std::span<const TokenId> tokens);
  /// Adds another table's counts. Addition is associative, so chunked
  /// counting followed by merge equals a single pass.
  void merge(const NGramTable& other);

  int n_max() const noexcept { return n_max_; }
  std::size_t count(std::span<const TokenId> ngram) const;
  std::size_t total(int order) const;
  std::size_t distinct(int order) const;
  bool empty() const noexcept { return totals_[1] == 0; }

  /// (n-gram, count) pairs of one order, sorted by n-gram.
  std::vector<std::pair<NGram, std::size_t>> entries(int order) const;

  bool operator==(const NGramTable& other) const;

 private:
  int n_max_;
  std::vector<std::unordered_map<NGram, std::size_t, NGramHash>> counts_;  // index = order
  std::vector<std::size_t> totals_;
};

/// Counts a tokenized corpus; with workers > 1 the documents are counted in
/// contiguous chunks on separate threads and merged in chunk order.
NGramTable count_ngrams(std::span<const TokenIds> corpus, int n_max, unsigned workers = 1);

/// Min over all contiguous segmentations of the n-gram into two or more
/// parts of log2[ p(w) / prod p(part) ], where p(g) = count(g) / total(|g|).
/// Throws ZeroCount when a needed count or total is zero.
double pmi_score(const NGramTable& table, std::span<const TokenId> ngram);

struct MaskingVocabEntry {
  NGram ngram;
  double score = 0.0;
  std::size_t count = 0;

  bool operator==(const MaskingVocabEntry&) const = default;
};

/// Ranking used both within an order and for the merged list: score
/// descending, then count descending, then n-gram ids lexicographically.
bool masking_rank_less(const MaskingVocabEntry& a, const MaskingVocabEntry& b);

class MaskingVocabulary {
 public:
  MaskingVocabulary() = default;
  MaskingVocabulary(std::vector<MaskingVocabEntry> entries, std::map<int, std::size_t> cutoffs,
                    std::size_t min_count);

  const std::vector<MaskingVocabEntry>& entries() const noexcept { return entries_; }
  const std::map<int, std::size_t>& rank_cutoffs() const noexcept { return cutoffs_; }
  std::size_t min_count() const noexcept { return min_count_; }
  bool empty() const noexcept { return entries_.empty(); }
  std::size_t longest() const noexcept { return longest_; }
  bool contains(std::span<const TokenId> ngram) const;

  /// One line per entry: "score<TAB>count<TAB>tok tok ...".
  std::string serialize(const Vocabulary& vocab) const;
  static MaskingVocabulary parse(std::string_view content, const Vocabulary& vocab);
  void save(const std::filesystem::path& path, const Vocabulary& vocab) const;
  static MaskingVocabulary load(const std::filesystem::path& path, const Vocabulary& vocab);

 private:
  std::vector<MaskingVocabEntry> entries_;
  std::map<int, std::size_t> cutoffs_;
  std::size_t min_count_ = 0;
  std::size_t longest_ = 0;
  std::unordered_set<NGram, NGramHash> lookup_;
};

/// k_n = ceil(0.01 * distinct n-grams of order n), for n = 2..n_max.
std::map<int, std::size_t> default_top_k(const NGramTable& table);

/// For every order n >= 2 keeps the top_k[n] n-grams (by masking_rank_less)
/// among those with count >= min_count. Orders missing from top_k use
/// default_top_k.
MaskingVocabulary build_masking_vocab(const NGramTable& table, std::size_t min_count,
                                      const std::map<int, std::size_t>& top_k = {});

/// Half-open token index range.
struct MaskingUnit {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const noexcept { return end - begin; }
  bool operator==(const MaskingUnit&) const = default;
};

/// Greedy left-to-right longest match against the vocabulary n-grams;
/// unmatched tokens become singleton units.
std::vector<MaskingUnit> segment(std::span<const TokenId> tokens, const MaskingVocabulary& vocab);

}  // namespace kilab
