#include "kilab/pmi.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <utility>
#include <sstream>
#include <thread>

#include "kilab/errors.hpp"
#include "kilab/jsonl.hpp"
#include "kilab/rng.hpp"

namespace kilab {

std::size_t NGramHash::operator()(const NGram& g) const noexcept {
  std::uint64_t h = 0x84222325cbf29ce4ULL ^ g.size();
  for (const auto t : g) {
    h = mix64(h ^ static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)));
  }
  return static_cast<std::size_t>(h);
}

NGramTable::NGramTable(int n_max)
    : n_max_(n_max), counts_(static_cast<std::size_t>(n_max) + 1),
      totals_(static_cast<std::size_t>(n_max) + 1, 0) {
  if (n_max < 1) {
    throw ConfigError("n_max must be at least 1", "n_max");
  }
}

void NGramTable::add_document(std::span<const TokenId> tokens) {
  for (int n = 1; n <= n_max_; ++n) {
    const auto order = static_cast<std::size_t>(n);
    if (tokens.size() < order) {
      break;
    }
    auto& table = counts_[order];
    for (std::size_t i = 0; i + order <= tokens.size(); ++i) {
      ++table[NGram(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                    tokens.begin() + static_cast<std::ptrdiff_t>(i + order))];
    }
    totals_[order] += tokens.size() - order + 1;
  }
}

void NGramTable::merge(const NGramTable& other) {
  if (other.n_max_ != n_max_) {
    throw ShapeError("cannot merge n-gram tables of different orders");
  }
  for (std::size_t n = 1; n < counts_.size(); ++n) {
    for (const auto& [g, c] : other.counts_[n]) {
      counts_[n][g] += c;
    }
    totals_[n] += other.totals_[n];
  }
}

std::size_t NGramTable::count(std::span<const TokenId> ngram) const {
  if (ngram.empty() || ngram.size() > static_cast<std::size_t>(n_max_)) {
    return 0;
  }
  const auto& table = counts_[ngram.size()];
  const auto it = table.find(NGram(ngram.begin(), ngram.end()));
  return it == table.end() ? 0 : it->second;
}

std::size_t NGramTable::total(int order) const {
  if (order < 1 || order > n_max_) {
    return 0;
  }
  return totals_[static_cast<std::size_t>(order)];
}

std::size_t NGramTable::distinct(int order) const {
  if (order < 1 || order > n_max_) {
    return 0;
  }
  return counts_[static_cast<std::size_t>(order)].size();
}

std::vector<std::pair<NGram, std::size_t>> NGramTable::entries(int order) const {
  std::vector<std::pair<NGram, std::size_t>> out;
  if (order < 1 || order > n_max_) {
    return out;
  }
  const auto& table = counts_[static_cast<std::size_t>(order)];
  out.assign(table.begin(), table.end());
  std::sort(out.begin(), out.end());
  return out;
}

bool NGramTable::operator==(const NGramTable& other) const {
  return n_max_ == other.n_max_ && totals_ == other.totals_ && counts_ == other.counts_;
}

NGramTable count_ngrams(std::span<const TokenIds> corpus, int n_max, unsigned workers) {
  if (n_max < 2 || n_max > 5) {
    throw ConfigError("n_max must lie in [2, 5]", "n_max");
  }
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(corpus.size())));
  if (workers <= 1) {
    NGramTable table(n_max);
    for (const auto& doc : corpus) {
      table.add_document(doc);
    }
    return table;
  }
  std::vector<NGramTable> partial(workers, NGramTable(n_max));
  std::vector<std::thread> threads;
  const std::size_t chunk = (corpus.size() + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      const std::size_t lo = std::min(corpus.size(), w * chunk);
      const std::size_t hi = std::min(corpus.size(), lo + chunk);
      for (std::size_t d = lo; d < hi; ++d) {
        partial[w].add_document(corpus[d]);
      }
    });
  }
  for (auto& t : threads) {
    t.join();
  }
  for (unsigned w = 1; w < workers; ++w) {
    partial[0].merge(partial[w]);
  }
  return std::move(partial[0]);
}

namespace {

using u128 = unsigned __int128;

struct Ratio {
  u128 num = 1;
  u128 den = 1;
};

// Full 256-bit product as (high, low).
std::pair<u128, u128> wide_mul(u128 x, u128 y) {
  const u128 mask = ~std::uint64_t{0};
  const u128 x0 = x & mask, x1 = x >> 64, y0 = y & mask, y1 = y >> 64;
  const u128 p00 = x0 * y0, p01 = x0 * y1, p10 = x1 * y0, p11 = x1 * y1;
  const u128 mid = (p00 >> 64) + (p01 & mask) + (p10 & mask);
  const u128 lo = (mid << 64) | (p00 & mask);
  const u128 hi = p11 + (p01 >> 64) + (p10 >> 64) + (mid >> 64);
  return {hi, lo};
}

bool ratio_less(const Ratio& a, const Ratio& b) {
  return wide_mul(a.num, b.den) < wide_mul(b.num, a.den);
}

u128 gcd128(u128 a, u128 b) {
  while (b != 0) {
    const u128 r = a % b;
    a = b;
    b = r;
  }
  return a;
}

}  // namespace

double pmi_score(const NGramTable& table, std::span<const TokenId> ngram) {
  const std::size_t len = ngram.size();
  if (len < 2) {
    throw ConfigError("pmi_score needs an n-gram of length >= 2", "ngram");
  }
  if (len > static_cast<std::size_t>(table.n_max())) {
    throw ZeroCount("n-gram longer than the counted orders");
  }
  // count and total of ngram[begin, end)
  auto stats = [&](std::size_t begin, std::size_t end) {
    const auto c = table.count(ngram.subspan(begin, end - begin));
    const auto t = table.total(static_cast<int>(end - begin));
    if (c == 0 || t == 0) {
      throw ZeroCount("zero count in PMI segmentation");
    }
    return std::pair<u128, u128>{c, t};
  };
  // Each segmentation's probability ratio is evaluated as an exact fraction,
  // so mathematically equal scores come out bit-identical and ties are
  // broken by count and n-gram as documented. Extremely large corpora can
  // overflow the 128-bit products; those fall back to floating point.
  const auto [cw, tw] = stats(0, len);
  bool exact = true;
  std::optional<Ratio> best;
  double best_float = std::numeric_limits<double>::infinity();
  // Bit i of `cuts` set means a boundary after token i.
  const std::uint32_t n_masks = 1u << (len - 1);
  for (std::uint32_t cuts = 1; cuts < n_masks; ++cuts) {
    Ratio r{cw, tw};
    double value = std::log2(static_cast<double>(cw) / static_cast<double>(tw));
    std::size_t begin = 0;
    for (std::size_t i = 0; i < len; ++i) {
      const bool boundary = i + 1 == len || ((cuts >> i) & 1u) != 0;
      if (boundary) {
        const auto [c, t] = stats(begin, i + 1);
        exact = exact && !__builtin_mul_overflow(r.num, t, &r.num) &&
                !__builtin_mul_overflow(r.den, c, &r.den);
        value -= std::log2(static_cast<double>(c) / static_cast<double>(t));
        begin = i + 1;
      }
    }
    best_float = std::min(best_float, value);
    if (exact && (!best || ratio_less(r, *best))) {
      best = r;
    }
  }
  if (!exact) {
    return best_float;
  }
  const u128 g = gcd128(best->num, best->den);
  const auto num = static_cast<long double>(best->num / g);
  const auto den = static_cast<long double>(best->den / g);
  return static_cast<double>(std::log2(num) - std::log2(den));
}

bool masking_rank_less(const MaskingVocabEntry& a, const MaskingVocabEntry& b) {
  if (a.score != b.score) {
    return a.score > b.score;
  }
  if (a.count != b.count) {
    return a.count > b.count;
  }
  return a.ngram < b.ngram;
}

MaskingVocabulary::MaskingVocabulary(std::vector<MaskingVocabEntry> entries,
                                     std::map<int, std::size_t> cutoffs, std::size_t min_count)
    : entries_(std::move(entries)), cutoffs_(std::move(cutoffs)), min_count_(min_count) {
  for (const auto& e : entries_) {
    longest_ = std::max(longest_, e.ngram.size());
    lookup_.insert(e.ngram);
  }
}

bool MaskingVocabulary::contains(std::span<const TokenId> ngram) const {
  if (ngram.size() > longest_ || ngram.size() < 2) {
    return false;
  }
  return lookup_.count(NGram(ngram.begin(), ngram.end())) != 0;
}

std::string MaskingVocabulary::serialize(const Vocabulary& vocab) const {
  std::string out;
  char buf[64];
  for (const auto& e : entries_) {
    std::snprintf(buf, sizeof buf, "%.17g\t%zu\t", e.score, e.count);
    out += buf;
    out += vocab.decode(e.ngram);
    out += '\n';
  }
  return out;
}

MaskingVocabulary MaskingVocabulary::parse(std::string_view content, const Vocabulary& vocab) {
  std::istringstream in{std::string(content)};
  std::string line;
  std::size_t line_no = 0;
  std::vector<MaskingVocabEntry> entries;
  std::map<int, std::size_t> cutoffs;
  std::size_t min_count = std::numeric_limits<std::size_t>::max();
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      throw ParseError(line_no, "expected score<TAB>count<TAB>tokens");
    }
    MaskingVocabEntry e;
    try {
      e.score = std::stod(line.substr(0, t1));
      e.count = static_cast<std::size_t>(std::stoull(line.substr(t1 + 1, t2 - t1 - 1)));
    } catch (const std::exception&) {
      throw ParseError(line_no, "bad score or count");
    }
    std::istringstream toks(line.substr(t2 + 1));
    std::string tok;
    while (toks >> tok) {
      const auto id = vocab.id_of(tok);
      if (id == special::unk) {
        throw ParseError(line_no, "token not in vocabulary: " + tok);
      }
      e.ngram.push_back(id);
    }
    if (e.ngram.size() < 2) {
      throw ParseError(line_no, "masking entries need at least two tokens");
    }
    ++cutoffs[static_cast<int>(e.ngram.size())];
    min_count = std::min(min_count, e.count);
    entries.push_back(std::move(e));
  }
  if (entries.empty()) {
    min_count = 0;
  }
  return MaskingVocabulary(std::move(entries), std::move(cutoffs), min_count);
}

void MaskingVocabulary::save(const std::filesystem::path& path, const Vocabulary& vocab) const {
  write_file_atomic(path, serialize(vocab));
}

MaskingVocabulary MaskingVocabulary::load(const std::filesystem::path& path,
                                          const Vocabulary& vocab) {
  return parse(read_text_file(path), vocab);
}

std::map<int, std::size_t> default_top_k(const NGramTable& table) {
  std::map<int, std::size_t> k;
  for (int n = 2; n <= table.n_max(); ++n) {
    k[n] = (table.distinct(n) + 99) / 100;
  }
  return k;
}

MaskingVocabulary build_masking_vocab(const NGramTable& table, std::size_t min_count,
                                      const std::map<int, std::size_t>& top_k) {
  const auto defaults = default_top_k(table);
  std::vector<MaskingVocabEntry> all;
  std::map<int, std::size_t> cutoffs;
  for (int n = 2; n <= table.n_max(); ++n) {
    const auto it = top_k.find(n);
    const std::size_t k = it != top_k.end() ? it->second : defaults.at(n);
    cutoffs[n] = k;
    std::vector<MaskingVocabEntry> scored;
    for (auto& [g, c] : table.entries(n)) {
      if (c < min_count || c == 0) {
        continue;
      }
      const double s = pmi_score(table, g);
      scored.push_back({g, s, c});
    }
    std::sort(scored.begin(), scored.end(), masking_rank_less);
    if (scored.size() > k) {
      scored.resize(k);
    }
    all.insert(all.end(), std::make_move_iterator(scored.begin()),
               std::make_move_iterator(scored.end()));
  }
  std::sort(all.begin(), all.end(), masking_rank_less);
  return MaskingVocabulary(std::move(all), std::move(cutoffs), min_count);
}

std::vector<MaskingUnit> segment(std::span<const TokenId> tokens, const MaskingVocabulary& vocab) {
  std::vector<MaskingUnit> units;
  std::size_t i = 0;
  while (i < tokens.size()) {
    std::size_t len = 1;
    for (std::size_t l = std::min(vocab.longest(), tokens.size() - i); l >= 2; --l) {
      if (vocab.contains(tokens.subspan(i, l))) {
        len = l;
        break;
      }
    }
    units.push_back({i, i + len});
    i += len;
  }
  return units;
}

}  // namespace kilab
