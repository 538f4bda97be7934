#pragma once

// Independent reference implementations shared by the unit and acceptance
// tests. Deliberately naive: plain loops over the raw corpus.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "kilab/masking.hpp"
#include "kilab/model.hpp"
#include "kilab/pmi.hpp"

namespace oracle {

using kilab::NGram;
using kilab::TokenId;
using kilab::TokenIds;

inline std::size_t count(const std::vector<TokenIds>& corpus, const NGram& g) {
  std::size_t c = 0;
  for (const auto& doc : corpus) {
    if (doc.size() < g.size()) continue;
    for (std::size_t i = 0; i + g.size() <= doc.size(); ++i) {
      if (std::equal(g.begin(), g.end(), doc.begin() + static_cast<std::ptrdiff_t>(i))) ++c;
    }
  }
  return c;
}

inline std::size_t total(const std::vector<TokenIds>& corpus, std::size_t n) {
  std::size_t t = 0;
  for (const auto& doc : corpus) t += doc.size() >= n ? doc.size() - n + 1 : 0;
  return t;
}

inline double log_p(const std::vector<TokenIds>& corpus, const NGram& g) {
  return std::log2(static_cast<double>(count(corpus, g)) /
                   static_cast<double>(total(corpus, g.size())));
}

// Enumerates every composition of the n-gram into >= 2 contiguous parts
// through the bitmask of cut positions.
inline double pmi(const std::vector<TokenIds>& corpus, const NGram& g) {
  const std::size_t n = g.size();
  const double whole = log_p(corpus, g);
  double best = std::numeric_limits<double>::infinity();
  for (unsigned mask = 1; mask < (1u << (n - 1)); ++mask) {
    double parts = 0.0;
    std::size_t start = 0;
    for (std::size_t cut = 1; cut <= n; ++cut) {
      if (cut == n || (mask >> (cut - 1)) & 1u) {
        parts += log_p(corpus, NGram(g.begin() + static_cast<std::ptrdiff_t>(start),
                                     g.begin() + static_cast<std::ptrdiff_t>(cut)));
        start = cut;
      }
    }
    best = std::min(best, whole - parts);
  }
  return best;
}

// Exact min-over-segmentations probability ratio as a reduced fraction.
// Corpora here stay under a few thousand tokens, so 64-bit parts suffice.
struct Fraction {
  std::uint64_t num = 1;
  std::uint64_t den = 1;
};

inline bool fraction_less(const Fraction& a, const Fraction& b) {
  return static_cast<unsigned __int128>(a.num) * b.den <
         static_cast<unsigned __int128>(b.num) * a.den;
}

inline Fraction pmi_fraction(const std::vector<TokenIds>& corpus, const NGram& g) {
  const std::size_t n = g.size();
  Fraction best{0, 0};
  for (unsigned mask = 1; mask < (1u << (n - 1)); ++mask) {
    Fraction f{count(corpus, g), total(corpus, n)};
    std::size_t start = 0;
    for (std::size_t cut = 1; cut <= n; ++cut) {
      if (cut == n || (mask >> (cut - 1)) & 1u) {
        const NGram part(g.begin() + static_cast<std::ptrdiff_t>(start),
                         g.begin() + static_cast<std::ptrdiff_t>(cut));
        f.num *= total(corpus, part.size());
        f.den *= count(corpus, part);
        start = cut;
      }
    }
    if (best.den == 0 || fraction_less(f, best)) best = f;
  }
  const auto d = std::gcd(best.num, best.den);
  return {best.num / d, best.den / d};
}

struct Entry {
  NGram ngram;
  double score;
  std::size_t count;
  Fraction exact;
};

inline bool rank_less(const Entry& a, const Entry& b) {
  if (fraction_less(a.exact, b.exact) != fraction_less(b.exact, a.exact)) {
    return fraction_less(b.exact, a.exact);
  }
  if (a.count != b.count) return a.count > b.count;
  return a.ngram < b.ngram;
}

inline std::vector<Entry> masking_vocab(const std::vector<TokenIds>& corpus, int n_max,
                                        std::size_t min_count,
                                        const std::map<int, std::size_t>& top_k) {
  std::vector<Entry> out;
  for (int n = 2; n <= n_max; ++n) {
    std::set<NGram> distinct;
    for (const auto& doc : corpus) {
      for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= doc.size(); ++i) {
        distinct.insert(NGram(doc.begin() + static_cast<std::ptrdiff_t>(i),
                              doc.begin() + static_cast<std::ptrdiff_t>(i) + n));
      }
    }
    std::size_t k = 0;
    if (auto it = top_k.find(n); it != top_k.end()) {
      k = it->second;
    } else {
      k = static_cast<std::size_t>(std::ceil(0.01 * static_cast<double>(distinct.size())));
    }
    std::vector<Entry> order_entries;
    for (const auto& g : distinct) {
      const auto c = count(corpus, g);
      if (c >= min_count) order_entries.push_back({g, pmi(corpus, g), c, pmi_fraction(corpus, g)});
    }
    std::sort(order_entries.begin(), order_entries.end(), rank_less);
    if (order_entries.size() > k) order_entries.resize(k);
    out.insert(out.end(), order_entries.begin(), order_entries.end());
  }
  std::sort(out.begin(), out.end(), rank_less);
  return out;
}

// Checks the sentinel-format invariants. Returns an empty string when the
// example is well formed, a description of the first violation otherwise.
inline std::string check_masked(const TokenIds& original, const kilab::MaskedExample& ex) {
  using kilab::Vocabulary;
  int expected = 0;
  for (const auto id : ex.input_ids) {
    if (Vocabulary::is_sentinel(id)) {
      if (Vocabulary::sentinel_index(id) != expected) return "input sentinel out of order";
      ++expected;
    }
  }
  const int input_sentinels = expected;
  expected = 0;
  std::size_t span_tokens = 0;
  for (const auto id : ex.target_ids) {
    if (Vocabulary::is_sentinel(id)) {
      if (Vocabulary::sentinel_index(id) != expected) return "target sentinel out of order";
      ++expected;
    } else {
      ++span_tokens;
    }
  }
  if (expected != input_sentinels + 1) return "target must close with one extra sentinel";
  if (ex.target_ids.empty() || !Vocabulary::is_sentinel(ex.target_ids.front()) ||
      !Vocabulary::is_sentinel(ex.target_ids.back())) {
    return "target must start and end with a sentinel";
  }
  if (span_tokens != ex.masked_token_count) return "masked_token_count mismatch";
  // Spans are maximal, so two sentinels are never adjacent in the input and
  // no target span is empty.
  for (std::size_t i = 1; i < ex.input_ids.size(); ++i) {
    if (Vocabulary::is_sentinel(ex.input_ids[i]) && Vocabulary::is_sentinel(ex.input_ids[i - 1])) {
      return "adjacent sentinels in input";
    }
  }
  for (std::size_t i = 1; i + 1 < ex.target_ids.size(); ++i) {
    if (Vocabulary::is_sentinel(ex.target_ids[i]) &&
        Vocabulary::is_sentinel(ex.target_ids[i - 1])) {
      return "empty target span";
    }
  }
  // Independent reconstruction.
  std::vector<TokenIds> spans;
  for (const auto id : ex.target_ids) {
    if (Vocabulary::is_sentinel(id)) {
      spans.emplace_back();
    } else {
      spans.back().push_back(id);
    }
  }
  TokenIds rebuilt;
  for (const auto id : ex.input_ids) {
    if (Vocabulary::is_sentinel(id)) {
      const auto& s = spans[static_cast<std::size_t>(Vocabulary::sentinel_index(id))];
      rebuilt.insert(rebuilt.end(), s.begin(), s.end());
    } else {
      rebuilt.push_back(id);
    }
  }
  if (rebuilt != original) return "reconstruction differs from the original";
  return {};
}

// Masked positions recovered from the example alone.
inline std::vector<bool> masked_positions(const kilab::MaskedExample& ex) {
  using kilab::Vocabulary;
  std::vector<std::size_t> span_len;
  for (const auto id : ex.target_ids) {
    if (Vocabulary::is_sentinel(id)) {
      span_len.push_back(0);
    } else {
      ++span_len.back();
    }
  }
  std::vector<bool> mask;
  for (const auto id : ex.input_ids) {
    if (Vocabulary::is_sentinel(id)) {
      mask.insert(mask.end(), span_len[static_cast<std::size_t>(Vocabulary::sentinel_index(id))],
                  true);
    } else {
      mask.push_back(false);
    }
  }
  return mask;
}

// Sum of log-probs of a full sequence under teacher forcing.
inline double sequence_log_prob(const kilab::ParameterMatrix& theta, const TokenIds& input,
                                const TokenIds& target) {
  return -kilab::sequence_loss(theta, input, target);
}

}  // namespace oracle
