#include <doctest.h>

#include <cmath>
#include <map>

#include "kilab/errors.hpp"
#include "kilab/pmi.hpp"
#include "kilab/rng.hpp"
#include "oracles.hpp"

using namespace kilab;

namespace {

constexpr TokenId a = 104, b = 105, c = 106, d = 107;

std::vector<TokenIds> random_corpus(Rng& rng, std::size_t max_tokens, int alphabet) {
  std::vector<TokenIds> docs;
  std::size_t used = 0;
  const std::size_t target = 20 + rng.below(max_tokens - 19);
  while (used < target) {
    const std::size_t len = std::min<std::size_t>(1 + rng.below(40), target - used);
    TokenIds doc;
    for (std::size_t i = 0; i < len; ++i) {
      // Skewed draws so that collocations repeat.
      const auto r = rng.below(static_cast<std::uint64_t>(alphabet * alphabet));
      doc.push_back(104 + static_cast<TokenId>(std::sqrt(static_cast<double>(r))));
    }
    used += len;
    docs.push_back(std::move(doc));
  }
  return docs;
}

}  // namespace

TEST_SUITE("pmi") {

TEST_CASE("hand counts") {
  const std::vector<TokenIds> corpus{{a, b, a, b}};
  const auto t = count_ngrams(corpus, 2);
  CHECK(t.count(TokenIds{a}) == 2);
  CHECK(t.count(TokenIds{b}) == 2);
  CHECK(t.count(TokenIds{a, b}) == 2);
  CHECK(t.count(TokenIds{b, a}) == 1);
  CHECK(t.total(1) == 4);
  CHECK(t.total(2) == 3);
  CHECK(count_ngrams({}, 3).empty());
}

TEST_CASE("n-grams stay inside documents") {
  const std::vector<TokenIds> corpus{{a, b}, {c}, {a, b, c}};
  const auto t = count_ngrams(corpus, 3);
  CHECK(t.count(TokenIds{b, c}) == 1);
  CHECK(t.total(2) == 3);
  CHECK(t.total(3) == 1);
  CHECK(t.count(TokenIds{a, b, c}) == 1);
}

TEST_CASE("merge equals a single pass") {
  Rng rng(1);
  const auto corpus = random_corpus(rng, 400, 6);
  const auto whole = count_ngrams(corpus, 5);
  for (const unsigned w : {2u, 3u, 7u}) CHECK(count_ngrams(corpus, 5, w) == whole);
  const std::size_t half = corpus.size() / 2;
  auto left = count_ngrams(std::span(corpus).first(half), 5);
  left.merge(count_ngrams(std::span(corpus).subspan(half), 5));
  CHECK(left == whole);
}

TEST_CASE("table invariants") {
  Rng rng(2);
  const auto corpus = random_corpus(rng, 300, 5);
  const auto t = count_ngrams(corpus, 4);
  for (int n = 2; n <= 4; ++n) {
    CHECK(t.total(n) == oracle::total(corpus, static_cast<std::size_t>(n)));
    for (const auto& [g, cnt] : t.entries(n)) {
      CHECK(cnt == oracle::count(corpus, g));
      CHECK(cnt <= t.count(std::span<const TokenId>(g).first(g.size() - 1)));
      CHECK(cnt <= t.count(std::span<const TokenId>(g).subspan(1)));
    }
  }
}

TEST_CASE("bigram PMI") {
  const std::vector<TokenIds> corpus{{a, b, a, b, a, b}};
  const auto t = count_ngrams(corpus, 2);
  const double s = pmi_score(t, TokenIds{a, b});
  CHECK(s == doctest::Approx(std::log2(0.6 / 0.25)).epsilon(1e-12));
  CHECK(s == doctest::Approx(1.2630).epsilon(1e-4));

  const std::vector<TokenIds> ind{{a, b}, {a, c}, {d, b}, {d, c}};
  const auto ti = count_ngrams(ind, 2);
  // p(a b) = 1/4, p(a) = 2/8, p(b) = 2/8 -> log2(4) = 2
  CHECK(pmi_score(ti, TokenIds{a, b}) == doctest::Approx(2.0));
}

TEST_CASE("independent bigram scores zero") {
  const std::vector<TokenIds> corpus{{a, b}, {a, a}, {b, b}, {b, a}};
  const auto t = count_ngrams(corpus, 2);
  CHECK(std::abs(pmi_score(t, TokenIds{a, b})) < 1e-12);
}

TEST_CASE("trigram takes the minimum over its three segmentations") {
  Rng rng(20);
  for (int trial = 0; trial < 10; ++trial) {
    TokenIds doc;
    for (int i = 0; i < 20; ++i) doc.push_back(104 + static_cast<TokenId>(rng.below(3)));
    const std::vector<TokenIds> corpus{doc};
    const auto t = count_ngrams(corpus, 3);
    for (const auto& [g, cnt] : t.entries(3)) {
      const double lp = oracle::log_p(corpus, g);
      const double s1 = lp - oracle::log_p(corpus, {g[0]}) - oracle::log_p(corpus, {g[1], g[2]});
      const double s2 = lp - oracle::log_p(corpus, {g[0], g[1]}) - oracle::log_p(corpus, {g[2]});
      const double s3 = lp - oracle::log_p(corpus, {g[0]}) - oracle::log_p(corpus, {g[1]}) -
                        oracle::log_p(corpus, {g[2]});
      CHECK(pmi_score(t, g) == doctest::Approx(std::min({s1, s2, s3})).epsilon(1e-12));
    }
  }
}

TEST_CASE("zero counts") {
  const std::vector<TokenIds> corpus{{a, b}};
  const auto t = count_ngrams(corpus, 3);
  CHECK_THROWS_AS(pmi_score(t, TokenIds{b, a}), ZeroCount);
  CHECK_THROWS_AS(pmi_score(t, TokenIds{a, b, c}), ZeroCount);
  CHECK_THROWS_AS(pmi_score(t, TokenIds{a}), ConfigError);
}

TEST_CASE("unique repeated bigram") {
  constexpr TokenId nw = 110, york = 111;
  const std::vector<TokenIds> corpus{{a, nw, york, b}, {nw, york, c}, {d, a, c, b}};
  const auto t = count_ngrams(corpus, 2);
  const auto v = build_masking_vocab(t, 2, {{2, 1}});
  REQUIRE(v.entries().size() == 1);
  CHECK(v.entries()[0].ngram == NGram{nw, york});
  CHECK(v.entries()[0].count == 2);
  CHECK(build_masking_vocab(count_ngrams({}, 5), 1).empty());
  CHECK(build_masking_vocab(t, 3).empty());
}

TEST_CASE("default top-k is one percent of distinct n-grams, rounded up") {
  Rng rng(4);
  const auto corpus = random_corpus(rng, 500, 8);
  const auto t = count_ngrams(corpus, 5);
  const auto k = default_top_k(t);
  for (int n = 2; n <= 5; ++n) {
    CHECK(k.at(n) == (t.distinct(n) + 99) / 100);
  }
}

TEST_CASE("masking vocabulary equals the brute-force oracle") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const auto corpus = random_corpus(rng, 500, 3 + static_cast<int>(rng.below(6)));
    const int n_max = 2 + static_cast<int>(rng.below(4));
    const std::size_t min_count = 1 + rng.below(3);
    std::map<int, std::size_t> top_k;
    for (int n = 2; n <= n_max; ++n) top_k[n] = 1 + rng.below(30);
    const auto got = build_masking_vocab(count_ngrams(corpus, n_max), min_count, top_k);
    const auto want = oracle::masking_vocab(corpus, n_max, min_count, top_k);
    REQUIRE(got.entries().size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(got.entries()[i].ngram == want[i].ngram);
      CHECK(got.entries()[i].count == want[i].count);
      CHECK(std::abs(got.entries()[i].score - want[i].score) <= 1e-12);
    }
  }
}

TEST_CASE("raising min_count never adds entries") {
  Rng rng(5);
  const auto corpus = random_corpus(rng, 500, 5);
  const auto t = count_ngrams(corpus, 4);
  const std::map<int, std::size_t> k{{2, 1000}, {3, 1000}, {4, 1000}};
  std::size_t prev = build_masking_vocab(t, 1, k).entries().size();
  for (std::size_t m = 2; m < 10; ++m) {
    const auto v = build_masking_vocab(t, m, k);
    CHECK(v.entries().size() <= prev);
    for (const auto& e : v.entries()) CHECK(e.count >= m);
    prev = v.entries().size();
  }
}

TEST_CASE("segmentation") {
  constexpr TokenId nw = 110, york = 111, city = 112, is = 113, big = 114;
  const MaskingVocabulary v({{{nw, york, city}, 3.0, 2}, {{nw, york}, 2.0, 2}}, {}, 1);
  const TokenIds s{nw, york, city, is, big};
  CHECK(segment(s, v) == std::vector<MaskingUnit>{{0, 3}, {3, 4}, {4, 5}});

  const MaskingVocabulary overlap({{{a, b}, 1.0, 1}, {{b, c}, 1.0, 1}}, {}, 1);
  CHECK(segment(TokenIds{a, b, c}, overlap) == std::vector<MaskingUnit>{{0, 2}, {2, 3}});

  const MaskingVocabulary empty;
  const auto units = segment(s, empty);
  CHECK(units.size() == s.size());
  CHECK(segment(TokenIds{}, v).empty());
}

TEST_CASE("segmentation covers every index once") {
  Rng rng(8);
  const auto corpus = random_corpus(rng, 500, 4);
  const auto v = build_masking_vocab(count_ngrams(corpus, 5), 2);
  for (const auto& doc : corpus) {
    std::size_t next = 0;
    for (const auto& u : segment(doc, v)) {
      CHECK(u.begin == next);
      CHECK(u.end > u.begin);
      if (u.size() > 1) CHECK(v.contains(std::span<const TokenId>(doc).subspan(u.begin, u.size())));
      next = u.end;
    }
    CHECK(next == doc.size());
  }
}

TEST_CASE("vocabulary file round trip") {
  const std::vector<std::string> texts{"new york is in new york state"};
  const auto vocab = Vocabulary::build(texts, 1000, 1);
  std::vector<TokenIds> corpus{vocab.encode(texts[0])};
  const auto mv = build_masking_vocab(count_ngrams(corpus, 3), 2, {{2, 5}, {3, 5}});
  REQUIRE_FALSE(mv.empty());
  const auto s = mv.serialize(vocab);
  CHECK(s.find("\tnew york\n") != std::string::npos);
  const auto back = MaskingVocabulary::parse(s, vocab);
  CHECK(back.entries() == mv.entries());
}

}
