#include "kilab/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include "kilab/errors.hpp"

namespace kilab {

namespace {

constexpr std::size_t kMaxSpans = special::num_sentinels - 1;

void check_length(std::size_t n, std::size_t m) {
  if (n < 2) {
    throw DegenerateInput("masking needs at least two tokens");
  }
  if (m >= n) {
    throw DegenerateInput("masking budget covers the whole sequence");
  }
}

/// First `k` entries of a uniformly random permutation of [0, n).
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

MaskedExample finish(std::span<const TokenId> tokens, const std::vector<bool>& mask,
                     Strategy strategy) {
  auto ex = apply_mask(tokens, mask);
  ex.strategy = strategy;
  return ex;
}

}  // namespace

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::rtm: return "rtm";
    case Strategy::ssm: return "ssm";
    case Strategy::pmi: return "pmi";
  }
  return "rtm";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "rtm") return Strategy::rtm;
  if (name == "ssm") return Strategy::ssm;
  if (name == "pmi") return Strategy::pmi;
  throw ConfigError("unknown masking strategy: " + std::string(name), "strategy");
}

void MaskingBudget::validate() const {
  if (!(rate > 0.0 && rate < 1.0)) {
    throw ConfigError("masking rate must lie in (0, 1)", "rate");
  }
  if (!(mean_span >= 1.0)) {
    throw ConfigError("mean span length must be at least 1", "mean_span");
  }
}

std::size_t MaskingBudget::tokens_for(std::size_t n) const {
  return static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n) - 1e-9));
}

MaskedExample apply_mask(std::span<const TokenId> tokens, const std::vector<bool>& mask) {
  if (mask.size() != tokens.size()) {
    throw ShapeError("mask length differs from the token sequence");
  }
  MaskedExample ex;
  int span = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!mask[i]) {
      ex.input_ids.push_back(tokens[i]);
      continue;
    }
    if (i == 0 || !mask[i - 1]) {
      if (static_cast<std::size_t>(span) >= kMaxSpans) {
        throw DegenerateInput("mask needs more than 99 sentinel spans");
      }
      ex.input_ids.push_back(Vocabulary::sentinel(span));
      ex.target_ids.push_back(Vocabulary::sentinel(span));
      ++span;
    }
    ex.target_ids.push_back(tokens[i]);
    ++ex.masked_token_count;
  }
  ex.target_ids.push_back(Vocabulary::sentinel(span));
  return ex;
}

TokenIds reconstruct(const MaskedExample& example) {
  // Cut the target into spans keyed by sentinel index.
  std::vector<TokenIds> spans;
  for (const auto id : example.target_ids) {
    if (Vocabulary::is_sentinel(id)) {
      spans.emplace_back();
    } else if (!spans.empty()) {
      spans.back().push_back(id);
    }
  }
  TokenIds out;
  for (const auto id : example.input_ids) {
    if (Vocabulary::is_sentinel(id)) {
      const auto k = static_cast<std::size_t>(Vocabulary::sentinel_index(id));
      if (k < spans.size()) {
        out.insert(out.end(), spans[k].begin(), spans[k].end());
      }
    } else {
      out.push_back(id);
    }
  }
  return out;
}

MaskedExample corrupt_rtm(std::span<const TokenId> tokens, const MaskingBudget& budget, Rng& rng) {
  budget.validate();
  const std::size_t n = tokens.size();
  const std::size_t m = budget.tokens_for(n);
  check_length(n, m);

  auto k = static_cast<std::size_t>(
      std::max<long long>(1, std::llround(static_cast<double>(m) / budget.mean_span)));
  k = std::min({k, m, kMaxSpans});

  std::vector<std::size_t> lengths(k, m / k);
  for (std::size_t j = 0; j < m % k; ++j) {
    ++lengths[j];
  }
  rng.shuffle(std::span<std::size_t>(lengths));

  const std::size_t unmasked = n - m;
  const bool separated = unmasked + 1 >= k;
  const std::size_t free_tokens = separated ? unmasked - (k - 1) : unmasked;
  const std::size_t slots = free_tokens + k;
  std::vector<bool> span_slot(slots, false);
  for (const auto s : sample_without_replacement(slots, k, rng)) {
    span_slot[s] = true;
  }

  std::vector<bool> mask(n, false);
  std::size_t pos = 0;
  std::size_t placed = 0;
  for (std::size_t s = 0; s < slots; ++s) {
    if (!span_slot[s]) {
      ++pos;
      continue;
    }
    if (separated && placed > 0) {
      ++pos;
    }
    for (std::size_t t = 0; t < lengths[placed]; ++t) {
      mask[pos++] = true;
    }
    ++placed;
  }
  return finish(tokens, mask, Strategy::rtm);
}

MaskedExample corrupt_ssm(std::span<const TokenId> tokens, std::span<const EntitySpan> entities,
                          const MaskingBudget& budget, Rng& rng) {
  budget.validate();
  const std::size_t n = tokens.size();
  const std::size_t m = budget.tokens_for(n);
  check_length(n, m);
  std::vector<bool> mask(n, false);
  for (const auto& e : entities) {
    if (e.start >= e.end || e.end > n) {
      throw SpanError("entity span out of bounds");
    }
    for (std::size_t i = e.start; i < e.end; ++i) {
      if (mask[i]) {
        throw SpanError("overlapping entity spans");
      }
      mask[i] = true;
    }
  }
  std::fill(mask.begin(), mask.end(), false);

  std::size_t masked = 0;
  for (const auto idx : sample_without_replacement(entities.size(), entities.size(), rng)) {
    if (masked >= m) {
      break;
    }
    for (std::size_t i = entities[idx].start; i < entities[idx].end; ++i) {
      mask[i] = true;
    }
    masked += entities[idx].end - entities[idx].start;
  }
  if (masked < m) {
    std::vector<std::size_t> free_positions;
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask[i]) free_positions.push_back(i);
    }
    for (const auto j : sample_without_replacement(free_positions.size(), m - masked, rng)) {
      mask[free_positions[j]] = true;
    }
  }
  return finish(tokens, mask, Strategy::ssm);
}

MaskedExample corrupt_pmi(std::span<const TokenId> tokens, const MaskingVocabulary& vocab,
                          const MaskingBudget& budget, Rng& rng) {
  budget.validate();
  const std::size_t n = tokens.size();
  const std::size_t m = budget.tokens_for(n);
  check_length(n, m);
  const auto units = segment(tokens, vocab);

  std::vector<bool> mask(n, false);
  std::size_t masked = 0;
  for (const auto idx : sample_without_replacement(units.size(), units.size(), rng)) {
    if (masked >= m) {
      break;
    }
    for (std::size_t i = units[idx].begin; i < units[idx].end; ++i) {
      mask[i] = true;
    }
    masked += units[idx].size();
  }
  return finish(tokens, mask, Strategy::pmi);
}

std::uint64_t masking_seed(std::uint64_t base_seed, std::uint64_t epoch,
                           std::string_view passage_id) {
  return derive_seed(base_seed, "mask", {epoch, fnv1a(passage_id)});
}

std::vector<MaskedExample> mask_corpus(std::span<const Passage> passages, Strategy strategy,
                                       const MaskingInputs& inputs, const MaskingBudget& budget,
                                       std::uint64_t base_seed, std::uint64_t epoch,
                                       unsigned workers) {
  budget.validate();
  if (strategy == Strategy::ssm &&
      (inputs.entities == nullptr || inputs.entities->size() != passages.size())) {
    throw ConfigError("SSM masking needs entity annotations for every passage", "annotations");
  }
  if (strategy == Strategy::pmi && inputs.pmi_vocab == nullptr) {
    throw ConfigError("PMI masking needs a masking vocabulary", "pmi_vocab");
  }

  std::vector<std::optional<MaskedExample>> slots(passages.size());
  auto work = [&](std::size_t i) {
    const auto& p = passages[i];
    const std::size_t n = p.tokens.size();
    if (n < 2 || budget.tokens_for(n) >= n) {
      return;
    }
    const auto seed = masking_seed(base_seed, epoch, p.id);
    Rng rng(seed);
    MaskedExample ex;
    switch (strategy) {
      case Strategy::rtm: ex = corrupt_rtm(p.tokens, budget, rng); break;
      case Strategy::ssm: ex = corrupt_ssm(p.tokens, (*inputs.entities)[i], budget, rng); break;
      case Strategy::pmi: ex = corrupt_pmi(p.tokens, *inputs.pmi_vocab, budget, rng); break;
    }
    ex.passage_id = p.id;
    ex.seed = seed;
    slots[i] = std::move(ex);
  };

  workers = std::max(1u, workers);
  if (workers == 1 || passages.size() < 2) {
    for (std::size_t i = 0; i < passages.size(); ++i) work(i);
  } else {
    std::vector<std::thread> threads;
    for (unsigned w = 0; w < workers; ++w) {
      threads.emplace_back([&, w] {
        for (std::size_t i = w; i < passages.size(); i += workers) work(i);
      });
    }
    for (auto& t : threads) t.join();
  }

  std::vector<MaskedExample> out;
  for (auto& s : slots) {
    if (s) out.push_back(std::move(*s));
  }
  std::stable_sort(out.begin(), out.end(), [](const MaskedExample& a, const MaskedExample& b) {
    return a.passage_id < b.passage_id;
  });
  return out;
}

Json to_json(const MaskedExample& e) {
  return Json{{"passage_id", e.passage_id},
              {"strategy", to_string(e.strategy)},
              {"seed", e.seed},
              {"input_ids", e.input_ids},
              {"target_ids", e.target_ids}};
}

MaskedExample masked_example_from_json(const Json& j) {
  MaskedExample e;
  try {
    e.passage_id = j.at("passage_id").get<std::string>();
    e.strategy = parse_strategy(j.at("strategy").get<std::string>());
    e.seed = j.at("seed").get<std::uint64_t>();
    e.input_ids = j.at("input_ids").get<TokenIds>();
    e.target_ids = j.at("target_ids").get<TokenIds>();
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(1, std::string("malformed masked example: ") + ex.what());
  }
  for (const auto id : e.target_ids) {
    if (!Vocabulary::is_sentinel(id)) ++e.masked_token_count;
  }
  return e;
}

}  // namespace kilab
