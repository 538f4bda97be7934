#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kilab/corpus.hpp"
#include "kilab/jsonl.hpp"
#include "kilab/pmi.hpp"
#include "kilab/rng.hpp"
#include "kilab/tokenizer.hpp"

namespace kilab {

enum class Strategy { rtm, ssm, pmi };

std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view name);

struct MaskingBudget {
  double rate = 0.15;
  double mean_span = 3.0;  // RTM only

  void validate() const;
  /// ceil(rate * n), robust to binary rounding of exact products.
  std::size_t tokens_for(std::size_t n) const;
};

/// T5 span-corruption example. Each maximal masked run is replaced in the
/// input by SENTINEL_k (k in order of appearance); the target lists
/// SENTINEL_0 span_0 SENTINEL_1 span_1 ... and ends with a closing sentinel.
struct MaskedExample {
  TokenIds input_ids;
  TokenIds target_ids;
  std::string passage_id;
  Strategy strategy = Strategy::rtm;
  std::uint64_t seed = 0;
  std::size_t masked_token_count = 0;

  bool operator==(const MaskedExample&) const = default;
};

/// Builds the sentinel-format example for a boolean mask over `tokens`.
/// Throws DegenerateInput when the mask needs more than 99 spans.
MaskedExample apply_mask(std::span<const TokenId> tokens, const std::vector<bool>& mask);

/// Interleaves the unmasked runs of the input with the target spans.
TokenIds reconstruct(const MaskedExample& example);

/// Exactly ceil(rate*n) tokens in max(1, round(m / mean_span)) spans whose
/// lengths differ by at most one, placed uniformly at random and separated
/// by at least one unmasked token whenever that is feasible.
MaskedExample corrupt_rtm(std::span<const TokenId> tokens, const MaskingBudget& budget, Rng& rng);

/// Whole entity spans drawn uniformly without replacement until the budget
/// is met (the last one may overshoot); if the entities run out first, the
/// remainder is filled with random single tokens.
MaskedExample corrupt_ssm(std::span<const TokenId> tokens, std::span<const EntitySpan> entities,
                          const MaskingBudget& budget, Rng& rng);

/// Whole PMI segmentation units drawn uniformly without replacement until
/// the budget is met; collocations are never split.
MaskedExample corrupt_pmi(std::span<const TokenId> tokens, const MaskingVocabulary& vocab,
                          const MaskingBudget& budget, Rng& rng);

/// Strategy-specific side inputs for a corpus-level masking pass.
struct MaskingInputs {
  const std::vector<std::vector<EntitySpan>>* entities = nullptr;  // parallel to passages (SSM)
  const MaskingVocabulary* pmi_vocab = nullptr;                    // PMI
};

/// Per-passage seed for one masking epoch.
std::uint64_t masking_seed(std::uint64_t base_seed, std::uint64_t epoch,
                           std::string_view passage_id);

/// One example per passage with a fresh corruption seeded by
/// (base_seed, epoch, passage_id). Output is sorted by passage id
/// regardless of `workers`. Passages too short to mask are skipped.
std::vector<MaskedExample> mask_corpus(std::span<const Passage> passages, Strategy strategy,
                                       const MaskingInputs& inputs, const MaskingBudget& budget,
                                       std::uint64_t base_seed, std::uint64_t epoch,
                                       unsigned workers = 1);

Json to_json(const MaskedExample& e);
MaskedExample masked_example_from_json(const Json& j);

}  // namespace kilab
