#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kilab {

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

namespace special {
inline constexpr TokenId pad = 0;
inline constexpr TokenId unk = 1;
inline constexpr TokenId bos = 2;
inline constexpr TokenId eos = 3;
inline constexpr int num_specials = 4;
inline constexpr int num_sentinels = 100;
inline constexpr TokenId first_sentinel = 4;
inline constexpr TokenId first_regular = first_sentinel + num_sentinels;  // 104
}  // namespace special

/// Splits on whitespace after isolating every ASCII punctuation character
/// as its own token. Case is preserved.
std::vector<std::string> split_words(std::string_view text);

/// Tokenize-and-rejoin with single spaces, i.e. the surface form decode()
/// produces for the same text.
std::string canonical_text(std::string_view text);

/// Word-level vocabulary with a fixed special block: PAD, UNK, BOS, EOS,
/// then SENTINEL_0..SENTINEL_99, then regular tokens ordered by descending
/// corpus count and lexicographically within equal counts.
class Vocabulary {
 public:
  Vocabulary();

  static Vocabulary build(std::span<const std::string> texts, std::size_t max_size,
                          std::size_t min_count);

  static TokenId sentinel(int k);
  static bool is_sentinel(TokenId id) noexcept {
    return id >= special::first_sentinel && id < special::first_regular;
  }
  static int sentinel_index(TokenId id) noexcept { return id - special::first_sentinel; }

  std::size_t size() const noexcept { return tokens_.size(); }
  std::size_t regular_size() const noexcept { return tokens_.size() - special::first_regular; }

  /// Returns UNK for tokens outside the vocabulary.
  TokenId id_of(std::string_view token) const;
  /// Throws IdError for ids outside [0, size()).
  const std::string& token_of(TokenId id) const;

  TokenIds encode(std::string_view text) const;
  /// Joins token strings with single spaces. Throws IdError on unknown ids.
  std::string decode(std::span<const TokenId> ids) const;

  /// Header line "specials 4 sentinels 100 size N", then one token per line
  /// in id order.
  std::string serialize() const;
  static Vocabulary parse(std::string_view content);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void push(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace kilab
