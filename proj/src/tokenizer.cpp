#include "kilab/tokenizer.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include "kilab/errors.hpp"
#include "kilab/jsonl.hpp"

namespace kilab {

namespace {

bool is_ascii_punct(char c) {
  const auto u = static_cast<unsigned char>(c);
  return (u >= 33 && u <= 47) || (u >= 58 && u <= 64) || (u >= 91 && u <= 96) ||
         (u >= 123 && u <= 126);
}

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

const char* const kSpecialNames[] = {"<pad>", "<unk>", "<bos>", "<eos>"};

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  };
  for (const char c : text) {
    if (is_space(c)) {
      flush();
    } else if (is_ascii_punct(c)) {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

std::string canonical_text(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) {
      out.push_back(' ');
    }
    out += w;
  }
  return out;
}

Vocabulary::Vocabulary() {
  for (const char* name : kSpecialNames) {
    push(name);
  }
  for (int k = 0; k < special::num_sentinels; ++k) {
    push("<sentinel_" + std::to_string(k) + ">");
  }
}

void Vocabulary::push(std::string token) {
  index_.emplace(token, static_cast<TokenId>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::build(std::span<const std::string> texts, std::size_t max_size,
                             std::size_t min_count) {
  if (max_size <= static_cast<std::size_t>(special::first_regular)) {
    throw ConfigError("vocabulary max_size must exceed " +
                      std::to_string(special::first_regular), "max_size");
  }
  std::map<std::string, std::size_t> counts;
  for (const auto& text : texts) {
    for (auto& w : split_words(text)) {
      ++counts[std::move(w)];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // counts is already lexicographic, so a stable sort on count suffices.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocabulary vocab;
  for (auto& [token, count] : ranked) {
    if (vocab.size() >= max_size) {
      break;
    }
    if (count < min_count) {
      break;
    }
    vocab.push(std::move(token));
  }
  return vocab;
}

TokenId Vocabulary::sentinel(int k) {
  if (k < 0 || k >= special::num_sentinels) {
    throw IdError("sentinel index out of range: " + std::to_string(k));
  }
  return special::first_sentinel + k;
}

TokenId Vocabulary::id_of(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  if (it == index_.end() || it->second < special::first_regular) {
    return special::unk;
  }
  return it->second;
}

const std::string& Vocabulary::token_of(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IdError("unknown token id " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenIds Vocabulary::encode(std::string_view text) const {
  TokenIds ids;
  for (const auto& w : split_words(text)) {
    ids.push_back(id_of(w));
  }
  return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (const auto id : ids) {
    if (!out.empty()) {
      out.push_back(' ');
    }
    out += token_of(id);
  }
  return out;
}

std::string Vocabulary::serialize() const {
  std::ostringstream out;
  out << "specials " << special::num_specials << " sentinels " << special::num_sentinels
      << " size " << tokens_.size() << '\n';
  for (const auto& t : tokens_) {
    out << t << '\n';
  }
  return out.str();
}

Vocabulary Vocabulary::parse(std::string_view content) {
  std::istringstream in{std::string(content)};
  std::string header;
  if (!std::getline(in, header)) {
    throw ParseError(1, "missing vocabulary header");
  }
  std::istringstream hs(header);
  std::string k1, k2, k3;
  int n_specials = 0, n_sentinels = 0;
  std::size_t size = 0;
  if (!(hs >> k1 >> n_specials >> k2 >> n_sentinels >> k3 >> size) || k1 != "specials" ||
      k2 != "sentinels" || k3 != "size") {
    throw ParseError(1, "malformed vocabulary header");
  }
  if (n_specials != special::num_specials || n_sentinels != special::num_sentinels) {
    throw ParseError(1, "unsupported special/sentinel layout");
  }
  Vocabulary vocab;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto id = line_no - 2;
    if (id < static_cast<std::size_t>(special::first_regular)) {
      if (line != vocab.tokens_[id]) {
        throw ParseError(line_no, "special token mismatch: " + line);
      }
      continue;
    }
    if (line.empty() || vocab.index_.count(line) != 0) {
      throw ParseError(line_no, "empty or duplicate token");
    }
    vocab.push(line);
  }
  if (vocab.size() != size) {
    throw ParseError(line_no, "vocabulary size does not match header");
  }
  return vocab;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  write_file_atomic(path, serialize());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  return parse(read_text_file(path));
}

}  // namespace kilab
