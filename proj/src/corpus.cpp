#include "kilab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "kilab/errors.hpp"
#include "kilab/rng.hpp"

namespace kilab {

namespace {

const std::string& require_string(const JsonRecord& r, const char* field) {
  const auto it = r.value.find(field);
  if (it == r.value.end() || !it->is_string()) {
    throw ParseError(r.line, std::string("missing string field \"") + field + "\"");
  }
  return it->get_ref<const std::string&>();
}

bool sentence_end(const std::string& tok) { return tok == "." || tok == "!" || tok == "?"; }

bool uppercase_initial(const std::string& tok) {
  return !tok.empty() && tok.front() >= 'A' && tok.front() <= 'Z';
}

bool all_digits(const std::string& tok) {
  return !tok.empty() &&
         std::all_of(tok.begin(), tok.end(), [](char c) { return c >= '0' && c <= '9'; });
}

std::vector<bool> sentence_initial_flags(const std::vector<std::string>& words) {
  std::vector<bool> flags(words.size(), false);
  for (std::size_t i = 0; i < words.size(); ++i) {
    flags[i] = i == 0 || sentence_end(words[i - 1]);
  }
  return flags;
}

}  // namespace

Corpus corpus_from_records(std::span<const JsonRecord> passages,
                           std::span<const JsonRecord> qas) {
  Corpus corpus;
  std::unordered_set<std::string> ids;
  for (const auto& r : passages) {
    Passage p{require_string(r, "id"), require_string(r, "text"), {}};
    if (p.id.empty()) {
      throw ParseError(r.line, "empty passage id");
    }
    if (p.text.empty()) {
      throw ParseError(r.line, "empty passage text");
    }
    if (!ids.insert(p.id).second) {
      throw ParseError(r.line, "duplicate passage id " + p.id);
    }
    corpus.passages.push_back(std::move(p));
  }
  for (const auto& r : qas) {
    QAPair q;
    q.question = require_string(r, "question");
    q.passage_id = require_string(r, "passage_id");
    if (const auto it = r.value.find("answers"); it != r.value.end()) {
      if (!it->is_array()) {
        throw ParseError(r.line, "\"answers\" must be an array");
      }
      for (const auto& a : *it) {
        if (!a.is_string()) {
          throw ParseError(r.line, "answers must be strings");
        }
        q.answers.push_back(a.get<std::string>());
      }
    } else if (const auto single = r.value.find("answer"); single != r.value.end()) {
      if (!single->is_string()) {
        throw ParseError(r.line, "\"answer\" must be a string");
      }
      q.answers.push_back(single->get<std::string>());
    }
    if (q.answers.empty()) {
      throw ParseError(r.line, "QA record without answers");
    }
    if (const auto t = r.value.find("tag"); t != r.value.end() && t->is_string()) {
      q.tag = t->get<std::string>();
    }
    if (ids.count(q.passage_id) == 0) {
      throw DanglingReference(q.passage_id);
    }
    corpus.qa_pairs.push_back(std::move(q));
  }
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& passages_path,
                   const std::filesystem::path& qas_path) {
  const auto passages = read_jsonl(passages_path);
  const auto qas = read_jsonl(qas_path);
  return corpus_from_records(passages, qas);
}

Json to_json(const Passage& p) { return Json{{"id", p.id}, {"text", p.text}}; }

Json to_json(const QAPair& q) {
  Json j{{"question", q.question}, {"answers", q.answers}, {"passage_id", q.passage_id}};
  if (!q.tag.empty()) {
    j["tag"] = q.tag;
  }
  return j;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& passages_path,
                 const std::filesystem::path& qas_path) {
  std::vector<Json> ps, qs;
  for (const auto& p : corpus.passages) ps.push_back(to_json(p));
  for (const auto& q : corpus.qa_pairs) qs.push_back(to_json(q));
  write_file_atomic(passages_path, to_jsonl(ps));
  write_file_atomic(qas_path, to_jsonl(qs));
}

// ---------------------------------------------------------------------------

std::array<std::size_t, 3> apportion(std::size_t n, const SplitRatios& ratios) {
  double sum = 0.0;
  for (const double r : ratios) {
    if (!(r > 0.0) || !std::isfinite(r)) {
      throw ConfigError("split ratios must be positive", "ratios");
    }
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("split ratios must sum to 1", "ratios");
  }
  // Quotas are snapped to a 1e-9 grid so that exact rational quotas
  // (0.76 * 25 = 19 etc.) are not perturbed by binary rounding.
  constexpr double tol = 1e-9;
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double quota = ratios[i] * static_cast<double>(n);
    const double fl = std::floor(quota + tol);
    sizes[i] = static_cast<std::size_t>(fl);
    frac[i] = std::max(0.0, quota - fl);
    assigned += sizes[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return frac[a] > frac[b] + tol;
  });
  for (std::size_t k = 0; assigned < n; k = (k + 1) % 3, ++assigned) {
    ++sizes[order[k]];
  }
  return sizes;
}

DatasetSplit split_qa(std::size_t n_pairs, const SplitRatios& ratios, std::uint64_t seed) {
  const auto sizes = apportion(n_pairs, ratios);
  std::vector<std::size_t> perm(n_pairs);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(perm));

  DatasetSplit split;
  split.seed = seed;
  split.ratios = ratios;
  auto it = perm.begin();
  split.train.assign(it, it + static_cast<std::ptrdiff_t>(sizes[0]));
  it += static_cast<std::ptrdiff_t>(sizes[0]);
  split.dev.assign(it, it + static_cast<std::ptrdiff_t>(sizes[1]));
  it += static_cast<std::ptrdiff_t>(sizes[1]);
  split.test.assign(it, perm.end());
  return split;
}

void hold_out_unseen(DatasetSplit& split, std::span<const QAPair> pairs) {
  std::vector<std::size_t> kept;
  for (const auto idx : split.train) {
    if (pairs[idx].tag == kUnseenFact) {
      split.test.push_back(idx);
    } else {
      kept.push_back(idx);
    }
  }
  split.train = std::move(kept);
}

Json to_json(const DatasetSplit& split) {
  return Json{{"seed", split.seed},
              {"ratios", split.ratios},
              {"train", split.train},
              {"dev", split.dev},
              {"test", split.test}};
}

DatasetSplit split_from_json(const Json& j) {
  try {
    DatasetSplit s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.ratios = j.at("ratios").get<SplitRatios>();
    s.train = j.at("train").get<std::vector<std::size_t>>();
    s.dev = j.at("dev").get<std::vector<std::size_t>>();
    s.test = j.at("test").get<std::vector<std::size_t>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(1, std::string("malformed split: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

EntityAnnotator::EntityAnnotator(std::span<const Passage> corpus) {
  for (const auto& p : corpus) {
    const auto words = split_words(p.text);
    const auto initial = sentence_initial_flags(words);
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (!initial[i] && uppercase_initial(words[i])) {
        mid_sentence_capitalized_.insert(words[i]);
      }
    }
  }
}

std::vector<EntitySpan> EntityAnnotator::annotate(const Passage& passage) const {
  const auto words = split_words(passage.text);
  const auto initial = sentence_initial_flags(words);
  auto is_entity_token = [&](std::size_t i) {
    return uppercase_initial(words[i]) || all_digits(words[i]);
  };
  std::vector<EntitySpan> spans;
  std::size_t i = 0;
  while (i < words.size()) {
    if (!is_entity_token(i)) {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    while (j < words.size() && is_entity_token(j)) {
      ++j;
    }
    const bool lone_initial = initial[i] && j - i == 1 && !all_digits(words[i]) &&
                              mid_sentence_capitalized_.count(words[i]) == 0;
    if (!lone_initial) {
      spans.push_back({passage.id, i, j, SpanSource::heuristic});
    }
    i = j;
  }
  return spans;
}

AnnotationIndex annotations_from_records(std::span<const JsonRecord> records) {
  AnnotationIndex index;
  for (const auto& r : records) {
    const auto& pid = require_string(r, "passage_id");
    const auto s = r.value.find("start");
    const auto e = r.value.find("end");
    if (s == r.value.end() || e == r.value.end() || !s->is_number_integer() ||
        !e->is_number_integer()) {
      throw ParseError(r.line, "annotation needs integer \"start\" and \"end\"");
    }
    const auto start = s->get<std::int64_t>();
    const auto end = e->get<std::int64_t>();
    if (start < 0 || end <= start) {
      throw SpanError("invalid span [" + std::to_string(start) + ", " + std::to_string(end) +
                      ") for passage " + pid);
    }
    index[pid].push_back({pid, static_cast<std::size_t>(start), static_cast<std::size_t>(end),
                          SpanSource::external});
  }
  return index;
}

AnnotationIndex load_annotations(const std::filesystem::path& path) {
  return annotations_from_records(read_jsonl(path));
}

Json to_json(const EntitySpan& span) {
  return Json{{"passage_id", span.passage_id}, {"start", span.start}, {"end", span.end}};
}

std::vector<EntitySpan> annotate_entities(const Passage& passage, AnnotationMode mode,
                                          const EntityAnnotator& annotator,
                                          const AnnotationIndex* external) {
  if (mode == AnnotationMode::heuristic) {
    return annotator.annotate(passage);
  }
  std::vector<EntitySpan> spans;
  if (external != nullptr) {
    if (const auto it = external->find(passage.id); it != external->end()) {
      spans = it->second;
    }
  }
  const std::size_t length =
      passage.tokens.empty() ? split_words(passage.text).size() : passage.tokens.size();
  std::sort(spans.begin(), spans.end(),
            [](const EntitySpan& a, const EntitySpan& b) { return a.start < b.start; });
  for (std::size_t k = 0; k < spans.size(); ++k) {
    if (spans[k].end > length || spans[k].start >= spans[k].end) {
      throw SpanError("annotation out of bounds for passage " + passage.id);
    }
    if (k > 0 && spans[k].start < spans[k - 1].end) {
      throw SpanError("overlapping annotations for passage " + passage.id);
    }
  }
  return spans;
}

}  // namespace kilab
