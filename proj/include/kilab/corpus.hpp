#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "kilab/jsonl.hpp"
#include "kilab/tokenizer.hpp"

namespace kilab {

struct Passage {
  std::string id;
  std::string text;
  TokenIds tokens;  // filled after tokenization
};

inline constexpr const char* kSeenFact = "seen-fact";
inline constexpr const char* kUnseenFact = "unseen-fact";

struct QAPair {
  std::string question;
  std::vector<std::string> answers;  // at least one gold answer
  std::string passage_id;
  std::string tag;  // "seen-fact", "unseen-fact" or empty for ingested data
};

struct Corpus {
  std::vector<Passage> passages;
  std::vector<QAPair> qa_pairs;
};

/// Reads a passages file ({"id","text"} per line) and a QA file
/// ({"question","answers"|"answer","passage_id"} per line).
Corpus load_corpus(const std::filesystem::path& passages_path,
                   const std::filesystem::path& qas_path);

/// Same checks as load_corpus, on already parsed records.
Corpus corpus_from_records(std::span<const JsonRecord> passages,
                           std::span<const JsonRecord> qas);

Json to_json(const Passage& p);
Json to_json(const QAPair& q);
void save_corpus(const Corpus& corpus, const std::filesystem::path& passages_path,
                 const std::filesystem::path& qas_path);

using SplitRatios = std::array<double, 3>;
inline constexpr SplitRatios kDefaultRatios{0.76, 0.10, 0.14};

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> dev;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;
  SplitRatios ratios = kDefaultRatios;
};

/// Largest-remainder apportionment of n items; ties go to the earlier part.
std::array<std::size_t, 3> apportion(std::size_t n, const SplitRatios& ratios);

/// Seeded uniform shuffle of [0, n) followed by a contiguous cut into
/// apportioned train/dev/test parts.
DatasetSplit split_qa(std::size_t n_pairs, const SplitRatios& ratios, std::uint64_t seed);

/// QA pairs tagged unseen-fact must never be trained on, so any that land
/// in train are moved to the end of test (relative order kept).
void hold_out_unseen(DatasetSplit& split, std::span<const QAPair> pairs);

Json to_json(const DatasetSplit& split);
DatasetSplit split_from_json(const Json& j);

enum class SpanSource { heuristic, external };

struct EntitySpan {
  std::string passage_id;
  std::size_t start = 0;  // token offsets, half-open
  std::size_t end = 0;
  SpanSource source = SpanSource::heuristic;

  bool operator==(const EntitySpan&) const = default;
};

/// Capitalization-run entity recognizer. A span is a maximal run of
/// uppercase-initial or all-digit tokens. A single uppercase-initial token
/// at sentence start is kept only when the same token also occurs
/// uppercase-initial mid-sentence somewhere in the corpus it was fit on.
class EntityAnnotator {
 public:
  EntityAnnotator() = default;
  explicit EntityAnnotator(std::span<const Passage> corpus);

  std::vector<EntitySpan> annotate(const Passage& passage) const;

 private:
  std::set<std::string> mid_sentence_capitalized_;
};

/// External annotations keyed by passage id.
using AnnotationIndex = std::map<std::string, std::vector<EntitySpan>>;

AnnotationIndex load_annotations(const std::filesystem::path& path);
AnnotationIndex annotations_from_records(std::span<const JsonRecord> records);
Json to_json(const EntitySpan& span);

enum class AnnotationMode { heuristic, external };

/// Heuristic mode runs `annotator`; external mode returns the passage's
/// records from `external` after bounds/overlap validation (SpanError).
std::vector<EntitySpan> annotate_entities(const Passage& passage, AnnotationMode mode,
                                          const EntityAnnotator& annotator,
                                          const AnnotationIndex* external = nullptr);

// ---------------------------------------------------------------------------
// Synthetic facts benchmark.

struct RelationTemplate {
  std::string name;
  std::string passage_template;              // "{e}" and "{v}" placeholders
  std::vector<std::string> question_templates;  // "{e}" placeholder
  std::string value_prefix;                  // values are prefix + index
  std::size_t pool_size = 100;
};

std::vector<RelationTemplate> default_relations();

struct SyntheticFactConfig {
  std::size_t n_entities = 200;
  std::vector<RelationTemplate> relations = default_relations();
  std::size_t facts_per_entity = 3;
  double unseen_fraction = 0.3;
  std::uint64_t seed = 0;
};

struct Fact {
  std::string entity;
  std::string relation;
  std::string value;
  std::string passage_id;
  std::string tag;

  bool operator==(const Fact&) const = default;
};

struct SyntheticCorpus {
  std::vector<Passage> passages;
  std::vector<QAPair> qa_pairs;
  std::vector<Fact> facts;
};

SyntheticCorpus generate_synthetic(const SyntheticFactConfig& config);

Json to_json(const Fact& f);

}  // namespace kilab
