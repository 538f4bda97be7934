#include <algorithm>
#include <cmath>
#include <numeric>

#include "kilab/corpus.hpp"
#include "kilab/errors.hpp"
#include "kilab/rng.hpp"

namespace kilab {

namespace {

std::string fill(std::string text, const std::string& key, const std::string& value) {
  for (auto pos = text.find(key); pos != std::string::npos;
       pos = text.find(key, pos + value.size())) {
    text.replace(pos, key.size(), value);
  }
  return text;
}

}  // namespace

std::vector<RelationTemplate> default_relations() {
  return {
      {"born_in",
       "{e} was born in {v}.",
       {"where was {e} born?", "what is the birthplace of {e}?", "in which city was {e} born?"},
       "C",
       100},
      {"works_for",
       "{e} works for {v}.",
       {"who employs {e}?", "which company does {e} work for?", "where does {e} work?"},
       "O",
       100},
      {"plays",
       "{e} plays the {v}.",
       {"what instrument does {e} play?", "which instrument is played by {e}?",
        "what does {e} play in the band?"},
       "I",
       100},
  };
}

SyntheticCorpus generate_synthetic(const SyntheticFactConfig& config) {
  if (config.n_entities > 0 && config.relations.empty()) {
    throw ConfigError("synthetic corpus needs at least one relation", "relations");
  }
  if (config.facts_per_entity > config.relations.size() && config.n_entities > 0) {
    throw ConfigError("facts_per_entity exceeds the number of relations", "facts_per_entity");
  }
  if (!(config.unseen_fraction >= 0.0 && config.unseen_fraction <= 1.0)) {
    throw ConfigError("unseen_fraction must lie in [0, 1]", "unseen_fraction");
  }
  for (const auto& r : config.relations) {
    if (r.pool_size == 0 || r.question_templates.empty()) {
      throw ConfigError("relation " + r.name + " needs a value pool and a question", "relations");
    }
  }

  SyntheticCorpus out;
  Rng rng(derive_seed(config.seed, "synth"));
  std::vector<std::size_t> fact_relation;
  for (std::size_t e = 0; e < config.n_entities; ++e) {
    std::vector<std::size_t> rels(config.relations.size());
    std::iota(rels.begin(), rels.end(), std::size_t{0});
    if (config.facts_per_entity < rels.size()) {
      rng.shuffle(std::span<std::size_t>(rels));
      rels.resize(config.facts_per_entity);
      std::sort(rels.begin(), rels.end());
    }
    const std::string entity = "E" + std::to_string(e);
    for (const auto r : rels) {
      const auto& rel = config.relations[r];
      const std::string value = rel.value_prefix + std::to_string(rng.below(rel.pool_size));
      const std::string pid = "p" + std::to_string(out.passages.size());
      out.passages.push_back(
          {pid, fill(fill(rel.passage_template, "{e}", entity), "{v}", value), {}});
      out.facts.push_back({entity, rel.name, value, pid, kSeenFact});
      fact_relation.push_back(r);
    }
  }

  const auto n_unseen = static_cast<std::size_t>(
      std::llround(config.unseen_fraction * static_cast<double>(out.facts.size())));
  std::vector<std::size_t> order(out.facts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  for (std::size_t k = 0; k < n_unseen; ++k) {
    out.facts[order[k]].tag = kUnseenFact;
  }

  for (std::size_t f = 0; f < out.facts.size(); ++f) {
    const auto& fact = out.facts[f];
    for (const auto& q : config.relations[fact_relation[f]].question_templates) {
      out.qa_pairs.push_back({fill(q, "{e}", fact.entity), {fact.value}, fact.passage_id, fact.tag});
    }
  }
  return out;
}

Json to_json(const Fact& f) {
  return Json{{"entity", f.entity},
              {"relation", f.relation},
              {"value", f.value},
              {"passage_id", f.passage_id},
              {"tag", f.tag}};
}

}  // namespace kilab
