#include "kilab/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "kilab/errors.hpp"
#include "kilab/rng.hpp"

namespace kilab {

namespace fs = std::filesystem;

namespace {

// Reads one JSON object section and rejects keys nobody asked for.
class Section {
 public:
  Section(const Json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) {
      throw ConfigError("config section must be an object: " + label(), label());
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  const Json& raw(const char* key) {
    used_.insert(key);
    return j_.at(key);
  }

  void size(const char* key, std::size_t& out) {
    if (!has(key)) return;
    const auto& v = raw(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw ConfigError("expected a non-negative integer for " + path(key), path(key));
    }
    out = v.get<std::size_t>();
  }

  void u64(const char* key, std::uint64_t& out) {
    std::size_t tmp = out;
    size(key, tmp);
    out = tmp;
  }

  void integer(const char* key, int& out) {
    if (!has(key)) return;
    const auto& v = raw(key);
    if (!v.is_number_integer()) {
      throw ConfigError("expected an integer for " + path(key), path(key));
    }
    out = v.get<int>();
  }

  void real(const char* key, double& out) {
    if (!has(key)) return;
    const auto& v = raw(key);
    if (!v.is_number()) {
      throw ConfigError("expected a number for " + path(key), path(key));
    }
    out = v.get<double>();
  }

  void boolean(const char* key, bool& out) {
    if (!has(key)) return;
    const auto& v = raw(key);
    if (!v.is_boolean()) {
      throw ConfigError("expected true or false for " + path(key), path(key));
    }
    out = v.get<bool>();
  }

  void file(const char* key, std::optional<fs::path>& out, const fs::path& base) {
    if (!has(key)) return;
    const auto& v = raw(key);
    if (v.is_null()) {
      out.reset();
      return;
    }
    if (!v.is_string()) {
      throw ConfigError("expected a path string for " + path(key), path(key));
    }
    fs::path p = v.get<std::string>();
    out = (p.is_relative() && !base.empty()) ? base / p : p;
  }

  /// A string or an array of strings.
  std::vector<std::string> names(const char* key) {
    const auto& v = raw(key);
    std::vector<std::string> out;
    if (v.is_string()) {
      out.push_back(v.get<std::string>());
      return out;
    }
    if (!v.is_array() || v.empty()) {
      throw ConfigError("expected a name or a non-empty list for " + path(key), path(key));
    }
    for (const auto& e : v) {
      if (!e.is_string()) {
        throw ConfigError("expected names in " + path(key), path(key));
      }
      out.push_back(e.get<std::string>());
    }
    return out;
  }

  std::string path(const std::string& key) const {
    return prefix_.empty() ? key : prefix_ + "." + key;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) {
        throw ConfigError("unknown config key: " + path(key), path(key));
      }
    }
  }

 private:
  std::string label() const { return prefix_.empty() ? "<root>" : prefix_; }

  const Json& j_;
  std::string prefix_;
  std::set<std::string> used_;
};

std::string seed_string(std::uint64_t s) { return std::to_string(s); }

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string upper(std::string_view s) {
  std::string out(s);
  for (auto& c : out) {
    c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  }
  return out;
}

Json path_json(const std::optional<fs::path>& p) {
  return p ? Json(p->string()) : Json(nullptr);
}

Json partition_json(const PartitionScore& p) { return {{"em", p.em}, {"f1", p.f1}, {"n", p.n}}; }

std::string metrics_file_name(const RunMetrics& m) {
  std::string name(to_string(m.regime));
  if (m.strategy) {
    name += "-";
    name += to_string(*m.strategy);
  }
  return name + "-seed" + seed_string(m.seed) + ".json";
}

}  // namespace

// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (passages.has_value() != qas.has_value()) {
    throw ConfigError("passages and qas must be given together", passages ? "qas" : "passages");
  }
  masking.validate();
  hyper.validate();
  if (pmi_n_max < 2 || pmi_n_max > 5) {
    throw ConfigError("pmi.n_max must be in [2, 5]", "pmi.n_max");
  }
  if (strategies.empty()) {
    throw ConfigError("at least one masking strategy is required", "strategy");
  }
  if (regimes.empty()) {
    throw ConfigError("at least one regime is required", "regime");
  }
  if (seeds.empty()) {
    throw ConfigError("at least one seed is required", "seeds");
  }
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("seeds must be distinct", "seeds");
  }
  if (beams < 1) {
    throw ConfigError("model.beams must be at least 1", "model.beams");
  }
  if (buckets < 1) {
    throw ConfigError("model.buckets must be at least 1", "model.buckets");
  }
  if (!(ewc_lambda >= 0.0)) {
    throw ConfigError("ewc.lambda must be non-negative", "ewc.lambda");
  }
  if (fisher_samples < 1) {
    throw ConfigError("ewc.fisher_samples must be at least 1", "ewc.fisher_samples");
  }
  double sum = 0.0;
  for (const double r : ratios) {
    if (!(r > 0.0)) {
      throw ConfigError("split ratios must be positive", "split.ratios");
    }
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("split ratios must sum to 1", "split.ratios");
  }
}

ExperimentConfig config_from_json(const Json& j, const fs::path& base_dir) {
  ExperimentConfig c;
  Section root(j, "");
  if (root.has("data")) {
    Section s(root.raw("data"), "data");
    s.file("passages", c.passages, base_dir);
    s.file("qas", c.qas, base_dir);
    s.file("annotations", c.annotations, base_dir);
    s.file("vocab", c.vocab, base_dir);
    s.file("pmi_vocab", c.pmi_vocab, base_dir);
    s.finish();
  }
  if (root.has("synthetic")) {
    Section s(root.raw("synthetic"), "synthetic");
    s.size("entities", c.synthetic.entities);
    s.size("facts_per_entity", c.synthetic.facts_per_entity);
    s.real("unseen_fraction", c.synthetic.unseen_fraction);
    s.u64("seed", c.synthetic.seed);
    s.finish();
  }
  if (root.has("tokenizer")) {
    Section s(root.raw("tokenizer"), "tokenizer");
    s.size("max_size", c.vocab_max_size);
    s.size("min_count", c.vocab_min_count);
    s.finish();
  }
  if (root.has("masking")) {
    Section s(root.raw("masking"), "masking");
    s.real("rate", c.masking.rate);
    s.real("mean_span", c.masking.mean_span);
    s.finish();
  }
  if (root.has("pmi")) {
    Section s(root.raw("pmi"), "pmi");
    s.integer("n_max", c.pmi_n_max);
    s.size("min_count", c.pmi_min_count);
    s.finish();
  }
  if (root.has("strategy")) {
    c.strategies.clear();
    for (const auto& n : root.names("strategy")) {
      c.strategies.push_back(parse_strategy(n));
    }
  }
  if (root.has("regime")) {
    c.regimes.clear();
    for (const auto& n : root.names("regime")) {
      c.regimes.push_back(parse_regime(n));
    }
  }
  if (root.has("training")) {
    Section s(root.raw("training"), "training");
    s.size("pt_batch", c.hyper.pt_batch);
    s.size("ft_batch", c.hyper.ft_batch);
    s.size("max_epochs", c.hyper.max_epochs);
    s.real("learning_rate", c.hyper.learning_rate);
    s.boolean("early_stopping", c.hyper.early_stop.enabled);
    s.size("patience", c.hyper.early_stop.patience);
    s.real("min_delta", c.hyper.early_stop.min_delta);
    s.finish();
  }
  if (root.has("model")) {
    Section s(root.raw("model"), "model");
    s.size("buckets", c.buckets);
    s.size("max_position", c.max_position);
    s.size("beams", c.beams);
    s.size("max_answer_len", c.max_answer_len);
    s.finish();
  }
  if (root.has("ewc")) {
    Section s(root.raw("ewc"), "ewc");
    s.real("lambda", c.ewc_lambda);
    s.size("fisher_samples", c.fisher_samples);
    s.finish();
  }
  if (root.has("split")) {
    Section s(root.raw("split"), "split");
    if (s.has("ratios")) {
      const auto& r = s.raw("ratios");
      if (!r.is_array() || r.size() != 3) {
        throw ConfigError("split.ratios must list three numbers", "split.ratios");
      }
      for (std::size_t i = 0; i < 3; ++i) {
        if (!r[i].is_number()) {
          throw ConfigError("split.ratios must list three numbers", "split.ratios");
        }
        c.ratios[i] = r[i].get<double>();
      }
    }
    s.u64("seed", c.split_seed);
    s.finish();
  }
  if (root.has("seeds")) {
    const auto& v = root.raw("seeds");
    c.seeds.clear();
    if (v.is_number_integer() && v.get<long long>() > 0) {
      for (std::uint64_t i = 1; i <= v.get<std::uint64_t>(); ++i) {
        c.seeds.push_back(i);
      }
    } else if (v.is_array()) {
      for (const auto& e : v) {
        if (!e.is_number_integer() || e.get<long long>() < 0) {
          throw ConfigError("seeds must be non-negative integers", "seeds");
        }
        c.seeds.push_back(e.get<std::uint64_t>());
      }
    } else {
      throw ConfigError("seeds must be a positive count or a list", "seeds");
    }
  }
  if (root.has("output")) {
    const auto& v = root.raw("output");
    if (!v.is_string()) {
      throw ConfigError("output must be a directory path", "output");
    }
    fs::path p = v.get<std::string>();
    c.output = (p.is_relative() && !base_dir.empty()) ? base_dir / p : p;
  }
  root.finish();
  c.validate();
  return c;
}

Json to_json(const ExperimentConfig& c) {
  Json strategies = Json::array();
  for (const auto s : c.strategies) strategies.push_back(std::string(to_string(s)));
  Json regimes = Json::array();
  for (const auto r : c.regimes) regimes.push_back(std::string(to_string(r)));
  return {
      {"data",
       {{"passages", path_json(c.passages)},
        {"qas", path_json(c.qas)},
        {"annotations", path_json(c.annotations)},
        {"vocab", path_json(c.vocab)},
        {"pmi_vocab", path_json(c.pmi_vocab)}}},
      {"synthetic",
       {{"entities", c.synthetic.entities},
        {"facts_per_entity", c.synthetic.facts_per_entity},
        {"unseen_fraction", c.synthetic.unseen_fraction},
        {"seed", c.synthetic.seed}}},
      {"tokenizer", {{"max_size", c.vocab_max_size}, {"min_count", c.vocab_min_count}}},
      {"masking", {{"rate", c.masking.rate}, {"mean_span", c.masking.mean_span}}},
      {"pmi", {{"n_max", c.pmi_n_max}, {"min_count", c.pmi_min_count}}},
      {"strategy", strategies},
      {"regime", regimes},
      {"training",
       {{"pt_batch", c.hyper.pt_batch},
        {"ft_batch", c.hyper.ft_batch},
        {"max_epochs", c.hyper.max_epochs},
        {"learning_rate", c.hyper.learning_rate},
        {"early_stopping", c.hyper.early_stop.enabled},
        {"patience", c.hyper.early_stop.patience},
        {"min_delta", c.hyper.early_stop.min_delta}}},
      {"model",
       {{"buckets", c.buckets},
        {"max_position", c.max_position},
        {"beams", c.beams},
        {"max_answer_len", c.max_answer_len}}},
      {"ewc", {{"lambda", c.ewc_lambda}, {"fisher_samples", c.fisher_samples}}},
      {"split", {{"ratios", c.ratios}, {"seed", c.split_seed}}},
      {"seeds", c.seeds},
      {"output", c.output.string()},
  };
}

ExperimentConfig load_config(const fs::path& path) {
  const auto text = read_text_file(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  return config_from_json(j, path.parent_path());
}

std::uint64_t config_hash(const ExperimentConfig& c) { return fnv1a(to_json(c).dump()); }

// ---------------------------------------------------------------------------

PreparedData prepare_data(const ExperimentConfig& config) {
  config.validate();
  PreparedData data;
  if (config.passages) {
    data.corpus = load_corpus(*config.passages, *config.qas);
  } else {
    SyntheticFactConfig sc;
    sc.n_entities = config.synthetic.entities;
    sc.facts_per_entity = config.synthetic.facts_per_entity;
    sc.unseen_fraction = config.synthetic.unseen_fraction;
    sc.seed = config.synthetic.seed;
    auto synth = generate_synthetic(sc);
    data.corpus.passages = std::move(synth.passages);
    data.corpus.qa_pairs = std::move(synth.qa_pairs);
  }

  if (config.vocab) {
    data.vocab = Vocabulary::load(*config.vocab);
  } else {
    std::vector<std::string> texts;
    for (const auto& p : data.corpus.passages) texts.push_back(p.text);
    for (const auto& q : data.corpus.qa_pairs) {
      texts.push_back(q.question);
      for (const auto& a : q.answers) texts.push_back(a);
    }
    data.vocab = Vocabulary::build(texts, config.vocab_max_size, config.vocab_min_count);
  }
  for (auto& p : data.corpus.passages) {
    p.tokens = data.vocab.encode(p.text);
  }

  data.split = split_qa(data.corpus.qa_pairs.size(), config.ratios,
                        derive_seed(config.split_seed, "split"));
  hold_out_unseen(data.split, data.corpus.qa_pairs);

  const bool infusion = std::any_of(config.regimes.begin(), config.regimes.end(), needs_infusion);
  const auto uses = [&](Strategy s) {
    return infusion &&
           std::find(config.strategies.begin(), config.strategies.end(), s) !=
               config.strategies.end();
  };
  if (uses(Strategy::ssm)) {
    AnnotationIndex external;
    const bool ext = config.annotations.has_value();
    if (ext) {
      external = load_annotations(*config.annotations);
    }
    const EntityAnnotator annotator(data.corpus.passages);
    data.entities.reserve(data.corpus.passages.size());
    for (const auto& p : data.corpus.passages) {
      data.entities.push_back(annotate_entities(
          p, ext ? AnnotationMode::external : AnnotationMode::heuristic, annotator, &external));
    }
  }
  if (uses(Strategy::pmi)) {
    if (config.pmi_vocab) {
      data.pmi_vocab = MaskingVocabulary::load(*config.pmi_vocab, data.vocab);
    } else {
      std::vector<TokenIds> docs;
      docs.reserve(data.corpus.passages.size());
      for (const auto& p : data.corpus.passages) docs.push_back(p.tokens);
      const auto table = count_ngrams(docs, config.pmi_n_max);
      data.pmi_vocab = build_masking_vocab(table, config.pmi_min_count);
    }
  }
  return data;
}

std::vector<Seq2SeqExample> qa_examples(const Corpus& corpus, const Vocabulary& vocab,
                                        std::span<const std::size_t> indices) {
  std::vector<Seq2SeqExample> out;
  out.reserve(indices.size());
  for (const auto i : indices) {
    const auto& q = corpus.qa_pairs.at(i);
    Seq2SeqExample ex{vocab.encode(q.question), vocab.encode(q.answers.front())};
    ex.target.push_back(special::eos);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<Seq2SeqExample> infusion_examples(std::span<const MaskedExample> masked) {
  std::vector<Seq2SeqExample> out;
  out.reserve(masked.size());
  for (const auto& m : masked) {
    Seq2SeqExample ex{m.input_ids, m.target_ids};
    ex.target.push_back(special::eos);
    out.push_back(std::move(ex));
  }
  return out;
}

FeatureSpec feature_spec(const ExperimentConfig& config, const Vocabulary& vocab) {
  FeatureSpec spec;
  spec.vocab_size = vocab.size();
  spec.buckets = config.buckets;
  spec.max_position = config.max_position;
  return spec;
}

EvalReport evaluate_model(const ParameterMatrix& theta, const PreparedData& data,
                          std::span<const std::size_t> indices, std::size_t beams,
                          std::size_t max_len) {
  std::vector<std::string> predictions;
  std::vector<std::vector<std::string>> golds;
  predictions.reserve(indices.size());
  golds.reserve(indices.size());
  for (const auto i : indices) {
    const auto& q = data.corpus.qa_pairs.at(i);
    const auto pred = beam_decode(theta, data.vocab.encode(q.question), beams, max_len);
    predictions.push_back(data.vocab.decode(pred.answer()));
    std::vector<std::string> g;
    g.reserve(q.answers.size());
    for (const auto& a : q.answers) g.push_back(canonical_text(a));
    golds.push_back(std::move(g));
  }
  return score_answers(predictions, golds);
}

// ---------------------------------------------------------------------------

Json to_json(const RunMetrics& m) {
  Json parts = Json::object();
  for (const auto& [tag, p] : m.partitions) parts[tag] = partition_json(p);
  return {{"regime", std::string(to_string(m.regime))},
          {"strategy", m.strategy ? Json(std::string(to_string(*m.strategy))) : Json(nullptr)},
          {"seed", m.seed},
          {"em", m.em},
          {"f1", m.f1},
          {"epochs_ran", m.epochs_ran},
          {"stopped_early", m.stopped_early},
          {"partitions", parts}};
}

RunMetrics run_metrics_from_json(const Json& j) {
  try {
    RunMetrics m;
    m.regime = parse_regime(j.at("regime").get<std::string>());
    if (!j.at("strategy").is_null()) {
      m.strategy = parse_strategy(j.at("strategy").get<std::string>());
    }
    m.seed = j.at("seed").get<std::uint64_t>();
    m.em = j.at("em").get<double>();
    m.f1 = j.at("f1").get<double>();
    m.epochs_ran = j.at("epochs_ran").get<std::size_t>();
    m.stopped_early = j.at("stopped_early").get<bool>();
    if (j.contains("partitions")) {
      for (const auto& [tag, p] : j.at("partitions").items()) {
        m.partitions[tag] = {p.at("em").get<double>(), p.at("f1").get<double>(),
                             p.at("n").get<std::size_t>()};
      }
    }
    return m;
  } catch (const Json::exception& e) {
    throw ParseError(0, std::string("malformed metrics record: ") + e.what());
  }
}

std::string run_label(Regime regime, std::optional<Strategy> strategy) {
  if (regime == Regime::ft || !strategy) {
    return "FT";
  }
  auto name = upper(to_string(*strategy));
  switch (regime) {
    case Regime::pt_ft: return name;
    case Regime::pt_ft_ewc: return name + " +EWC";
    case Regime::mtl: return name + " +MTL";
    case Regime::mtl_ft: return name + " +MTL&FT";
    case Regime::ft: break;
  }
  return name;
}

std::vector<TableRow> summarize(std::span<const RunMetrics> runs, const std::string& partition) {
  std::vector<std::string> order;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> scores;
  for (const auto& m : runs) {
    double em = m.em;
    double f1 = m.f1;
    if (!partition.empty()) {
      const auto it = m.partitions.find(partition);
      if (it == m.partitions.end()) continue;
      em = it->second.em;
      f1 = it->second.f1;
    }
    const auto label = run_label(m.regime, m.strategy);
    if (!scores.count(label)) order.push_back(label);
    scores[label].first.push_back(em);
    scores[label].second.push_back(f1);
  }
  std::vector<TableRow> rows;
  for (const auto& label : order) {
    const auto& s = scores[label];
    rows.push_back({label, aggregate_runs(s.first), aggregate_runs(s.second), std::nullopt});
  }
  return build_table(std::move(rows), "FT");
}

std::string render_report(std::span<const RunMetrics> runs) {
  std::ostringstream out;
  std::set<std::string> tags;
  std::set<std::uint64_t> seeds;
  for (const auto& m : runs) {
    seeds.insert(m.seed);
    for (const auto& [tag, p] : m.partitions) tags.insert(tag);
  }
  out << "# Closed-book QA results\n\n"
      << seeds.size() << " seed(s); mean\xC2\xB1std over seeds, gain relative to FT on EM.\n\n"
      << "## Test\n\n"
      << render_markdown(summarize(runs));
  for (const auto& tag : tags) {
    out << "\n## Test (" << tag << ")\n\n" << render_markdown(summarize(runs, tag));
  }
  return out.str();
}

// ---------------------------------------------------------------------------

SeedRunner::SeedRunner(const ExperimentConfig& config, const PreparedData& data,
                       std::uint64_t seed)
    : config_(config), data_(data), seed_(seed) {
  qa_.examples = [ex = std::make_shared<const std::vector<Seq2SeqExample>>(
                      qa_examples(data.corpus, data.vocab, data.split.train))](std::size_t) {
    return ex;
  };
  if (config.hyper.early_stop.enabled && !data.split.dev.empty()) {
    qa_.dev_score = [this](const ParameterMatrix& theta) {
      return evaluate_model(theta, data_, data_.split.dev, config_.beams, config_.max_answer_len)
          .em_mean;
    };
  }
}

TaskData SeedRunner::infusion_task(Strategy s) {
  const auto base = derive_seed(seed_, "mask", {static_cast<std::uint64_t>(s)});
  auto masked = [this, s](std::uint64_t base_seed, std::uint64_t epoch) {
    MaskingInputs in;
    in.entities = data_.entities.empty() ? nullptr : &data_.entities;
    in.pmi_vocab = data_.pmi_vocab ? &*data_.pmi_vocab : nullptr;
    return infusion_examples(mask_corpus(data_.corpus.passages, s, in, config_.masking, base_seed,
                                         epoch));
  };
  TaskData task;
  task.examples = [masked, base](std::size_t epoch) -> ExampleSet {
    return std::make_shared<const std::vector<Seq2SeqExample>>(masked(base, epoch));
  };
  if (config_.hyper.early_stop.enabled) {
    auto dev = std::make_shared<const std::vector<Seq2SeqExample>>(
        masked(derive_seed(base, "dev"), 0));
    if (!dev->empty()) {
      task.dev_score = [dev](const ParameterMatrix& theta) {
        double sum = 0.0;
        for (const auto& ex : *dev) sum += sequence_loss(theta, ex.input, ex.target);
        return -sum / static_cast<double>(dev->size());
      };
    }
  }
  return task;
}

TrainedRun SeedRunner::run(Regime regime, std::optional<Strategy> strategy) {
  RegimeInputs inputs;
  inputs.spec = feature_spec(config_, data_.vocab);
  inputs.qa = qa_;
  inputs.ewc_lambda = config_.ewc_lambda;
  inputs.fisher_n = config_.fisher_samples;
  if (regime == Regime::ft) {
    strategy.reset();
  } else {
    if (!strategy) {
      throw ConfigError("regime " + std::string(to_string(regime)) + " needs a masking strategy",
                        "strategy");
    }
    inputs.infusion = infusion_task(*strategy);
    if (regime == Regime::pt_ft_ewc) {
      inputs.fisher_samples = *inputs.infusion->examples(0);
    }
    inputs.pt_cache = &pt_cache_[*strategy];
    inputs.mtl_cache = &mtl_cache_[*strategy];
  }
  auto outcome = run_regime(regime, inputs, config_.hyper, seed_);

  TrainedRun out;
  out.metrics.regime = regime;
  out.metrics.strategy = strategy;
  out.metrics.seed = seed_;
  out.metrics.epochs_ran = outcome.epochs_ran;
  out.metrics.stopped_early = outcome.stopped_early;

  const auto& test = data_.split.test;
  const auto report = evaluate_model(outcome.theta, data_, test, config_.beams,
                                     config_.max_answer_len);
  out.metrics.em = report.em_mean;
  out.metrics.f1 = report.f1_mean;
  std::map<std::string, std::pair<double, double>> sums;
  std::map<std::string, std::size_t> counts;
  for (std::size_t k = 0; k < test.size(); ++k) {
    const auto& tag = data_.corpus.qa_pairs[test[k]].tag;
    if (tag.empty()) continue;
    sums[tag].first += report.items[k].em;
    sums[tag].second += report.items[k].f1;
    ++counts[tag];
  }
  for (const auto& [tag, n] : counts) {
    const auto d = static_cast<double>(n);
    out.metrics.partitions[tag] = {100.0 * sums[tag].first / d, 100.0 * sums[tag].second / d, n};
  }
  out.theta = std::move(outcome.theta);
  return out;
}

// ---------------------------------------------------------------------------

ExperimentResult run_experiment(const ExperimentConfig& config, unsigned workers, bool write,
                                const ProgressFn& progress) {
  config.validate();
  const auto data = prepare_data(config);
  if (data.split.train.empty()) {
    throw EmptyDataset("the QA training split is empty");
  }

  std::vector<std::pair<Regime, std::optional<Strategy>>> cells;
  for (const auto r : config.regimes) {
    if (r == Regime::ft) {
      cells.emplace_back(r, std::nullopt);
    } else {
      for (const auto s : config.strategies) cells.emplace_back(r, s);
    }
  }

  const std::size_t n_seeds = config.seeds.size();
  std::vector<std::vector<RunMetrics>> per_seed(n_seeds);
  std::vector<std::exception_ptr> errors(n_seeds);
  std::atomic<std::size_t> next{0};
  std::mutex progress_mu;
  auto worker = [&]() {
    for (std::size_t i = next++; i < n_seeds; i = next++) {
      try {
        SeedRunner runner(config, data, config.seeds[i]);
        for (const auto& [r, s] : cells) {
          auto m = runner.run(r, s).metrics;
          if (progress) {
            std::lock_guard lock(progress_mu);
            progress(m);
          }
          per_seed[i].push_back(std::move(m));
        }
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned n_threads =
      static_cast<unsigned>(std::max<std::size_t>(1, std::min<std::size_t>(workers, n_seeds)));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  ExperimentResult result;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (std::size_t i = 0; i < n_seeds; ++i) result.runs.push_back(per_seed[i][c]);
  }
  result.report = render_report(result.runs);

  Json files = Json::array();
  std::vector<Json> lines;
  for (const auto& m : result.runs) {
    files.push_back("metrics/" + metrics_file_name(m));
    lines.push_back(to_json(m));
  }
  result.manifest = {
      {"config", to_json(config)},
      {"config_hash", hex64(config_hash(config))},
      {"seeds", config.seeds},
      {"split_seed", config.split_seed},
      {"data",
       {{"passages", data.corpus.passages.size()},
        {"qa_pairs", data.corpus.qa_pairs.size()},
        {"vocab_size", data.vocab.size()},
        {"train", data.split.train.size()},
        {"dev", data.split.dev.size()},
        {"test", data.split.test.size()}}},
      {"metrics", files},
  };

  if (write) {
    const auto& out = config.output;
    for (const auto& m : result.runs) {
      write_file_atomic(out / "metrics" / metrics_file_name(m), to_json(m).dump(2) + "\n");
    }
    write_file_atomic(out / "metrics.jsonl", to_jsonl(lines));
    write_file_atomic(out / "report.md", result.report);
    write_file_atomic(out / "manifest.json", result.manifest.dump(2) + "\n");
  }
  return result;
}

unsigned workers_from_env() {
  const char* v = std::getenv("KILAB_WORKERS");
  if (v == nullptr || *v == '\0') {
    return 1;
  }
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) {
    throw ConfigError("KILAB_WORKERS must be a positive integer", "KILAB_WORKERS");
  }
  return static_cast<unsigned>(n);
}

}  // namespace kilab
