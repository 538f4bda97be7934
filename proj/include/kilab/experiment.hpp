#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kilab/corpus.hpp"
#include "kilab/eval.hpp"
#include "kilab/masking.hpp"
#include "kilab/model.hpp"
#include "kilab/pmi.hpp"
#include "kilab/tokenizer.hpp"
#include "kilab/training.hpp"

namespace kilab {

struct SyntheticSource {
  std::size_t entities = 200;
  std::size_t facts_per_entity = 3;
  double unseen_fraction = 0.3;
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  // Ingested data; the synthetic benchmark is generated when both are unset.
  std::optional<std::filesystem::path> passages;
  std::optional<std::filesystem::path> qas;
  std::optional<std::filesystem::path> annotations;
  std::optional<std::filesystem::path> vocab;
  std::optional<std::filesystem::path> pmi_vocab;
  SyntheticSource synthetic;

  std::size_t vocab_max_size = 32000;
  std::size_t vocab_min_count = 1;

  MaskingBudget masking;
  int pmi_n_max = 5;
  std::size_t pmi_min_count = 5;

  std::vector<Strategy> strategies{Strategy::rtm, Strategy::ssm, Strategy::pmi};
  std::vector<Regime> regimes{Regime::ft, Regime::pt_ft, Regime::pt_ft_ewc, Regime::mtl,
                              Regime::mtl_ft};

  Hyperparams hyper;
  std::size_t buckets = 4096;
  std::size_t max_position = 8;
  std::size_t beams = 5;
  std::size_t max_answer_len = 16;

  double ewc_lambda = 1000.0;
  std::size_t fisher_samples = 1000;

  SplitRatios ratios = kDefaultRatios;
  std::uint64_t split_seed = 0;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  std::filesystem::path output = "runs/default";

  void validate() const;
};

/// Unknown keys raise ConfigError naming the (dotted) key. Relative paths
/// are resolved against `base_dir`.
ExperimentConfig config_from_json(const Json& j, const std::filesystem::path& base_dir = {});
Json to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);
/// FNV-1a of the canonical JSON form.
std::uint64_t config_hash(const ExperimentConfig& c);

/// Everything the regimes need, built once per experiment.
struct PreparedData {
  Corpus corpus;
  Vocabulary vocab;
  DatasetSplit split;
  std::vector<std::vector<EntitySpan>> entities;  // parallel to passages
  std::optional<MaskingVocabulary> pmi_vocab;
};

PreparedData prepare_data(const ExperimentConfig& config);

std::vector<Seq2SeqExample> qa_examples(const Corpus& corpus, const Vocabulary& vocab,
                                        std::span<const std::size_t> indices);
std::vector<Seq2SeqExample> infusion_examples(std::span<const MaskedExample> masked);

FeatureSpec feature_spec(const ExperimentConfig& config, const Vocabulary& vocab);

/// Beam-decodes every question in `indices` and scores it against its golds.
EvalReport evaluate_model(const ParameterMatrix& theta, const PreparedData& data,
                          std::span<const std::size_t> indices, std::size_t beams,
                          std::size_t max_len);

struct PartitionScore {
  double em = 0.0;
  double f1 = 0.0;
  std::size_t n = 0;

  bool operator==(const PartitionScore&) const = default;
};

struct RunMetrics {
  Regime regime = Regime::ft;
  std::optional<Strategy> strategy;  // none for FT
  std::uint64_t seed = 0;
  double em = 0.0;
  double f1 = 0.0;
  std::size_t epochs_ran = 0;
  bool stopped_early = false;
  std::map<std::string, PartitionScore> partitions;  // by QA tag

  bool operator==(const RunMetrics&) const = default;
};

Json to_json(const RunMetrics& m);
RunMetrics run_metrics_from_json(const Json& j);

/// Table row label, e.g. "FT", "RTM", "SSM +EWC", "PMI +MTL&FT".
std::string run_label(Regime regime, std::optional<Strategy> strategy);

/// One row per (regime, strategy) in first-appearance order. `partition`
/// selects a tag partition instead of the overall scores.
std::vector<TableRow> summarize(std::span<const RunMetrics> runs, const std::string& partition = {});
std::string render_report(std::span<const RunMetrics> runs);

struct TrainedRun {
  ParameterMatrix theta;
  RunMetrics metrics;
};

/// Trains and evaluates one (regime, strategy, seed) cell. The caches let
/// regimes that share a first stage reuse it.
class SeedRunner {
 public:
  SeedRunner(const ExperimentConfig& config, const PreparedData& data, std::uint64_t seed);

  TrainedRun run(Regime regime, std::optional<Strategy> strategy);

 private:
  TaskData infusion_task(Strategy s);

  const ExperimentConfig& config_;
  const PreparedData& data_;
  std::uint64_t seed_;
  TaskData qa_;
  std::map<Strategy, std::optional<TrainResult>> pt_cache_;
  std::map<Strategy, std::optional<TrainResult>> mtl_cache_;
};

struct ExperimentResult {
  std::vector<RunMetrics> runs;
  std::string report;
  Json manifest;
};

using ProgressFn = std::function<void(const RunMetrics&)>;

/// Full pipeline; writes metrics/, metrics.jsonl, report.md and
/// manifest.json under config.output when `write` is set.
ExperimentResult run_experiment(const ExperimentConfig& config, unsigned workers = 1,
                                bool write = true, const ProgressFn& progress = {});

/// Worker count from KILAB_WORKERS (default 1).
unsigned workers_from_env();

}  // namespace kilab
