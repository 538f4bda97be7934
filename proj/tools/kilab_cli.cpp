// kilab: command-line front end for the knowledge-infusion lab.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kilab/corpus.hpp"
#include "kilab/errors.hpp"
#include "kilab/eval.hpp"
#include "kilab/experiment.hpp"
#include "kilab/jsonl.hpp"
#include "kilab/masking.hpp"
#include "kilab/pmi.hpp"
#include "kilab/tokenizer.hpp"
#include "kilab/training.hpp"

namespace fs = std::filesystem;
using namespace kilab;

namespace {

std::vector<std::string> corpus_texts(const Corpus& c) {
  std::vector<std::string> texts;
  for (const auto& p : c.passages) texts.push_back(p.text);
  for (const auto& q : c.qa_pairs) {
    texts.push_back(q.question);
    for (const auto& a : q.answers) texts.push_back(a);
  }
  return texts;
}

std::vector<Passage> load_passages(const fs::path& path, const Vocabulary& vocab) {
  // QA file is optional for passage-only commands.
  auto corpus = corpus_from_records(read_jsonl(path), {});
  for (auto& p : corpus.passages) p.tokens = vocab.encode(p.text);
  return std::move(corpus.passages);
}

ExperimentConfig config_or_default(const std::string& path) {
  if (path.empty()) {
    ExperimentConfig c;
    c.validate();
    return c;
  }
  return load_config(path);
}

void print_metrics(const RunMetrics& m) {
  std::fprintf(stderr, "%-14s seed %-4llu EM %6.2f  F1 %6.2f  epochs %zu\n",
               run_label(m.regime, m.strategy).c_str(), static_cast<unsigned long long>(m.seed),
               m.em, m.f1, m.epochs_ran);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-infusion experiment lab"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate the synthetic-facts benchmark");
  SyntheticFactConfig synth_cfg;
  std::string synth_out;
  synth->add_option("--entities", synth_cfg.n_entities, "Number of entities")->capture_default_str();
  synth->add_option("--facts-per-entity", synth_cfg.facts_per_entity)->capture_default_str();
  synth->add_option("--unseen-fraction", synth_cfg.unseen_fraction)->capture_default_str();
  synth->add_option("--seed", synth_cfg.seed)->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->required();

  // vocab
  auto* vocab_cmd = app.add_subcommand("vocab", "Build a token vocabulary");
  std::string v_passages, v_qas, v_out;
  std::size_t v_max = 32000, v_min = 1;
  vocab_cmd->add_option("--passages", v_passages)->required();
  vocab_cmd->add_option("--qas", v_qas)->required();
  vocab_cmd->add_option("--max-size", v_max)->capture_default_str();
  vocab_cmd->add_option("--min-count", v_min)->capture_default_str();
  vocab_cmd->add_option("--out", v_out)->required();

  // split
  auto* split_cmd = app.add_subcommand("split", "Split QA pairs into train/dev/test");
  std::string s_passages, s_qas, s_out;
  std::uint64_t s_seed = 0;
  std::vector<double> s_ratios{kDefaultRatios.begin(), kDefaultRatios.end()};
  split_cmd->add_option("--passages", s_passages)->required();
  split_cmd->add_option("--qas", s_qas)->required();
  split_cmd->add_option("--seed", s_seed)->capture_default_str();
  split_cmd->add_option("--ratios", s_ratios, "train dev test")->expected(3);
  split_cmd->add_option("--out", s_out)->required();

  // pmi build
  auto* pmi_cmd = app.add_subcommand("pmi", "PMI masking vocabulary");
  pmi_cmd->require_subcommand(1);
  auto* pmi_build = pmi_cmd->add_subcommand("build", "Build a PMI masking vocabulary");
  std::string p_passages, p_vocab, p_out;
  int p_nmax = 5;
  std::size_t p_min = 5;
  unsigned p_workers = 0;
  pmi_build->add_option("--passages", p_passages)->required();
  pmi_build->add_option("--vocab", p_vocab)->required();
  pmi_build->add_option("--n-max", p_nmax)->capture_default_str();
  pmi_build->add_option("--min-count", p_min)->capture_default_str();
  pmi_build->add_option("--workers", p_workers, "Counting threads (default KILAB_WORKERS)");
  pmi_build->add_option("--out", p_out)->required();

  // mask
  auto* mask_cmd = app.add_subcommand("mask", "Produce span-corrupted examples");
  std::string m_strategy, m_passages, m_vocab, m_pmi, m_ann, m_out;
  std::uint64_t m_seed = 0, m_epoch = 0;
  MaskingBudget m_budget;
  mask_cmd->add_option("--strategy", m_strategy)->required()->check(
      CLI::IsMember({"rtm", "ssm", "pmi"}));
  mask_cmd->add_option("--passages", m_passages)->required();
  mask_cmd->add_option("--vocab", m_vocab)->required();
  mask_cmd->add_option("--pmi-vocab", m_pmi);
  mask_cmd->add_option("--annotations", m_ann, "External entity spans (SSM)");
  mask_cmd->add_option("--seed", m_seed)->capture_default_str();
  mask_cmd->add_option("--epoch", m_epoch)->capture_default_str();
  mask_cmd->add_option("--rate", m_budget.rate)->capture_default_str();
  mask_cmd->add_option("--mean-span", m_budget.mean_span)->capture_default_str();
  mask_cmd->add_option("--out", m_out)->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train one regime for one seed");
  std::string t_config, t_regime, t_strategy, t_out, t_metrics;
  std::uint64_t t_seed = 1;
  train_cmd->add_option("--config", t_config, "Experiment config (JSON)");
  train_cmd->add_option("--regime", t_regime)->required()->check(
      CLI::IsMember({"ft", "pt-ft", "pt-ft-ewc", "mtl", "mtl-ft"}));
  train_cmd->add_option("--strategy", t_strategy)->check(CLI::IsMember({"rtm", "ssm", "pmi"}));
  train_cmd->add_option("--seed", t_seed)->capture_default_str();
  train_cmd->add_option("--out", t_out, "Checkpoint path")->required();
  train_cmd->add_option("--metrics", t_metrics, "Also write test metrics here");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  std::string e_config, e_ckpt, e_part = "test", e_out;
  eval_cmd->add_option("--config", e_config);
  eval_cmd->add_option("--checkpoint", e_ckpt)->required();
  eval_cmd->add_option("--split", e_part)->check(CLI::IsMember({"train", "dev", "test"}))
      ->capture_default_str();
  eval_cmd->add_option("--out", e_out, "Per-question predictions (JSONL)");

  // report
  auto* report_cmd = app.add_subcommand("report", "Aggregate metrics files into a table");
  std::vector<std::string> r_files;
  std::string r_out;
  report_cmd->add_option("metrics", r_files, "Metrics files or directories")->required();
  report_cmd->add_option("--out", r_out);

  // run
  auto* run_cmd = app.add_subcommand("run", "Run a full experiment from a config");
  std::string x_config, x_output;
  std::vector<std::uint64_t> x_seeds;
  run_cmd->add_option("--config", x_config);
  run_cmd->add_option("--output", x_output, "Override the output directory");
  run_cmd->add_option("--seeds", x_seeds, "Override the seed list");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::config);
  }

  try {
    if (*synth) {
      const auto s = generate_synthetic(synth_cfg);
      const fs::path dir = synth_out;
      save_corpus({s.passages, s.qa_pairs}, dir / "passages.jsonl", dir / "qas.jsonl");
      std::vector<Json> facts;
      for (const auto& f : s.facts) facts.push_back(to_json(f));
      write_file_atomic(dir / "facts.jsonl", to_jsonl(facts));
      std::cerr << s.passages.size() << " passages, " << s.qa_pairs.size() << " QA pairs\n";
    } else if (*vocab_cmd) {
      const auto corpus = load_corpus(v_passages, v_qas);
      const auto texts = corpus_texts(corpus);
      const auto v = Vocabulary::build(texts, v_max, v_min);
      v.save(v_out);
      std::cerr << v.size() << " tokens\n";
    } else if (*split_cmd) {
      const auto corpus = load_corpus(s_passages, s_qas);
      const SplitRatios ratios{s_ratios.at(0), s_ratios.at(1), s_ratios.at(2)};
      auto split = split_qa(corpus.qa_pairs.size(), ratios, s_seed);
      hold_out_unseen(split, corpus.qa_pairs);
      write_file_atomic(s_out, to_json(split).dump(2) + "\n");
      std::cerr << split.train.size() << '/' << split.dev.size() << '/' << split.test.size()
                << '\n';
    } else if (*pmi_build) {
      const auto vocab = Vocabulary::load(p_vocab);
      const auto passages = load_passages(p_passages, vocab);
      std::vector<TokenIds> docs;
      for (const auto& p : passages) docs.push_back(p.tokens);
      const unsigned workers = p_workers > 0 ? p_workers : workers_from_env();
      const auto table = count_ngrams(docs, p_nmax, workers);
      const auto mv = build_masking_vocab(table, p_min);
      mv.save(p_out, vocab);
      std::cerr << mv.entries().size() << " collocations\n";
    } else if (*mask_cmd) {
      const auto strategy = parse_strategy(m_strategy);
      if (strategy == Strategy::pmi && m_pmi.empty()) {
        throw ConfigError("PMI masking requires --pmi-vocab", "pmi_vocab");
      }
      m_budget.validate();
      const auto vocab = Vocabulary::load(m_vocab);
      const auto passages = load_passages(m_passages, vocab);
      MaskingInputs inputs;
      std::optional<MaskingVocabulary> mv;
      std::vector<std::vector<EntitySpan>> entities;
      if (strategy == Strategy::pmi) {
        mv = MaskingVocabulary::load(m_pmi, vocab);
        inputs.pmi_vocab = &*mv;
      }
      if (strategy == Strategy::ssm) {
        AnnotationIndex external;
        if (!m_ann.empty()) external = load_annotations(m_ann);
        const EntityAnnotator annotator(passages);
        for (const auto& p : passages) {
          entities.push_back(annotate_entities(
              p, m_ann.empty() ? AnnotationMode::heuristic : AnnotationMode::external, annotator,
              &external));
        }
        inputs.entities = &entities;
      }
      const auto examples =
          mask_corpus(passages, strategy, inputs, m_budget, m_seed, m_epoch, workers_from_env());
      std::vector<Json> lines;
      for (const auto& e : examples) lines.push_back(to_json(e));
      write_file_atomic(m_out, to_jsonl(lines));
      std::cerr << examples.size() << " masked examples\n";
    } else if (*train_cmd) {
      const auto config = config_or_default(t_config);
      const auto regime = parse_regime(t_regime);
      std::optional<Strategy> strategy;
      if (!t_strategy.empty()) strategy = parse_strategy(t_strategy);
      auto cfg = config;
      cfg.regimes = {regime};
      if (strategy) cfg.strategies = {*strategy};
      const auto data = prepare_data(cfg);
      SeedRunner runner(cfg, data, t_seed);
      auto trained = runner.run(regime, strategy);
      trained.theta.save(t_out);
      print_metrics(trained.metrics);
      if (!t_metrics.empty()) {
        write_file_atomic(t_metrics, to_json(trained.metrics).dump(2) + "\n");
      }
    } else if (*eval_cmd) {
      const auto config = config_or_default(e_config);
      const auto data = prepare_data(config);
      const auto theta = ParameterMatrix::load(e_ckpt);
      if (!(theta.spec() == feature_spec(config, data.vocab))) {
        throw ShapeError("checkpoint does not match the configured vocabulary and features");
      }
      const auto& idx = e_part == "train" ? data.split.train
                        : e_part == "dev" ? data.split.dev
                                          : data.split.test;
      const auto report = evaluate_model(theta, data, idx, config.beams, config.max_answer_len);
      if (!e_out.empty()) {
        std::vector<Json> lines;
        for (std::size_t k = 0; k < report.items.size(); ++k) {
          const auto& it = report.items[k];
          lines.push_back({{"question", data.corpus.qa_pairs[idx[k]].question},
                           {"prediction", it.prediction},
                           {"golds", it.golds},
                           {"em", it.em},
                           {"f1", it.f1}});
        }
        write_file_atomic(e_out, to_jsonl(lines));
      }
      std::printf("EM %.2f  F1 %.2f  (n=%zu)\n", report.em_mean, report.f1_mean,
                  report.items.size());
    } else if (*report_cmd) {
      std::vector<fs::path> files;
      for (const auto& f : r_files) {
        if (fs::is_directory(f)) {
          std::vector<fs::path> found;
          for (const auto& e : fs::directory_iterator(f)) {
            if (e.path().extension() == ".json") found.push_back(e.path());
          }
          std::sort(found.begin(), found.end());
          files.insert(files.end(), found.begin(), found.end());
        } else {
          files.emplace_back(f);
        }
      }
      std::vector<RunMetrics> runs;
      for (const auto& f : files) {
        try {
          runs.push_back(run_metrics_from_json(Json::parse(read_text_file(f))));
        } catch (const Json::parse_error& e) {
          throw ParseError(0, f.string() + ": " + e.what());
        }
      }
      if (runs.empty()) throw EmptyDataset("no metrics files given");
      const auto md = render_report(runs);
      if (r_out.empty()) {
        std::cout << md;
      } else {
        write_file_atomic(r_out, md);
      }
    } else if (*run_cmd) {
      auto config = config_or_default(x_config);
      if (!x_output.empty()) config.output = x_output;
      if (!x_seeds.empty()) config.seeds = x_seeds;
      config.validate();
      const auto result = run_experiment(config, workers_from_env(), true, print_metrics);
      std::cout << result.report;
    }
  } catch (const std::exception& e) {
    std::cerr << "kilab: " << e.what() << '\n';
    return static_cast<int>(exit_code_for(e));
  }
  return 0;
}
