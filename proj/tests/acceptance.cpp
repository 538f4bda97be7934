// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when
// any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kilab/corpus.hpp"
#include "kilab/errors.hpp"
#include "kilab/eval.hpp"
#include "kilab/experiment.hpp"
#include "kilab/masking.hpp"
#include "kilab/model.hpp"
#include "kilab/pmi.hpp"
#include "kilab/training.hpp"
#include "oracles.hpp"

using namespace kilab;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(const std::string& id, bool ok, const std::string& detail) {
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", id.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// 1 -------------------------------------------------------------------------

void masking_correctness() {
  const auto t0 = Clock::now();
  Rng gen(derive_seed(2024, "acceptance-masking"));
  const MaskingBudget budget;
  std::size_t bad_rtm = 0, bad_ssm = 0, bad_pmi = 0;
  std::string first_error;

  std::vector<TokenIds> passages(1000);
  for (auto& p : passages) {
    p.resize(10 + gen.below(503));
    // Zipf-like draws so that the PMI vocabulary has real collocations.
    for (auto& t : p) {
      const double u = gen.uniform();
      t = 104 + static_cast<TokenId>(std::floor(std::pow(400.0, u)) - 1);
    }
  }
  const auto vocab = build_masking_vocab(count_ngrams(passages, 5), 5);
  const std::size_t longest_unit = std::max<std::size_t>(1, vocab.longest());

  for (std::size_t i = 0; i < passages.size(); ++i) {
    const auto& tokens = passages[i];
    const std::size_t n = tokens.size();
    const std::size_t m = budget.tokens_for(n);
    if (m != static_cast<std::size_t>(std::ceil(0.15 * static_cast<double>(n) - 1e-9)) ||
        m != (15 * n + 99) / 100) {
      ++bad_rtm;
      continue;
    }

    Rng r1(derive_seed(i, "rtm"));
    const auto rtm = corrupt_rtm(tokens, budget, r1);
    auto err = oracle::check_masked(tokens, rtm);
    if (!err.empty() || rtm.masked_token_count != m) {
      ++bad_rtm;
      if (first_error.empty()) first_error = "rtm: " + (err.empty() ? "budget" : err);
    }

    std::vector<EntitySpan> spans;
    std::size_t longest_entity = 1;
    for (std::size_t p = gen.below(4); p < n;) {
      const std::size_t len = 1 + gen.below(4);
      if (p + len <= n) {
        spans.push_back({"p", p, p + len});
        longest_entity = std::max(longest_entity, len);
      }
      p += len + 1 + gen.below(8);
    }
    Rng r2(derive_seed(i, "ssm"));
    const auto ssm = corrupt_ssm(tokens, spans, budget, r2);
    err = oracle::check_masked(tokens, ssm);
    if (!err.empty() || ssm.masked_token_count < m ||
        ssm.masked_token_count > m + longest_entity - 1) {
      ++bad_ssm;
      if (first_error.empty()) first_error = "ssm: " + (err.empty() ? "budget" : err);
    }

    Rng r3(derive_seed(i, "pmi"));
    const auto pmi = corrupt_pmi(tokens, vocab, budget, r3);
    err = oracle::check_masked(tokens, pmi);
    if (!err.empty() || pmi.masked_token_count < m ||
        pmi.masked_token_count > m + longest_unit - 1) {
      ++bad_pmi;
      if (first_error.empty()) first_error = "pmi: " + (err.empty() ? "budget" : err);
    }
  }
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << "1000 passages, violations rtm=" << bad_rtm << " ssm=" << bad_ssm << " pmi=" << bad_pmi
    << ", pmi vocab " << vocab.entries().size() << " entries, " << fmt("%.2f s", secs);
  if (!first_error.empty()) d << ", first: " << first_error;
  report("1 masking correctness", bad_rtm + bad_ssm + bad_pmi == 0 && secs < 10.0, d.str());
}

// 2 -------------------------------------------------------------------------

void pmi_oracle() {
  Rng gen(derive_seed(2024, "acceptance-pmi"));
  std::size_t mismatches = 0, entries = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TokenIds> corpus;
    const std::size_t budget = 50 + gen.below(451);
    const int alphabet = 3 + static_cast<int>(gen.below(10));
    std::size_t used = 0;
    while (used < budget) {
      const std::size_t len = std::min<std::size_t>(1 + gen.below(60), budget - used);
      TokenIds doc(len);
      for (auto& t : doc) {
        const auto r = gen.below(static_cast<std::uint64_t>(alphabet * alphabet));
        t = 104 + static_cast<TokenId>(std::sqrt(static_cast<double>(r)));
      }
      used += len;
      corpus.push_back(std::move(doc));
    }
    const int n_max = 2 + static_cast<int>(gen.below(4));
    const std::size_t min_count = 1 + gen.below(4);
    // Even trials use the default per-order cutoffs, odd ones explicit ones.
    std::map<int, std::size_t> top_k;
    if (trial % 2 == 1) {
      for (int n = 2; n <= n_max; ++n) top_k[n] = 1 + gen.below(40);
    }
    const auto got = build_masking_vocab(count_ngrams(corpus, n_max), min_count, top_k);
    const auto want = oracle::masking_vocab(corpus, n_max, min_count, top_k);
    entries += want.size();
    if (got.entries().size() != want.size()) {
      ++mismatches;
      continue;
    }
    for (std::size_t i = 0; i < want.size(); ++i) {
      const auto& g = got.entries()[i];
      worst = std::max(worst, std::abs(g.score - want[i].score));
      if (g.ngram != want[i].ngram || g.count != want[i].count ||
          std::abs(g.score - want[i].score) > 1e-12) {
        ++mismatches;
        break;
      }
    }
  }
  std::ostringstream d;
  d << "20 corpora, " << entries << " oracle entries, " << mismatches
    << " mismatching corpora, max |score diff| " << fmt("%.2e", worst);
  report("2 PMI oracle equivalence", mismatches == 0, d.str());
}

// 3 -------------------------------------------------------------------------

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

void gradient_exactness() {
  const auto t0 = Clock::now();
  Rng gen(derive_seed(2024, "acceptance-grad"));
  double worst_loss = 0.0, worst_ewc = 0.0;
  std::size_t max_d = 0;
  for (int trial = 0; trial < 100; ++trial) {
    FeatureSpec spec;
    spec.vocab_size = 4 + gen.below(5);
    spec.max_position = gen.below(6);
    // Keep D = 2|V| + 1 + B + P_max + 2 at most 64.
    const std::size_t fixed = 2 * spec.vocab_size + 1 + spec.max_position + 2;
    spec.buckets = 1 + gen.below(64 - fixed);
    max_d = std::max(max_d, spec.width());
    const std::size_t V = spec.vocab_size;

    ParameterMatrix theta(spec), anchor(spec), fisher(spec);
    for (std::size_t i = 0; i < theta.flat().size(); ++i) {
      theta.flat()[i] = 2.0 * gen.uniform() - 1.0;
      anchor.flat()[i] = 2.0 * gen.uniform() - 1.0;
      fisher.flat()[i] = gen.below(4) == 0 ? 0.0 : gen.uniform();
    }
    TokenIds input(gen.below(6)), target(1 + gen.below(4));
    for (auto& t : input) t = static_cast<TokenId>(gen.below(V));
    for (auto& t : target) t = static_cast<TokenId>(gen.below(V));
    target.push_back(special::eos);
    const EwcState ewc(anchor, fisher, 0.5 + 20.0 * gen.uniform());

    const auto lg = loss_and_grad(theta, input, target);
    const auto eg = ewc_penalty_grad(theta, ewc);
    const double h = 1e-5;
    for (std::size_t f = 0; f < spec.width(); ++f) {
      for (std::size_t t = 0; t < V; ++t) {
        ParameterMatrix p = theta, m = theta;
        p.at(static_cast<TokenId>(t), f) += h;
        m.at(static_cast<TokenId>(t), f) -= h;
        const double fd_loss =
            (sequence_loss(p, input, target) - sequence_loss(m, input, target)) / (2 * h);
        const double fd_ewc = (ewc_penalty(p, ewc) - ewc_penalty(m, ewc)) / (2 * h);
        worst_loss = std::max(worst_loss, rel_err(fd_loss, lg.grad.at(static_cast<TokenId>(t), f)));
        worst_ewc = std::max(worst_ewc, rel_err(fd_ewc, eg.at(static_cast<TokenId>(t), f)));
      }
    }
  }
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << "100 instances (|V|<=8, D<=" << max_d << "), max rel err loss " << fmt("%.2e", worst_loss)
    << " ewc " << fmt("%.2e", worst_ewc) << ", " << fmt("%.2f s", secs);
  report("3 gradient exactness", worst_loss <= 1e-5 && worst_ewc <= 1e-5 && secs < 30.0, d.str());
}

// 4 -------------------------------------------------------------------------

void fisher_and_ewc() {
  FeatureSpec row;
  row.vocab_size = 1;
  row.buckets = 1;
  row.max_position = 0;
  auto grad = [](std::vector<double> g) {
    SparseGradient s(1);
    for (std::size_t i = 0; i < g.size(); ++i) s.column(i)[0] = g[i];
    return s;
  };
  const std::vector<SparseGradient> one{grad({2.0, -1.0})};
  const std::vector<SparseGradient> two{grad({2.0, 0.0}), grad({0.0, 2.0})};
  const auto f1 = fisher_from_gradients(row, one);
  const auto f2 = fisher_from_gradients(row, two);
  const bool fisher_ok = std::abs(f1.at(0, 0) - 4.0) <= 1e-10 && std::abs(f1.at(0, 1) - 1.0) <= 1e-10 &&
                         std::abs(f2.at(0, 0) - 2.0) <= 1e-10 && std::abs(f2.at(0, 1) - 2.0) <= 1e-10;

  ParameterMatrix anchor(row), fisher(row), theta(row);
  fisher.at(0, 0) = 1.0;
  fisher.at(0, 1) = 0.5;
  theta.at(0, 0) = 1.0;
  theta.at(0, 1) = 2.0;
  const double penalty = ewc_penalty(theta, EwcState(anchor, fisher, 2.0));
  const bool penalty_ok = std::abs(penalty - 3.0) <= 1e-10;

  // Fine-tuning under a dominating penalty, on a small synthetic task pair.
  FeatureSpec spec;
  spec.vocab_size = 24;
  spec.buckets = 64;
  spec.max_position = 4;
  Rng gen(derive_seed(2024, "acceptance-ewc"));
  auto examples = [&](std::size_t n) {
    std::vector<Seq2SeqExample> out;
    for (std::size_t i = 0; i < n; ++i) {
      Seq2SeqExample ex;
      for (int k = 0; k < 4; ++k) ex.input.push_back(4 + static_cast<TokenId>(gen.below(20)));
      ex.target = {4 + static_cast<TokenId>(gen.below(20)), 4 + static_cast<TokenId>(gen.below(20)),
                   special::eos};
      out.push_back(std::move(ex));
    }
    return out;
  };
  const auto infusion = examples(60);
  const auto qa = examples(60);
  Hyperparams h;
  h.pt_batch = 8;
  h.ft_batch = 8;
  h.max_epochs = 10;
  h.learning_rate = 0.5;
  h.early_stop.enabled = false;
  const auto pt = train_task(ParameterMatrix(spec), fixed_task(infusion), h, TaskKind::infusion,
                             nullptr, 1);
  const EwcState pin(pt.theta, fisher_diagonal(pt.theta, infusion, 1000, 2), 1e9);
  const auto ft = train_task(pt.theta, fixed_task(qa), h, TaskKind::qa, &pin, 3);
  double drift = 0.0;
  for (const auto i : pin.support) {
    drift = std::max(drift, std::abs(ft.theta.flat()[i] - pt.theta.flat()[i]));
  }
  std::ostringstream d;
  d << "F=[" << f1.at(0, 0) << "," << f1.at(0, 1) << "] and [" << f2.at(0, 0) << ","
    << f2.at(0, 1) << "], penalty " << penalty << ", lambda=1e9 max drift on "
    << pin.support.size() << " F>0 coordinates " << fmt("%.2e", drift);
  report("4 Fisher and EWC arithmetic", fisher_ok && penalty_ok && drift <= 1e-3, d.str());
}

// 5 -------------------------------------------------------------------------

void table_statistics() {
  const double g_rtm = relative_gain(53.47, 51.22);
  const double g_ssm = relative_gain(56.05, 51.22);
  const double g_pmi = relative_gain(55.78, 51.22);
  const double v_ssm = variance_reduction(0.62, 1.71);
  const double v_rtm = variance_reduction(0.62, 0.82);
  const bool ok = std::abs(g_rtm - 4.4) <= 0.05 && std::abs(g_ssm - 9.4) <= 0.05 &&
                  std::abs(g_pmi - 8.9) <= 0.05 && std::abs(v_ssm - 87.0) <= 0.5 &&
                  std::abs(v_rtm - 43.0) <= 0.5;
  char buf[256];
  std::snprintf(buf, sizeof buf, "gains %.1f%% %.1f%% %.1f%%, variance reduction %.1f%% %.1f%%",
                g_rtm, g_ssm, g_pmi, v_ssm, v_rtm);
  report("5 relative gain and variance reduction", ok, buf);
}

// 6 -------------------------------------------------------------------------

void metric_units() {
  using G = std::vector<std::string>;
  int passed = 0, total = 0;
  auto check = [&](bool c) {
    ++total;
    passed += c;
  };
  check(normalize_answer("The Monster Hunters!") == "monster hunters");
  check(normalize_answer("").empty());
  check(normalize_answer("a  b") == "b");
  check(exact_match("Andrzej Sapkowski", G{"Andrzej Sapkowski"}) == 1);
  check(exact_match("andrzej sapkowski", G{"Andrzej Sapkowski"}) == 1);
  check(exact_match("fantasy", G{"monster hunters"}) == 0);
  check(token_f1("fantasy series", G{"fantasy"}) == 2.0 / 3.0);
  check(token_f1("monster hunters", G{"monster hunters"}) == 1.0);
  check(token_f1("fantasy", G{"monster hunters"}) == 0.0);
  const std::vector<double> s{1.0, 2.0, 3.0};
  const auto a = aggregate_runs(s);
  check(a.mean == 2.0 && a.std == 1.0);
  const std::vector<double> one{7.0};
  const auto o = aggregate_runs(one);
  check(o.mean == 7.0 && o.std == 0.0 && o.warned);
  check(relative_gain(5.0, 5.0) == 0.0);
  check(variance_reduction(0.5, 0.5) == 0.0);
  bool threw = false;
  try {
    exact_match("x", G{});
  } catch (const ConfigError&) {
    threw = true;
  }
  check(threw);
  report("6 metric unit suite", passed == total,
         std::to_string(passed) + "/" + std::to_string(total) + " examples exact");
}

// 7 -------------------------------------------------------------------------

struct CellMean {
  double unseen = 0.0;
  double overall = 0.0;
  std::size_t n = 0;
};

std::map<std::string, CellMean> cell_means(const std::vector<RunMetrics>& runs) {
  std::map<std::string, CellMean> out;
  for (const auto& m : runs) {
    auto& c = out[run_label(m.regime, m.strategy)];
    c.unseen += m.partitions.at(kUnseenFact).em;
    c.overall += m.em;
    ++c.n;
  }
  for (auto& [label, c] : out) {
    c.unseen /= static_cast<double>(c.n);
    c.overall /= static_cast<double>(c.n);
  }
  return out;
}

void directional(const fs::path& config_path, const fs::path& out_dir) {
  auto config = load_config(config_path);
  config.output = out_dir / "desk-scale";
  const auto t0 = Clock::now();
  const auto result = run_experiment(config, 1);
  const double secs = seconds_since(t0);
  std::printf("%s", result.report.c_str());
  std::printf("desk-scale runtime %.1f s\n", secs);

  const auto means = cell_means(result.runs);
  const auto ft = means.at("FT");
  const std::vector<std::string> strategies{"RTM", "SSM", "PMI"};

  bool ok_a = ft.unseen <= 5.0;
  std::ostringstream da;
  da << "FT unseen EM " << fmt("%.2f", ft.unseen);
  for (const auto& s : strategies) {
    const double pt = means.at(s).unseen;
    ok_a = ok_a && pt > ft.unseen;
    da << ", " << s << " " << fmt("%.2f", pt);
  }
  const bool sized = result.manifest["data"]["passages"] == 600 &&
                     result.manifest["data"]["qa_pairs"] == 1800 && config.seeds.size() == 5;
  da << ", " << fmt("%.1f s", secs);
  report("7a FT baseline vs PT+FT on unseen facts", ok_a && sized && secs < 300.0, da.str());

  bool ok_b = true;
  std::ostringstream db;
  for (const auto& s : strategies) {
    const double pt = means.at(s).unseen;
    const double ewc = means.at(s + " +EWC").unseen;
    const double mtl = means.at(s + " +MTL").unseen;
    ok_b = ok_b && ewc >= pt - 1.0 && mtl >= pt - 1.0;
    db << s << " pt-ft " << fmt("%.2f", pt) << " ewc " << fmt("%.2f", ewc) << " mtl "
       << fmt("%.2f", mtl) << "; ";
  }
  report("7b EWC and MTL retain at least PT+FT (1 point slack)", ok_b, db.str());

  bool ok_c = true;
  std::ostringstream dc;
  for (const auto& s : strategies) {
    const auto& mtl = means.at(s + " +MTL");
    const auto& mtl_ft = means.at(s + " +MTL&FT");
    ok_c = ok_c && mtl_ft.unseen >= mtl.unseen - 0.5 && mtl_ft.overall >= mtl.overall - 0.5;
    dc << s << " mtl " << fmt("%.2f", mtl.unseen) << "/" << fmt("%.2f", mtl.overall)
       << " mtl&ft " << fmt("%.2f", mtl_ft.unseen) << "/" << fmt("%.2f", mtl_ft.overall) << "; ";
  }
  report("7c MTL&FT at least MTL - 0.5 (unseen/overall)", ok_c, dc.str());
}

// 8 -------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void determinism(const fs::path& config_path, const fs::path& out_dir) {
  auto config = load_config(config_path);
  config.seeds = {1, 2};
  config.synthetic.entities = 60;
  config.output = out_dir / "rerun-a";
  run_experiment(config, 1);
  config.output = out_dir / "rerun-b";
  run_experiment(config, 2);
  std::size_t files = 0, differing = 0;
  for (const auto& e : fs::directory_iterator(out_dir / "rerun-a" / "metrics")) {
    ++files;
    differing += slurp(e.path()) != slurp(out_dir / "rerun-b" / "metrics" / e.path().filename());
  }
  differing += slurp(out_dir / "rerun-a" / "metrics.jsonl") !=
               slurp(out_dir / "rerun-b" / "metrics.jsonl");

  std::size_t bad_sizes = 0;
  for (std::size_t n = 1; n <= 1000; ++n) {
    const auto s = split_qa(n, kDefaultRatios, n);
    // Largest remainder in exact hundredths.
    std::array<std::size_t, 3> want{}, rem{};
    const std::array<std::size_t, 3> r{76, 10, 14};
    std::size_t used = 0;
    for (int i = 0; i < 3; ++i) {
      want[i] = n * r[i] / 100;
      rem[i] = n * r[i] % 100;
      used += want[i];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
    for (std::size_t k = 0; k < n - used; ++k) ++want[order[k]];
    bad_sizes += s.train.size() != want[0] || s.dev.size() != want[1] || s.test.size() != want[2];
  }
  std::ostringstream d;
  d << files << " metrics files re-run (1 vs 2 workers), " << differing << " differing; "
    << bad_sizes << " wrong split sizes for n in 1..1000";
  report("8 determinism", files > 0 && differing == 0 && bad_sizes == 0, d.str());
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path config = argc > 1 ? fs::path(argv[1]) : fs::path(KILAB_DESK_CONFIG);
  const fs::path out = fs::temp_directory_path() / "kilab_acceptance";
  fs::remove_all(out);
  fs::create_directories(out);
  try {
    masking_correctness();
    pmi_oracle();
    gradient_exactness();
    fisher_and_ewc();
    table_statistics();
    metric_units();
    directional(config, out);
    determinism(config, out);
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%s\n", failures == 0 ? "ALL CRITERIA PASS" : "SOME CRITERIA FAIL");
  return failures == 0 ? 0 : 1;
}
