#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kilab {

/// Lowercase, strip ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace.
std::string normalize_answer(std::string_view text);

int exact_match(std::string_view prediction, std::span<const std::string> golds);
double token_f1(std::string_view prediction, std::span<const std::string> golds);

struct ScoredAnswer {
  std::string prediction;
  std::vector<std::string> golds;
  int em = 0;
  double f1 = 0.0;
};

struct EvalReport {
  std::vector<ScoredAnswer> items;
  double em_mean = 0.0;  // percent
  double f1_mean = 0.0;  // percent
};

/// Scores predictions[i] against golds[i]. Empty input gives zero means.
EvalReport score_answers(std::span<const std::string> predictions,
                         std::span<const std::vector<std::string>> golds);

struct RunStatistics {
  std::vector<double> scores;
  double mean = 0.0;
  double std = 0.0;  // sample (n - 1)
  bool warned = false;  // n == 1
};

RunStatistics aggregate_runs(std::span<const double> scores);

/// Percent change of the method over the baseline, one decimal.
double relative_gain(double method_mean, double baseline_mean);
/// 100 (1 - s^2 / r^2), one decimal.
double variance_reduction(double method_std, double reference_std);

struct TableRow {
  std::string label;
  RunStatistics em;
  RunStatistics f1;
  std::optional<double> gain;  // relative to the baseline row
};

/// "51.22±0.55"
std::string format_mean_std(const RunStatistics& s);

/// Rows in the given order; `baseline` names the row gains are taken from
/// (no gain column values when empty or absent).
std::vector<TableRow> build_table(std::vector<TableRow> rows, std::string_view baseline);
std::string render_markdown(std::span<const TableRow> rows);

}  // namespace kilab
