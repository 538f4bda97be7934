#include "kilab/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "kilab/errors.hpp"

namespace kilab {

namespace {

std::vector<std::string> normalized_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in(normalize_answer(text));
  std::string tok;
  while (in >> tok) {
    out.push_back(tok);
  }
  return out;
}

double f1_single(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  if (pred.empty() && gold.empty()) {
    return 1.0;
  }
  if (pred.empty() || gold.empty()) {
    return 0.0;
  }
  std::map<std::string, int> counts;
  for (const auto& t : gold) {
    ++counts[t];
  }
  int overlap = 0;
  for (const auto& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) {
    return 0.0;
  }
  const double p = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(gold.size());
  return 2.0 * p * r / (p + r);
}

void require_golds(std::span<const std::string> golds) {
  if (golds.empty()) {
    throw ConfigError("at least one gold answer is required", "answers");
  }
}

double round1(double x) { return std::round(x * 10.0) / 10.0; }

}  // namespace

std::string normalize_answer(std::string_view text) {
  std::string lowered;
  lowered.reserve(text.size());
  for (const char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::ispunct(u)) {
      continue;
    }
    lowered.push_back(static_cast<char>(std::tolower(u)));
  }
  std::istringstream in(lowered);
  std::string tok;
  std::string out;
  while (in >> tok) {
    if (tok == "a" || tok == "an" || tok == "the") {
      continue;
    }
    if (!out.empty()) {
      out.push_back(' ');
    }
    out += tok;
  }
  return out;
}

int exact_match(std::string_view prediction, std::span<const std::string> golds) {
  require_golds(golds);
  const auto p = normalize_answer(prediction);
  for (const auto& g : golds) {
    if (normalize_answer(g) == p) {
      return 1;
    }
  }
  return 0;
}

double token_f1(std::string_view prediction, std::span<const std::string> golds) {
  require_golds(golds);
  const auto p = normalized_tokens(prediction);
  double best = 0.0;
  for (const auto& g : golds) {
    best = std::max(best, f1_single(p, normalized_tokens(g)));
  }
  return best;
}

EvalReport score_answers(std::span<const std::string> predictions,
                         std::span<const std::vector<std::string>> golds) {
  if (predictions.size() != golds.size()) {
    throw ShapeError("prediction and gold counts differ");
  }
  EvalReport report;
  report.items.reserve(predictions.size());
  double em = 0.0;
  double f1 = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    ScoredAnswer item{predictions[i], golds[i], exact_match(predictions[i], golds[i]),
                      token_f1(predictions[i], golds[i])};
    em += item.em;
    f1 += item.f1;
    report.items.push_back(std::move(item));
  }
  if (!predictions.empty()) {
    const auto n = static_cast<double>(predictions.size());
    report.em_mean = 100.0 * em / n;
    report.f1_mean = 100.0 * f1 / n;
  }
  return report;
}

RunStatistics aggregate_runs(std::span<const double> scores) {
  if (scores.empty()) {
    throw ConfigError("cannot aggregate zero runs", "seeds");
  }
  RunStatistics s;
  s.scores.assign(scores.begin(), scores.end());
  // Sum in sorted order so permutations agree bit for bit.
  std::vector<double> sorted = s.scores;
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());
  s.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / n;
  if (sorted.size() == 1) {
    s.warned = true;
    return s;
  }
  double ss = 0.0;
  for (const double x : sorted) {
    ss += (x - s.mean) * (x - s.mean);
  }
  s.std = std::sqrt(ss / (n - 1.0));
  return s;
}

double relative_gain(double method_mean, double baseline_mean) {
  if (!(baseline_mean > 0.0)) {
    throw ConfigError("baseline mean must be positive", "baseline");
  }
  return round1(100.0 * (method_mean - baseline_mean) / baseline_mean);
}

double variance_reduction(double method_std, double reference_std) {
  if (reference_std == 0.0) {
    throw ConfigError("reference std must be non-zero", "reference_std");
  }
  return round1(100.0 * (1.0 - (method_std * method_std) / (reference_std * reference_std)));
}

std::string format_mean_std(const RunStatistics& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f\xC2\xB1%.2f", s.mean, s.std);
  return buf;
}

std::vector<TableRow> build_table(std::vector<TableRow> rows, std::string_view baseline) {
  const auto base = std::find_if(rows.begin(), rows.end(),
                                 [&](const TableRow& r) { return r.label == baseline; });
  if (base == rows.end() || !(base->em.mean > 0.0)) {
    for (auto& r : rows) {
      r.gain.reset();
    }
    return rows;
  }
  const double b = base->em.mean;
  for (auto& r : rows) {
    if (r.label == baseline) {
      r.gain.reset();
    } else {
      r.gain = relative_gain(r.em.mean, b);
    }
  }
  return rows;
}

std::string render_markdown(std::span<const TableRow> rows) {
  std::ostringstream out;
  out << "| | EM | F1 | Gain |\n|---|---|---|---|\n";
  for (const auto& r : rows) {
    out << "| " << r.label << " | " << format_mean_std(r.em) << " | " << format_mean_std(r.f1)
        << " | ";
    if (r.gain) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.1f%%", *r.gain);
      out << buf;
    } else {
      out << "-";
    }
    out << " |\n";
  }
  return out.str();
}

}  // namespace kilab
