#include "kilab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>

#include "kilab/errors.hpp"
#include "kilab/jsonl.hpp"

namespace kilab {

namespace {

constexpr char kMagic[8] = {'K', 'I', 'L', 'A', 'B', 'C', 'K', '1'};

void check_id(const FeatureSpec& spec, TokenId id) {
  if (id < 0 || static_cast<std::size_t>(id) >= spec.vocab_size) {
    throw IdError("token id " + std::to_string(id) + " outside the model vocabulary");
  }
}

}  // namespace

std::size_t FeatureSpec::unigram_index(TokenId id) const {
  check_id(*this, id);
  return static_cast<std::size_t>(id);
}

std::size_t FeatureSpec::bigram_index(TokenId a, TokenId b) const {
  check_id(*this, a);
  check_id(*this, b);
  const auto h = (static_cast<std::uint64_t>(a) * 1000003ULL + static_cast<std::uint64_t>(b)) %
                 static_cast<std::uint64_t>(buckets);
  return bigram_offset() + static_cast<std::size_t>(h);
}

std::size_t FeatureSpec::prev_index(TokenId prev) const {
  if (prev == special::bos) {
    return prev_offset() + vocab_size;
  }
  check_id(*this, prev);
  return prev_offset() + static_cast<std::size_t>(prev);
}

std::size_t FeatureSpec::position_index(std::size_t position) const {
  return position_offset() + std::min(position, max_position);
}

FeatureVector featurize(const FeatureSpec& spec, std::span<const TokenId> input_ids,
                        TokenId prev_token, std::size_t position) {
  std::vector<std::size_t> idx;
  idx.reserve(2 * input_ids.size() + 3);
  for (std::size_t i = 0; i < input_ids.size(); ++i) {
    idx.push_back(spec.unigram_index(input_ids[i]));
    if (i + 1 < input_ids.size()) {
      idx.push_back(spec.bigram_index(input_ids[i], input_ids[i + 1]));
    }
  }
  idx.push_back(spec.prev_index(prev_token));
  idx.push_back(spec.position_index(position));
  idx.push_back(spec.bias_index());
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  FeatureVector out;
  out.reserve(idx.size());
  for (const auto i : idx) {
    out.push_back({i, 1.0});
  }
  return out;
}

// ---------------------------------------------------------------------------

ParameterMatrix::ParameterMatrix(const FeatureSpec& spec)
    : spec_(spec), data_(spec.vocab_size * spec.width(), 0.0) {
  if (spec.vocab_size == 0 || spec.buckets == 0) {
    throw ShapeError("model needs a non-empty vocabulary and at least one bigram bucket");
  }
}

bool ParameterMatrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

void ParameterMatrix::save(const std::filesystem::path& path) const {
  std::string buf;
  const std::uint64_t header[4] = {spec_.vocab_size, spec_.width(), spec_.buckets,
                                   spec_.max_position};
  buf.append(kMagic, sizeof kMagic);
  buf.append(reinterpret_cast<const char*>(header), sizeof header);
  buf.append(reinterpret_cast<const char*>(data_.data()), data_.size() * sizeof(double));
  write_file_atomic(path, buf);
}

ParameterMatrix ParameterMatrix::load(const std::filesystem::path& path) {
  const auto buf = read_text_file(path);
  std::uint64_t header[4];
  if (buf.size() < sizeof kMagic + sizeof header ||
      std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) {
    throw ParseError(1, "not a model checkpoint: " + path.string());
  }
  std::memcpy(header, buf.data() + sizeof kMagic, sizeof header);
  FeatureSpec spec{header[0], header[2], header[3]};
  if (spec.width() != header[1]) {
    throw ParseError(1, "checkpoint header is inconsistent");
  }
  ParameterMatrix theta(spec);
  const std::size_t bytes = theta.data_.size() * sizeof(double);
  if (buf.size() != sizeof kMagic + sizeof header + bytes) {
    throw ParseError(1, "checkpoint size does not match header");
  }
  std::memcpy(theta.data_.data(), buf.data() + sizeof kMagic + sizeof header, bytes);
  return theta;
}

// ---------------------------------------------------------------------------

std::span<double> SparseGradient::column(std::size_t feature) {
  auto [it, inserted] = slot_.try_emplace(feature, features_.size());
  if (inserted) {
    features_.push_back(feature);
    values_.resize(values_.size() + vocab_, 0.0);
  }
  return {values_.data() + it->second * vocab_, vocab_};
}

void SparseGradient::add(std::size_t feature, std::span<const double> values, double scale) {
  auto col = column(feature);
  for (std::size_t v = 0; v < vocab_; ++v) {
    col[v] += scale * values[v];
  }
}

void SparseGradient::merge(const SparseGradient& other, double scale) {
  if (vocab_ == 0) {
    vocab_ = other.vocab_;
  }
  if (other.vocab_ != vocab_) {
    throw ShapeError("gradient vocabulary sizes differ");
  }
  for (std::size_t s = 0; s < other.features_.size(); ++s) {
    add(other.features_[s], other.column_at(s), scale);
  }
}

void SparseGradient::clear() {
  slot_.clear();
  features_.clear();
  values_.clear();
}

void SparseGradient::scale(double factor) {
  for (auto& v : values_) {
    v *= factor;
  }
}

double SparseGradient::at(TokenId token, std::size_t feature) const {
  const auto it = slot_.find(feature);
  if (it == slot_.end()) {
    return 0.0;
  }
  return values_[it->second * vocab_ + static_cast<std::size_t>(token)];
}

// ---------------------------------------------------------------------------

bool log_softmax(std::span<double> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (const double x : logits) {
    if (!std::isfinite(x)) {
      return false;
    }
    mx = std::max(mx, x);
  }
  double sum = 0.0;
  for (const double x : logits) {
    sum += std::exp(x - mx);
  }
  const double lse = mx + std::log(sum);
  for (auto& x : logits) {
    x -= lse;
  }
  return true;
}

StepScorer::StepScorer(const ParameterMatrix& theta, std::span<const TokenId> input_ids)
    : theta_(theta), base_(theta.rows(), 0.0) {
  const auto& spec = theta.spec();
  for (std::size_t i = 0; i < input_ids.size(); ++i) {
    input_features_.push_back(spec.unigram_index(input_ids[i]));
    if (i + 1 < input_ids.size()) {
      input_features_.push_back(spec.bigram_index(input_ids[i], input_ids[i + 1]));
    }
  }
  std::sort(input_features_.begin(), input_features_.end());
  input_features_.erase(std::unique(input_features_.begin(), input_features_.end()),
                        input_features_.end());
  for (const auto f : input_features_) {
    const auto col = theta.column(f);
    for (std::size_t v = 0; v < base_.size(); ++v) {
      base_[v] += col[v];
    }
  }
}

void StepScorer::log_probs(TokenId prev_token, std::size_t position,
                           std::span<double> out) const {
  const auto& spec = theta_.spec();
  const auto prev = theta_.column(spec.prev_index(prev_token));
  const auto pos = theta_.column(spec.position_index(position));
  const auto bias = theta_.column(spec.bias_index());
  for (std::size_t v = 0; v < base_.size(); ++v) {
    out[v] = base_[v] + prev[v] + pos[v] + bias[v];
  }
  if (!log_softmax(out)) {
    throw NumericsError("non-finite model score");
  }
}

double accumulate_loss_and_grad(const ParameterMatrix& theta, std::span<const TokenId> input_ids,
                                std::span<const TokenId> target_ids, SparseGradient& grad) {
  if (target_ids.empty()) {
    throw ConfigError("loss_and_grad needs a non-empty target", "target_ids");
  }
  const auto& spec = theta.spec();
  const std::size_t V = theta.rows();
  if (grad.vocab_size() != V) {
    throw ShapeError("gradient vocabulary size does not match the model");
  }
  StepScorer scorer(theta, input_ids);
  thread_local std::vector<double> lp, input_delta;
  lp.assign(V, 0.0);
  input_delta.assign(V, 0.0);
  double loss = 0.0;
  for (std::size_t t = 0; t < target_ids.size(); ++t) {
    const TokenId prev = t == 0 ? special::bos : target_ids[t - 1];
    const TokenId gold = target_ids[t];
    check_id(spec, gold);
    scorer.log_probs(prev, t, lp);
    loss -= lp[static_cast<std::size_t>(gold)];
    for (auto& x : lp) {
      x = std::exp(x);
    }
    lp[static_cast<std::size_t>(gold)] -= 1.0;
    for (std::size_t v = 0; v < V; ++v) {
      input_delta[v] += lp[v];
    }
    grad.add(spec.prev_index(prev), lp);
    grad.add(spec.position_index(t), lp);
    grad.add(spec.bias_index(), lp);
  }
  for (const auto f : scorer.input_features()) {
    grad.add(f, input_delta);
  }
  if (!std::isfinite(loss)) {
    throw NumericsError("non-finite loss");
  }
  return loss;
}

LossAndGrad loss_and_grad(const ParameterMatrix& theta, std::span<const TokenId> input_ids,
                          std::span<const TokenId> target_ids) {
  LossAndGrad out{0.0, SparseGradient(theta.rows())};
  out.loss = accumulate_loss_and_grad(theta, input_ids, target_ids, out.grad);
  return out;
}

double sequence_loss(const ParameterMatrix& theta, std::span<const TokenId> input_ids,
                     std::span<const TokenId> target_ids) {
  if (target_ids.empty()) {
    throw ConfigError("sequence_loss needs a non-empty target", "target_ids");
  }
  StepScorer scorer(theta, input_ids);
  std::vector<double> lp(theta.rows());
  double loss = 0.0;
  for (std::size_t t = 0; t < target_ids.size(); ++t) {
    check_id(theta.spec(), target_ids[t]);
    scorer.log_probs(t == 0 ? special::bos : target_ids[t - 1], t, lp);
    loss -= lp[static_cast<std::size_t>(target_ids[t])];
  }
  return loss;
}

LossAndGrad step_loss_and_grad(const ParameterMatrix& theta, const FeatureVector& features,
                               TokenId gold) {
  check_id(theta.spec(), gold);
  const std::size_t V = theta.rows();
  std::vector<double> lp(V, 0.0);
  for (const auto& f : features) {
    const auto col = theta.column(f.index);
    for (std::size_t v = 0; v < V; ++v) {
      lp[v] += f.value * col[v];
    }
  }
  if (!log_softmax(lp)) {
    throw NumericsError("non-finite model score");
  }
  LossAndGrad out{-lp[static_cast<std::size_t>(gold)], SparseGradient(V)};
  for (auto& x : lp) {
    x = std::exp(x);
  }
  lp[static_cast<std::size_t>(gold)] -= 1.0;
  for (const auto& f : features) {
    out.grad.add(f.index, lp, f.value);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct Hypothesis {
  TokenIds tokens;
  double log_prob = 0.0;
};

bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.log_prob != b.log_prob) {
    return a.log_prob > b.log_prob;
  }
  return a.tokens < b.tokens;
}

}  // namespace

Prediction beam_decode(const ParameterMatrix& theta, std::span<const TokenId> input_ids,
                       std::size_t beams, std::size_t max_len) {
  if (beams == 0) {
    throw ConfigError("beam search needs at least one beam", "beams");
  }
  if (max_len == 0) {
    return {};
  }
  const std::size_t V = theta.rows();
  StepScorer scorer(theta, input_ids);
  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> finished;
  std::vector<double> lp(V);

  struct Candidate {
    std::size_t parent;
    TokenId token;
    double log_prob;
  };
  std::vector<Candidate> cands;

  for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
    cands.clear();
    for (std::size_t h = 0; h < live.size(); ++h) {
      const TokenId prev = live[h].tokens.empty() ? special::bos : live[h].tokens.back();
      scorer.log_probs(prev, step, lp);
      for (std::size_t v = 0; v < V; ++v) {
        cands.push_back({h, static_cast<TokenId>(v), live[h].log_prob + lp[v]});
      }
    }
    // live is sorted by `better`, so (parent, token) order is the
    // lexicographic order of the extended sequences among equal scores.
    auto cand_better = [&](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      const auto& ta = live[a.parent].tokens;
      const auto& tb = live[b.parent].tokens;
      if (ta != tb) return ta < tb;
      return a.token < b.token;
    };
    const std::size_t keep = std::min(beams, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep),
                      cands.end(), cand_better);
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Hypothesis h{live[cands[i].parent].tokens, cands[i].log_prob};
      h.tokens.push_back(cands[i].token);
      if (cands[i].token == special::eos) {
        finished.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
    if (!finished.empty() && !live.empty()) {
      const auto best_done = std::min_element(finished.begin(), finished.end(), better);
      // Scores only decrease with length, so no live hypothesis can win.
      if (best_done->log_prob > live.front().log_prob) {
        break;
      }
    }
  }

  Prediction out;
  if (!finished.empty()) {
    const auto best = std::min_element(finished.begin(), finished.end(), better);
    out.tokens = best->tokens;
    out.log_prob = best->log_prob;
    out.finished = true;
  } else if (!live.empty()) {
    const auto best = std::min_element(live.begin(), live.end(), better);
    out.tokens = best->tokens;
    out.log_prob = best->log_prob;
  }
  return out;
}

}  // namespace kilab
