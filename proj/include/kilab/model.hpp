#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <unordered_map>
#include <vector>

#include "kilab/tokenizer.hpp"

namespace kilab {

/// Column layout of the log-linear model:
///   [0, V)                input unigrams (distinct ids)
///   [V, V+B)              hashed input bigrams, (a*1000003 + b) mod B
///   [V+B, V+B+V+1)        previous output token; slot V is the BOS start
///   [.., +P_max+1)        position bucket min(t, P_max)
///   last                  bias
struct FeatureSpec {
  std::size_t vocab_size = 0;
  std::size_t buckets = 4096;
  std::size_t max_position = 8;

  std::size_t bigram_offset() const noexcept { return vocab_size; }
  std::size_t prev_offset() const noexcept { return vocab_size + buckets; }
  std::size_t position_offset() const noexcept { return prev_offset() + vocab_size + 1; }
  std::size_t bias_index() const noexcept { return position_offset() + max_position + 1; }
  std::size_t width() const noexcept { return bias_index() + 1; }

  std::size_t unigram_index(TokenId id) const;
  std::size_t bigram_index(TokenId a, TokenId b) const;
  std::size_t prev_index(TokenId prev) const;
  std::size_t position_index(std::size_t position) const;

  bool operator==(const FeatureSpec&) const = default;
};

struct ActiveFeature {
  std::size_t index = 0;
  double value = 1.0;

  bool operator==(const ActiveFeature&) const = default;
};

/// Sorted by index, no duplicates.
using FeatureVector = std::vector<ActiveFeature>;

FeatureVector featurize(const FeatureSpec& spec, std::span<const TokenId> input_ids,
                        TokenId prev_token, std::size_t position);

/// theta, logically |V| x D. Stored feature-major (one contiguous |V|-vector
/// per feature column) because scoring sums a handful of columns.
class ParameterMatrix {
 public:
  ParameterMatrix() = default;
  explicit ParameterMatrix(const FeatureSpec& spec);

  const FeatureSpec& spec() const noexcept { return spec_; }
  std::size_t rows() const noexcept { return spec_.vocab_size; }
  std::size_t cols() const noexcept { return spec_.width(); }

  double& at(TokenId token, std::size_t feature) {
    return data_[feature * rows() + static_cast<std::size_t>(token)];
  }
  double at(TokenId token, std::size_t feature) const {
    return data_[feature * rows() + static_cast<std::size_t>(token)];
  }
  std::span<double> column(std::size_t feature) {
    return {data_.data() + feature * rows(), rows()};
  }
  std::span<const double> column(std::size_t feature) const {
    return {data_.data() + feature * rows(), rows()};
  }
  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }

  bool all_finite() const;

  /// Binary dump: magic, header (|V|, D, B, P_max), then the raw doubles in
  /// storage order. Round trip is bit-exact.
  void save(const std::filesystem::path& path) const;
  static ParameterMatrix load(const std::filesystem::path& path);

  bool operator==(const ParameterMatrix& other) const {
    return spec_ == other.spec_ && data_ == other.data_;
  }

 private:
  FeatureSpec spec_;
  std::vector<double> data_;
};

/// Gradient restricted to the touched feature columns. Columns are kept in
/// first-touch order, so accumulation is deterministic.
class SparseGradient {
 public:
  SparseGradient() = default;
  explicit SparseGradient(std::size_t vocab_size) : vocab_(vocab_size) {}

  std::span<double> column(std::size_t feature);
  void add(std::size_t feature, std::span<const double> values, double scale = 1.0);
  void merge(const SparseGradient& other, double scale = 1.0);
  void scale(double factor);
  /// Drops all columns but keeps the allocated storage.
  void clear();

  std::size_t vocab_size() const noexcept { return vocab_; }
  const std::vector<std::size_t>& features() const noexcept { return features_; }
  std::span<const double> column_at(std::size_t slot) const {
    return {values_.data() + slot * vocab_, vocab_};
  }
  double at(TokenId token, std::size_t feature) const;
  bool empty() const noexcept { return features_.empty(); }

 private:
  std::size_t vocab_ = 0;
  std::unordered_map<std::size_t, std::size_t> slot_;
  std::vector<std::size_t> features_;
  std::vector<double> values_;
};

/// Precomputes the input-dependent part of the logits for one example.
class StepScorer {
 public:
  StepScorer(const ParameterMatrix& theta, std::span<const TokenId> input_ids);

  /// Writes log softmax(theta . phi) for the given step into `log_probs`.
  void log_probs(TokenId prev_token, std::size_t position, std::span<double> log_probs) const;

  const std::vector<std::size_t>& input_features() const noexcept { return input_features_; }

 private:
  const ParameterMatrix& theta_;
  std::vector<std::size_t> input_features_;
  std::vector<double> base_;
};

/// In-place log softmax; returns false if any logit is non-finite.
bool log_softmax(std::span<double> logits);

struct LossAndGrad {
  double loss = 0.0;
  SparseGradient grad;
};

/// Teacher-forced summed cross-entropy over the target positions and its
/// exact gradient sum_t (p_t - onehot(y_t)) (x) phi_t.
/// Throws NumericsError on non-finite scores, ConfigError on empty target.
LossAndGrad loss_and_grad(const ParameterMatrix& theta, std::span<const TokenId> input_ids,
                          std::span<const TokenId> target_ids);

/// Adds the gradient of one example into `grad` and returns its loss.
double accumulate_loss_and_grad(const ParameterMatrix& theta, std::span<const TokenId> input_ids,
                                std::span<const TokenId> target_ids, SparseGradient& grad);

/// Same loss without the gradient.
double sequence_loss(const ParameterMatrix& theta, std::span<const TokenId> input_ids,
                     std::span<const TokenId> target_ids);

/// One softmax step over an explicit feature vector.
LossAndGrad step_loss_and_grad(const ParameterMatrix& theta, const FeatureVector& features,
                               TokenId gold);

struct Prediction {
  TokenIds tokens;  // EOS-terminated unless no hypothesis finished in max_len
  double log_prob = 0.0;
  bool finished = false;

  /// Tokens without the trailing EOS.
  std::span<const TokenId> answer() const {
    return {tokens.data(), finished ? tokens.size() - 1 : tokens.size()};
  }
};

/// Beam search without length normalization. At each step all extensions
/// of the live hypotheses are ranked by (log-prob desc, token sequence asc);
/// the top `beams` survive and those ending in EOS are retired as finished.
Prediction beam_decode(const ParameterMatrix& theta, std::span<const TokenId> input_ids,
                       std::size_t beams = 5, std::size_t max_len = 16);

}  // namespace kilab
