#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "kilab/model.hpp"

namespace kilab {

struct Seq2SeqExample {
  TokenIds input;
  TokenIds target;  // EOS-terminated
};

struct EarlyStopping {
  bool enabled = true;
  std::size_t patience = 5;
  double min_delta = 1e-4;
};

struct Hyperparams {
  std::size_t pt_batch = 32;
  std::size_t ft_batch = 128;
  std::size_t max_epochs = 100;
  double learning_rate = 0.1;
  EarlyStopping early_stop;

  void validate() const;
  bool operator==(const Hyperparams& o) const {
    return pt_batch == o.pt_batch && ft_batch == o.ft_batch && max_epochs == o.max_epochs &&
           learning_rate == o.learning_rate && early_stop.enabled == o.early_stop.enabled &&
           early_stop.patience == o.early_stop.patience &&
           early_stop.min_delta == o.early_stop.min_delta;
  }
};

using ExampleSet = std::shared_ptr<const std::vector<Seq2SeqExample>>;

enum class TaskKind { infusion, qa };

/// One training task. `examples(epoch)` may return a fresh corruption per
/// epoch. `dev_score` (higher is better) drives early stopping; when empty
/// the task trains for max_epochs.
struct TaskData {
  std::function<ExampleSet(std::size_t epoch)> examples;
  std::function<double(const ParameterMatrix&)> dev_score;
};

TaskData fixed_task(std::vector<Seq2SeqExample> examples,
                    std::function<double(const ParameterMatrix&)> dev_score = {});

/// anchor = theta*_KI, fisher = F (same shape as theta), lambda = strength.
struct EwcState {
  EwcState(ParameterMatrix anchor, ParameterMatrix fisher, double lambda);

  ParameterMatrix anchor;
  ParameterMatrix fisher;
  double lambda = 1000.0;
  std::vector<std::size_t> support;  // flat indices with F > 0
};

/// sum_i (lambda / 2) F_i (theta_i - anchor_i)^2.
double ewc_penalty(const ParameterMatrix& theta, const EwcState& state);
/// lambda F (theta - anchor), dense.
ParameterMatrix ewc_penalty_grad(const ParameterMatrix& theta, const EwcState& state);

/// Exact minimizer of 0.5/lr ||x - theta||^2 + penalty(x), applied
/// coordinatewise: x_i = (theta_i + lr lambda F_i a_i) / (1 + lr lambda F_i).
void ewc_proximal_step(ParameterMatrix& theta, const EwcState& state, double learning_rate);

/// (1/N) sum_i g_i (.) g_i for the given per-sample log-likelihood gradients.
ParameterMatrix fisher_from_gradients(const FeatureSpec& spec,
                                      std::span<const SparseGradient> gradients);

/// Empirical Fisher diagonal at theta from up to `n` samples drawn without
/// replacement (all samples, in order, when n >= samples.size()).
ParameterMatrix fisher_diagonal(const ParameterMatrix& theta,
                                std::span<const Seq2SeqExample> samples, std::size_t n,
                                std::uint64_t seed);

struct TrainResult {
  ParameterMatrix theta;
  std::size_t epochs_ran = 0;
  bool stopped_early = false;
  std::size_t best_epoch = 0;  // 0 = the initial parameters
  double best_dev = 0.0;
};

/// Minibatch SGD on the mean per-example loss of each batch, plus the EWC
/// penalty when `ewc` is given. Epoch order is shuffled with a stream derived
/// from `seed`. With early stopping the best-dev checkpoint is returned.
TrainResult train_task(const ParameterMatrix& theta0, const TaskData& task,
                       const Hyperparams& hyper, TaskKind kind, const EwcState* ewc,
                       std::uint64_t seed);

struct MtlStep {
  TaskKind task = TaskKind::infusion;
  std::size_t batch = 0;
  std::size_t cycle = 0;  // > 0 when the smaller task restarts

  bool operator==(const MtlStep&) const = default;
};

/// Strict alternation starting with infusion over 2 * max(a, b) steps; the
/// task with fewer batches cycles (and is reshuffled on every restart).
std::vector<MtlStep> mtl_schedule(std::size_t infusion_batches, std::size_t qa_batches);

/// Multi-task training on shared parameters; early stopping on QA dev.
TrainResult mtl_train(const ParameterMatrix& theta0, const TaskData& infusion,
                      const TaskData& qa, const Hyperparams& hyper, std::uint64_t seed);

enum class Regime { ft, pt_ft, pt_ft_ewc, mtl, mtl_ft };

std::string_view to_string(Regime r);
Regime parse_regime(std::string_view name);
bool needs_infusion(Regime r);

struct RegimeInputs {
  FeatureSpec spec;
  TaskData qa;
  std::optional<TaskData> infusion;
  std::vector<Seq2SeqExample> fisher_samples;
  std::size_t fisher_n = 1000;
  double ewc_lambda = 1000.0;
  /// Optional memo of the infusion-only (PT) or MTL stage, shared between
  /// regimes that start with the same stage under the same seed.
  std::optional<TrainResult>* pt_cache = nullptr;
  std::optional<TrainResult>* mtl_cache = nullptr;
};

struct RegimeOutcome {
  ParameterMatrix theta;
  std::size_t epochs_ran = 0;  // summed over stages
  bool stopped_early = false;  // of the final stage
};

RegimeOutcome run_regime(Regime regime, const RegimeInputs& inputs, const Hyperparams& hyper,
                         std::uint64_t seed);

}  // namespace kilab
