#include "kilab/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "kilab/errors.hpp"
#include "kilab/rng.hpp"

namespace kilab {

namespace {

void check_same_shape(const ParameterMatrix& a, const ParameterMatrix& b) {
  if (!(a.spec() == b.spec())) {
    throw ShapeError("parameter shapes do not match");
  }
}

/// One SGD step on the mean loss of examples[order[begin..end)].
void sgd_batch(ParameterMatrix& theta, std::span<const Seq2SeqExample> examples,
               std::span<const std::size_t> batch, double learning_rate, const EwcState* ewc) {
  thread_local SparseGradient acc;
  if (acc.vocab_size() != theta.rows()) {
    acc = SparseGradient(theta.rows());
  }
  acc.clear();
  for (const auto idx : batch) {
    const auto& ex = examples[idx];
    accumulate_loss_and_grad(theta, ex.input, ex.target, acc);
  }
  const double step = learning_rate / static_cast<double>(batch.size());
  for (std::size_t s = 0; s < acc.features().size(); ++s) {
    auto col = theta.column(acc.features()[s]);
    const auto g = acc.column_at(s);
    for (std::size_t v = 0; v < col.size(); ++v) {
      col[v] -= step * g[v];
    }
  }
  if (ewc != nullptr) {
    ewc_proximal_step(theta, *ewc, learning_rate);
  }
}

std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

std::size_t batch_count(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

std::span<const std::size_t> batch_slice(const std::vector<std::size_t>& order, std::size_t b,
                                         std::size_t batch_size) {
  const std::size_t lo = b * batch_size;
  const std::size_t hi = std::min(order.size(), lo + batch_size);
  return std::span<const std::size_t>(order).subspan(lo, hi - lo);
}

/// Tracks the best dev score and its checkpoint.
class EarlyStopper {
 public:
  EarlyStopper(const Hyperparams& hyper, const std::function<double(const ParameterMatrix&)>& dev,
               const ParameterMatrix& theta0)
      : cfg_(hyper.early_stop), dev_(dev), active_(cfg_.enabled && static_cast<bool>(dev)) {
    if (active_) {
      best_ = dev_(theta0);
      if (!std::isfinite(best_)) {
        throw NumericsError("non-finite dev score");
      }
      best_theta_ = theta0;
    }
  }

  /// Returns true when training should stop.
  bool after_epoch(std::size_t epoch, const ParameterMatrix& theta) {
    if (!active_) {
      return false;
    }
    const double score = dev_(theta);
    if (!std::isfinite(score)) {
      throw NumericsError("non-finite dev score");
    }
    if (score > best_ + cfg_.min_delta) {
      best_ = score;
      best_epoch_ = epoch;
      best_theta_ = theta;
      since_ = 0;
      return false;
    }
    return ++since_ >= cfg_.patience;
  }

  void finish(TrainResult& result, ParameterMatrix&& last) {
    if (active_) {
      result.theta = std::move(best_theta_);
      result.best_epoch = best_epoch_;
      result.best_dev = best_;
    } else {
      result.theta = std::move(last);
      result.best_epoch = result.epochs_ran;
    }
  }

 private:
  EarlyStopping cfg_;
  const std::function<double(const ParameterMatrix&)>& dev_;
  bool active_;
  double best_ = 0.0;
  std::size_t best_epoch_ = 0;
  std::size_t since_ = 0;
  ParameterMatrix best_theta_;
};

}  // namespace

void Hyperparams::validate() const {
  if (pt_batch < 1 || ft_batch < 1) {
    throw ConfigError("batch sizes must be at least 1", "batch");
  }
  if (max_epochs < 1) {
    throw ConfigError("max_epochs must be at least 1", "max_epochs");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be positive", "learning_rate");
  }
}

TaskData fixed_task(std::vector<Seq2SeqExample> examples,
                    std::function<double(const ParameterMatrix&)> dev_score) {
  auto shared = std::make_shared<const std::vector<Seq2SeqExample>>(std::move(examples));
  return TaskData{[shared](std::size_t) { return shared; }, std::move(dev_score)};
}

// ---------------------------------------------------------------------------

EwcState::EwcState(ParameterMatrix anchor_, ParameterMatrix fisher_, double lambda_)
    : anchor(std::move(anchor_)), fisher(std::move(fisher_)), lambda(lambda_) {
  check_same_shape(anchor, fisher);
  if (!(lambda >= 0.0)) {
    throw ConfigError("EWC lambda must be non-negative", "ewc_lambda");
  }
  const auto f = fisher.flat();
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f[i] < 0.0 || !std::isfinite(f[i])) {
      throw NumericsError("Fisher diagonal must be finite and non-negative");
    }
    if (f[i] > 0.0) {
      support.push_back(i);
    }
  }
}

double ewc_penalty(const ParameterMatrix& theta, const EwcState& state) {
  check_same_shape(theta, state.anchor);
  const auto t = theta.flat();
  const auto a = state.anchor.flat();
  const auto f = state.fisher.flat();
  double sum = 0.0;
  for (const auto i : state.support) {
    const double d = t[i] - a[i];
    sum += f[i] * d * d;
  }
  return 0.5 * state.lambda * sum;
}

ParameterMatrix ewc_penalty_grad(const ParameterMatrix& theta, const EwcState& state) {
  check_same_shape(theta, state.anchor);
  ParameterMatrix g(theta.spec());
  const auto t = theta.flat();
  const auto a = state.anchor.flat();
  const auto f = state.fisher.flat();
  auto out = g.flat();
  for (const auto i : state.support) {
    out[i] = state.lambda * f[i] * (t[i] - a[i]);
  }
  return g;
}

void ewc_proximal_step(ParameterMatrix& theta, const EwcState& state, double learning_rate) {
  check_same_shape(theta, state.anchor);
  auto t = theta.flat();
  const auto a = state.anchor.flat();
  const auto f = state.fisher.flat();
  const double c = learning_rate * state.lambda;
  for (const auto i : state.support) {
    const double k = c * f[i];
    t[i] = (t[i] + k * a[i]) / (1.0 + k);
  }
}

ParameterMatrix fisher_from_gradients(const FeatureSpec& spec,
                                      std::span<const SparseGradient> gradients) {
  if (gradients.empty()) {
    throw EmptyDataset("Fisher estimation needs at least one sample");
  }
  ParameterMatrix fisher(spec);
  for (const auto& g : gradients) {
    for (std::size_t s = 0; s < g.features().size(); ++s) {
      auto col = fisher.column(g.features()[s]);
      const auto v = g.column_at(s);
      for (std::size_t r = 0; r < col.size(); ++r) {
        col[r] += v[r] * v[r];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(gradients.size());
  for (auto& x : fisher.flat()) {
    x *= inv;
  }
  return fisher;
}

ParameterMatrix fisher_diagonal(const ParameterMatrix& theta,
                                std::span<const Seq2SeqExample> samples, std::size_t n,
                                std::uint64_t seed) {
  if (samples.empty() || n == 0) {
    throw EmptyDataset("Fisher estimation needs at least one sample");
  }
  std::vector<std::size_t> chosen(samples.size());
  std::iota(chosen.begin(), chosen.end(), std::size_t{0});
  if (n < samples.size()) {
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
      std::swap(chosen[i], chosen[i + static_cast<std::size_t>(rng.below(samples.size() - i))]);
    }
    chosen.resize(n);
  }
  std::vector<SparseGradient> grads;
  grads.reserve(chosen.size());
  for (const auto i : chosen) {
    // The log-likelihood gradient is the negated loss gradient; the sign
    // vanishes in the square.
    grads.push_back(loss_and_grad(theta, samples[i].input, samples[i].target).grad);
  }
  return fisher_from_gradients(theta.spec(), grads);
}

// ---------------------------------------------------------------------------

TrainResult train_task(const ParameterMatrix& theta0, const TaskData& task,
                       const Hyperparams& hyper, TaskKind kind, const EwcState* ewc,
                       std::uint64_t seed) {
  hyper.validate();
  if (!task.examples) {
    throw EmptyDataset("task has no data source");
  }
  auto examples = task.examples(0);
  if (!examples || examples->empty()) {
    throw EmptyDataset("training dataset is empty");
  }
  if (ewc != nullptr) {
    check_same_shape(theta0, ewc->anchor);
  }
  const std::size_t batch = kind == TaskKind::infusion ? hyper.pt_batch : hyper.ft_batch;

  TrainResult result;
  ParameterMatrix theta = theta0;
  EarlyStopper stopper(hyper, task.dev_score, theta0);
  for (std::size_t epoch = 1; epoch <= hyper.max_epochs; ++epoch) {
    if (epoch > 1) {
      examples = task.examples(epoch - 1);
      if (!examples || examples->empty()) {
        throw EmptyDataset("training dataset is empty");
      }
    }
    const auto order = shuffled_order(examples->size(), derive_seed(seed, "epoch", {epoch}));
    for (std::size_t b = 0; b < batch_count(order.size(), batch); ++b) {
      sgd_batch(theta, *examples, batch_slice(order, b, batch), hyper.learning_rate, ewc);
    }
    result.epochs_ran = epoch;
    if (stopper.after_epoch(epoch, theta)) {
      result.stopped_early = true;
      break;
    }
  }
  stopper.finish(result, std::move(theta));
  return result;
}

std::vector<MtlStep> mtl_schedule(std::size_t infusion_batches, std::size_t qa_batches) {
  std::vector<MtlStep> steps;
  if (infusion_batches == 0 || qa_batches == 0) {
    return steps;
  }
  const std::size_t rounds = std::max(infusion_batches, qa_batches);
  steps.reserve(2 * rounds);
  for (std::size_t i = 0; i < rounds; ++i) {
    steps.push_back({TaskKind::infusion, i % infusion_batches, i / infusion_batches});
    steps.push_back({TaskKind::qa, i % qa_batches, i / qa_batches});
  }
  return steps;
}

TrainResult mtl_train(const ParameterMatrix& theta0, const TaskData& infusion,
                      const TaskData& qa, const Hyperparams& hyper, std::uint64_t seed) {
  hyper.validate();
  if (!infusion.examples || !qa.examples) {
    throw EmptyDataset("multi-task training needs both tasks");
  }
  auto ki = infusion.examples(0);
  auto qa_ex = qa.examples(0);
  const auto empty = [](const ExampleSet& e) { return !e || e->empty(); };
  if (empty(ki) || empty(qa_ex)) {
    throw EmptyDataset("multi-task training needs two non-empty datasets");
  }

  TrainResult result;
  ParameterMatrix theta = theta0;
  EarlyStopper stopper(hyper, qa.dev_score, theta0);
  for (std::size_t epoch = 1; epoch <= hyper.max_epochs; ++epoch) {
    if (epoch > 1) {
      ki = infusion.examples(epoch - 1);
      qa_ex = qa.examples(epoch - 1);
      if (empty(ki) || empty(qa_ex)) {
        throw EmptyDataset("multi-task training needs two non-empty datasets");
      }
    }
    const std::size_t a = batch_count(ki->size(), hyper.pt_batch);
    const std::size_t b = batch_count(qa_ex->size(), hyper.ft_batch);
    std::map<std::pair<int, std::size_t>, std::vector<std::size_t>> orders;
    auto order_for = [&](TaskKind task, std::size_t cycle) -> const std::vector<std::size_t>& {
      const int t = task == TaskKind::infusion ? 0 : 1;
      auto it = orders.find({t, cycle});
      if (it == orders.end()) {
        const std::size_t n = task == TaskKind::infusion ? ki->size() : qa_ex->size();
        it = orders
                 .emplace(std::make_pair(t, cycle),
                          shuffled_order(n, derive_seed(seed, "mtl-epoch",
                                                        {epoch, static_cast<std::uint64_t>(t),
                                                         cycle})))
                 .first;
      }
      return it->second;
    };
    for (const auto& step : mtl_schedule(a, b)) {
      const bool is_ki = step.task == TaskKind::infusion;
      const auto& order = order_for(step.task, step.cycle);
      sgd_batch(theta, is_ki ? *ki : *qa_ex,
                batch_slice(order, step.batch, is_ki ? hyper.pt_batch : hyper.ft_batch),
                hyper.learning_rate, nullptr);
    }
    result.epochs_ran = epoch;
    if (stopper.after_epoch(epoch, theta)) {
      result.stopped_early = true;
      break;
    }
  }
  stopper.finish(result, std::move(theta));
  return result;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::ft: return "ft";
    case Regime::pt_ft: return "pt-ft";
    case Regime::pt_ft_ewc: return "pt-ft-ewc";
    case Regime::mtl: return "mtl";
    case Regime::mtl_ft: return "mtl-ft";
  }
  return "ft";
}

Regime parse_regime(std::string_view name) {
  if (name == "ft") return Regime::ft;
  if (name == "pt-ft") return Regime::pt_ft;
  if (name == "pt-ft-ewc") return Regime::pt_ft_ewc;
  if (name == "mtl") return Regime::mtl;
  if (name == "mtl-ft") return Regime::mtl_ft;
  throw ConfigError("unknown training regime: " + std::string(name), "regime");
}

bool needs_infusion(Regime r) { return r != Regime::ft; }

RegimeOutcome run_regime(Regime regime, const RegimeInputs& inputs, const Hyperparams& hyper,
                         std::uint64_t seed) {
  if (needs_infusion(regime) && !inputs.infusion) {
    throw ConfigError("regime " + std::string(to_string(regime)) +
                          " needs a masked infusion dataset",
                      "strategy");
  }
  const ParameterMatrix zero(inputs.spec);
  RegimeOutcome out;

  auto pretrain = [&]() -> TrainResult {
    if (inputs.pt_cache != nullptr && inputs.pt_cache->has_value()) {
      return **inputs.pt_cache;
    }
    auto r = train_task(zero, *inputs.infusion, hyper, TaskKind::infusion, nullptr,
                        derive_seed(seed, "train", {0}));
    if (inputs.pt_cache != nullptr) {
      *inputs.pt_cache = r;
    }
    return r;
  };
  auto multitask = [&]() -> TrainResult {
    if (inputs.mtl_cache != nullptr && inputs.mtl_cache->has_value()) {
      return **inputs.mtl_cache;
    }
    auto r = mtl_train(zero, *inputs.infusion, inputs.qa, hyper, derive_seed(seed, "train", {2}));
    if (inputs.mtl_cache != nullptr) {
      *inputs.mtl_cache = r;
    }
    return r;
  };
  auto finetune = [&](const ParameterMatrix& from, const EwcState* ewc) {
    return train_task(from, inputs.qa, hyper, TaskKind::qa, ewc, derive_seed(seed, "train", {1}));
  };

  switch (regime) {
    case Regime::ft: {
      auto r = finetune(zero, nullptr);
      out = {std::move(r.theta), r.epochs_ran, r.stopped_early};
      break;
    }
    case Regime::pt_ft: {
      const auto pt = pretrain();
      auto r = finetune(pt.theta, nullptr);
      out = {std::move(r.theta), pt.epochs_ran + r.epochs_ran, r.stopped_early};
      break;
    }
    case Regime::pt_ft_ewc: {
      auto pt = pretrain();
      if (inputs.fisher_samples.empty()) {
        throw ConfigError("EWC needs infusion samples for the Fisher estimate", "fisher_samples");
      }
      auto fisher = fisher_diagonal(pt.theta, inputs.fisher_samples, inputs.fisher_n,
                                    derive_seed(seed, "fisher"));
      const EwcState ewc(pt.theta, std::move(fisher), inputs.ewc_lambda);
      auto r = finetune(pt.theta, &ewc);
      out = {std::move(r.theta), pt.epochs_ran + r.epochs_ran, r.stopped_early};
      break;
    }
    case Regime::mtl: {
      auto m = multitask();
      out = {std::move(m.theta), m.epochs_ran, m.stopped_early};
      break;
    }
    case Regime::mtl_ft: {
      const auto m = multitask();
      auto r = finetune(m.theta, nullptr);
      out = {std::move(r.theta), m.epochs_ran + r.epochs_ran, r.stopped_early};
      break;
    }
  }
  return out;
}

}  // namespace kilab
