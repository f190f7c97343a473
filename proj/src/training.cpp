#include "air/training.hpp"

#include <algorithm>
#include <numeric>

#include "air/errors.hpp"

namespace air {

namespace {

constexpr std::int64_t kEvalBatch = 500;
constexpr std::uint64_t kMonitorStream = 0x6d6f6e69746f72ULL;

struct ObjectiveParts {
  torch::Tensor objective;
  double at = 0.0;
  double ir = 0.0;
  double ar = 0.0;
  double reg = 0.0;
  double penalty = 0.0;
};

AtOptions at_options(const TrainingConfig& cfg) {
  AtOptions options;
  options.dropout_active = true;
  options.rdrop_probability = cfg.rdrop_at_probability;
  options.rdrop_weight = cfg.rdrop_at_weight;
  return options;
}

ObjectiveParts batch_objective(Classifier& model, const ContinualState& state, const torch::Tensor& x,
                               const torch::Tensor& y, const AttackSpec& attack, int task_index,
                               const TrainingConfig& cfg, Rng& rng) {
  ObjectiveParts parts;
  if (cfg.method == Method::kAir) {
    AirOptions options;
    options.weights = cfg.weights;
    options.enable_ir = cfg.enable_ir;
    options.enable_ar = cfg.enable_ar;
    options.enable_reg = cfg.enable_reg;
    options.ar_labels = cfg.ar_labels;
    options.at = at_options(cfg);
    options.policy = cfg.augmentation;
    options.task_index = task_index;
    auto breakdown =
        air_loss(model, state.teacher ? &*state.teacher : nullptr, x, y, attack, options, rng);
    parts.objective = breakdown.objective;
    parts.at = breakdown.at;
    parts.ir = breakdown.ir;
    parts.ar = breakdown.ar;
    parts.reg = breakdown.reg;
    return parts;
  }

  auto at = at_loss(model, x, y, attack, at_options(cfg), rng);
  parts.at = at.loss.item<double>();
  parts.objective = at.loss;
  if (cfg.method == Method::kEwc && !state.ewc_terms.empty()) {
    auto penalty = ewc_penalty(model, state.ewc_terms, cfg.ewc_strength);
    parts.penalty = penalty.item<double>();
    parts.objective = parts.objective + penalty;
  } else if (cfg.method == Method::kLfl && state.teacher) {
    auto penalty = lfl_penalty(model, *state.teacher, at.adversarial, cfg.lfl_strength);
    parts.penalty = penalty.item<double>();
    parts.objective = parts.objective + penalty;
  }
  return parts;
}

std::vector<std::vector<std::int64_t>> make_batches(std::int64_t n, std::int64_t batch_size, Rng& rng) {
  const auto order = rng.permutation(n);
  auto acc = order.accessor<std::int64_t, 1>();
  std::vector<std::vector<std::int64_t>> batches;
  for (std::int64_t begin = 0; begin < n; begin += batch_size) {
    const auto end = std::min(n, begin + batch_size);
    if (end - begin < 2) break;  // replay mixing needs two samples
    std::vector<std::int64_t> batch;
    for (auto i = begin; i < end; ++i) batch.push_back(acc[i]);
    batches.push_back(std::move(batch));
  }
  return batches;
}

// Attack used for optimizer step `step` (0-based) out of `total` under the
// configured budget warm-up. Returns `spec` untouched once warm-up is over.
AttackSpec warmed_attack(const AttackSpec& spec, double warmup, std::int64_t step, std::int64_t total) {
  if (warmup <= 0.0 || spec.family == AttackFamily::kNone) return spec;
  const double ramp_steps = warmup * static_cast<double>(total);
  const double frac = static_cast<double>(step + 1) / ramp_steps;
  if (frac >= 1.0) return spec;
  auto scaled = spec;
  scaled.epsilon *= frac;
  scaled.step_size *= frac;
  return scaled;
}

std::int64_t steps_per_epoch(std::int64_t n, std::int64_t batch_size) {
  auto full = n / batch_size;
  return full + ((n % batch_size) >= 2 ? 1 : 0);
}

torch::Tensor index_tensor(const std::vector<std::int64_t>& idx) {
  return torch::tensor(idx, torch::kInt64);
}

void accumulate(EpochRecord& record, const ObjectiveParts& parts, double total) {
  record.train_loss += total;
  record.at_loss += parts.at;
  record.ir_loss += parts.ir;
  record.ar_loss += parts.ar;
  record.reg_loss += parts.reg;
  record.penalty += parts.penalty;
}

void average(EpochRecord& record, std::size_t batches) {
  if (batches == 0) return;
  const auto n = static_cast<double>(batches);
  record.train_loss /= n;
  record.at_loss /= n;
  record.ir_loss /= n;
  record.ar_loss /= n;
  record.reg_loss /= n;
  record.penalty /= n;
}

std::optional<double> monitor(Classifier& model, const TaskDataset& task, const TrainingConfig& cfg, int task_index,
                              int epoch) {
  if (cfg.monitor_samples <= 0) return std::nullopt;
  const bool use_val = task.val_size() > 0;
  const auto& x = use_val ? task.val_x : task.test_x;
  const auto& y = use_val ? task.val_y : task.test_y;
  if (!x.defined() || x.size(0) == 0) return std::nullopt;
  const auto n = std::min<std::int64_t>(cfg.monitor_samples, x.size(0));
  Rng eval_rng(mix_seed(mix_seed(cfg.seed, kMonitorStream), static_cast<std::uint64_t>(task_index * 1000 + epoch)));
  return evaluate_split(model, x.slice(0, 0, n), y.slice(0, 0, n), task.attack, eval_rng);
}

}  // namespace

std::string to_string(Method method) {
  switch (method) {
    case Method::kVanilla:
      return "vanilla";
    case Method::kEwc:
      return "ewc";
    case Method::kLfl:
      return "lfl";
    case Method::kFeatureExtraction:
      return "feature_extraction";
    case Method::kAir:
      return "air";
    case Method::kJoint:
      return "joint";
  }
  throw ConfigError("method", "unknown method");
}

Method method_from_string(const std::string& name) {
  for (auto m : {Method::kVanilla, Method::kEwc, Method::kLfl, Method::kFeatureExtraction, Method::kAir,
                 Method::kJoint}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("method", "unknown method '" + name +
                                  "' (expected vanilla, ewc, lfl, feature_extraction, air or joint)");
}

void TrainingConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("training.learning_rate", "must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("training.momentum", "must lie in [0, 1)");
  if (batch_size < 2) throw ConfigError("training.batch_size", "must be >= 2");
  if (epochs < 0) throw ConfigError("training.epochs", "must be >= 0");
  if (!(epsilon_warmup >= 0.0 && epsilon_warmup <= 1.0)) {
    throw ConfigError("training.epsilon_warmup", "must lie in [0, 1]");
  }
  if (!(rdrop_at_probability >= 0.0 && rdrop_at_probability <= 1.0)) {
    throw ConfigError("training.rdrop_at_probability", "must lie in [0, 1]");
  }
  if (!(weights.sd >= 0.0)) throw ConfigError("air.lambda_sd", "must be >= 0");
  if (!(weights.reg >= 0.0)) throw ConfigError("air.lambda_reg", "must be >= 0");
  if (!(ewc_strength >= 0.0)) throw ConfigError("baselines.ewc_strength", "must be >= 0");
  if (!(lfl_strength >= 0.0)) throw ConfigError("baselines.lfl_strength", "must be >= 0");
  if (fisher_samples < 1) throw ConfigError("baselines.fisher_samples", "must be >= 1");
  if (monitor_samples < 0) throw ConfigError("evaluation.monitor_samples", "must be >= 0");
  augmentation.validate();
}

double evaluate_split(Classifier& model, const torch::Tensor& x, const torch::Tensor& y, const AttackSpec& attack,
                      Rng& rng) {
  const auto n = x.size(0);
  if (n == 0) throw InputError("evaluate: empty test set");
  std::int64_t correct = 0;
  for (std::int64_t begin = 0; begin < n; begin += kEvalBatch) {
    const auto end = std::min(n, begin + kEvalBatch);
    const auto xb = x.slice(0, begin, end);
    const auto yb = y.slice(0, begin, end);
    const auto adv = craft(model, xb, yb, attack, rng);
    torch::NoGradGuard no_grad;
    correct += model->forward(adv).argmax(1).eq(yb).sum().item<std::int64_t>();
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double evaluate(Classifier& model, const TaskDataset& task, Rng& rng, std::int64_t cap) {
  if (task.test_size() == 0) throw InputError("evaluate: task " + std::to_string(task.id) + " has no test samples");
  const auto n = cap > 0 ? std::min(cap, task.test_size()) : task.test_size();
  return evaluate_split(model, task.test_x.slice(0, 0, n), task.test_y.slice(0, 0, n), task.attack, rng);
}

TaskTrainingResult train_task(Classifier& model, const ContinualState& state, const TaskDataset& task,
                              int task_index, const TrainingConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.method == Method::kJoint) throw ConfigError("method", "joint training runs through joint_training()");
  if ((cfg.method == Method::kAir || cfg.method == Method::kLfl) && task_index >= 2 && !state.teacher) {
    throw ProtocolError("train_task: method " + to_string(cfg.method) + " needs a teacher for task " +
                        std::to_string(task_index));
  }
  if (cfg.method == Method::kEwc && task_index >= 2 && state.ewc_terms.empty()) {
    throw ProtocolError("train_task: ewc needs a consolidated earlier task");
  }

  const bool head_only = cfg.method == Method::kFeatureExtraction && task_index >= 2;
  std::vector<torch::Tensor> frozen;
  if (head_only) {
    frozen = model->body_parameters();
    for (auto& p : frozen) p.requires_grad_(false);
  }
  const auto trainable = head_only ? model->head_parameters() : model->parameters();
  torch::optim::SGD optimizer(trainable, torch::optim::SGDOptions(cfg.learning_rate).momentum(cfg.momentum));

  TaskTrainingResult result;
  double best_accuracy = -1.0;
  const auto total_steps = steps_per_epoch(task.train_size(), cfg.batch_size) * cfg.epochs;
  // Only a model trained from scratch needs the ramp; later tasks start robust.
  const double warmup = task_index == 1 ? cfg.epsilon_warmup : 0.0;
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord record;
    record.epoch = epoch;
    const auto batches = make_batches(task.train_size(), cfg.batch_size, rng);
    for (const auto& batch : batches) {
      const auto idx = index_tensor(batch);
      const auto x = task.train_x.index_select(0, idx);
      const auto y = task.train_y.index_select(0, idx);
      const auto attack = warmed_attack(task.attack, warmup, step++, total_steps);
      auto parts = batch_objective(model, state, x, y, attack, task_index, cfg, rng);
      const double total = parts.objective.item<double>();
      if (!std::isfinite(total)) throw NumericError("train_task: non-finite loss in epoch " + std::to_string(epoch));
      optimizer.zero_grad();
      parts.objective.backward();
      optimizer.step();
      accumulate(record, parts, total);
    }
    average(record, batches.size());
    record.monitor_accuracy = monitor(model, task, cfg, task_index, epoch);
    if (record.monitor_accuracy && *record.monitor_accuracy > best_accuracy) {
      best_accuracy = *record.monitor_accuracy;
      result.best = snapshot(model, task_index);
      result.best_epoch = epoch;
    }
    result.history.push_back(std::move(record));
  }

  for (auto& p : frozen) p.requires_grad_(true);
  return result;
}

Classifier feature_extraction_train(const Classifier& model, const TaskDataset& task, const TrainingConfig& cfg,
                                    Rng& rng, std::vector<EpochRecord>* history) {
  auto adapted = snapshot(model, 0).to_classifier();
  auto fe_cfg = cfg;
  fe_cfg.method = Method::kFeatureExtraction;
  auto result = train_task(adapted, ContinualState{}, task, 2, fe_cfg, rng);
  if (history != nullptr) *history = std::move(result.history);
  return adapted;
}

Classifier joint_training(const std::vector<TaskDataset>& tasks, const ArchSpec& arch, const TrainingConfig& cfg,
                          Rng& rng, std::vector<EpochRecord>* history) {
  if (tasks.empty()) throw InputError("joint_training: empty task list");
  cfg.validate();
  auto model = make_classifier(arch, rng);

  // Union index: (task, sample) pairs laid out task after task.
  std::vector<std::int64_t> offsets{0};
  for (const auto& task : tasks) offsets.push_back(offsets.back() + task.train_size());
  const auto total = offsets.back();

  torch::optim::SGD optimizer(model->parameters(),
                              torch::optim::SGDOptions(cfg.learning_rate).momentum(cfg.momentum));
  const auto options = at_options(cfg);
  const auto total_steps = steps_per_epoch(total, cfg.batch_size) * cfg.epochs;
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord record;
    record.epoch = epoch;
    record.provenance.assign(tasks.size(), 0);
    const auto batches = make_batches(total, cfg.batch_size, rng);
    for (const auto& batch : batches) {
      std::vector<std::vector<std::int64_t>> by_task(tasks.size());
      for (auto flat : batch) {
        const auto t = static_cast<std::size_t>(
            std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin() - 1);
        by_task[t].push_back(flat - offsets[t]);
      }
      const auto current = step++;
      std::vector<torch::Tensor> adv_parts;
      std::vector<torch::Tensor> label_parts;
      for (std::size_t t = 0; t < tasks.size(); ++t) {
        if (by_task[t].empty()) continue;
        record.provenance[t] += static_cast<std::int64_t>(by_task[t].size());
        const auto idx = index_tensor(by_task[t]);
        const auto y = tasks[t].train_y.index_select(0, idx);
        const auto attack = warmed_attack(tasks[t].attack, cfg.epsilon_warmup, current, total_steps);
        adv_parts.push_back(craft(model, tasks[t].train_x.index_select(0, idx), y, attack, rng));
        label_parts.push_back(y);
      }
      const auto adv = torch::cat(adv_parts);
      const auto y = torch::cat(label_parts);
      // Attack already crafted per task; score with the benign AT path.
      auto at = at_loss(model, adv, y, AttackSpec::none(), options, rng);
      const double value = at.loss.item<double>();
      if (!std::isfinite(value)) throw NumericError("joint_training: non-finite loss");
      optimizer.zero_grad();
      at.loss.backward();
      optimizer.step();
      record.train_loss += value;
      record.at_loss += value;
    }
    average(record, batches.size());
    if (history != nullptr) history->push_back(std::move(record));
  }
  return model;
}

}  // namespace air
