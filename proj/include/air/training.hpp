#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "air/baselines.hpp"
#include "air/data.hpp"
#include "air/losses.hpp"
#include "air/model.hpp"
#include "air/replay.hpp"

namespace air {

enum class Method { kVanilla, kEwc, kLfl, kFeatureExtraction, kAir, kJoint };

std::string to_string(Method method);
Method method_from_string(const std::string& name);

struct TrainingConfig {
  Method method = Method::kVanilla;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::int64_t batch_size = 128;
  int epochs = 10;
  double rdrop_at_probability = 0.1;
  double rdrop_at_weight = 1.0;
  // Fraction of the first task's steps (and of joint training's) over which
  // the attack budget ramps linearly from 0 to its full value; 0 disables.
  double epsilon_warmup = 0.0;
  AirWeights weights;
  bool enable_ir = true;
  bool enable_ar = true;
  bool enable_reg = true;
  ArLabelStrategy ar_labels = ArLabelStrategy::kMixedData;
  AugmentationPolicy augmentation;
  double ewc_strength = 100.0;
  double lfl_strength = 0.1;
  std::int64_t fisher_samples = 500;
  // Held-out samples scored after every epoch (validation split, else test split); 0 disables.
  std::int64_t monitor_samples = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Carry-over state from earlier tasks that some methods need.
struct ContinualState {
  std::optional<ModelSnapshot> teacher;
  std::vector<EwcTerm> ewc_terms;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double at_loss = 0.0;
  double ir_loss = 0.0;
  double ar_loss = 0.0;
  double reg_loss = 0.0;
  double penalty = 0.0;
  std::optional<double> monitor_accuracy;
  std::vector<std::int64_t> provenance;  // samples drawn per task (joint training)
};

struct TaskTrainingResult {
  std::vector<EpochRecord> history;
  std::optional<ModelSnapshot> best;  // best monitored epoch, when monitoring is on
  int best_epoch = 0;
};

// Minibatch SGD over the task with the configured method's objective.
// `task_index` is the 1-based position of the task in the sequence.
TaskTrainingResult train_task(Classifier& model, const ContinualState& state, const TaskDataset& task,
                              int task_index, const TrainingConfig& cfg, Rng& rng);

// Fraction of test samples (up to `cap`, 0 = all) classified correctly after
// crafting the task's own attack against `model`.
double evaluate(Classifier& model, const TaskDataset& task, Rng& rng, std::int64_t cap = 0);
double evaluate_split(Classifier& model, const torch::Tensor& x, const torch::Tensor& y, const AttackSpec& attack,
                      Rng& rng);

// Head-only adaptation: every parameter outside the final layer is frozen.
Classifier feature_extraction_train(const Classifier& model, const TaskDataset& task, const TrainingConfig& cfg,
                                    Rng& rng, std::vector<EpochRecord>* history = nullptr);

// Fresh model trained on the union of all tasks; each minibatch mixes tasks in
// proportion to their size and crafts every sample under its own task's attack.
Classifier joint_training(const std::vector<TaskDataset>& tasks, const ArchSpec& arch, const TrainingConfig& cfg,
                          Rng& rng, std::vector<EpochRecord>* history = nullptr);

}  // namespace air
