#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "air/data.hpp"
#include "air/model.hpp"
#include "air/training.hpp"

namespace air {

// R[k][t]: robust accuracy after finishing task k on task t's test set under
// task t's attack. Only t <= k is defined. Indices are 1-based.
class EvaluationMatrix {
 public:
  EvaluationMatrix() = default;
  explicit EvaluationMatrix(int tasks);

  [[nodiscard]] int tasks() const noexcept { return tasks_; }
  void set(int k, int t, double accuracy, std::int64_t samples);
  [[nodiscard]] std::optional<double> at(int k, int t) const;
  [[nodiscard]] std::int64_t samples(int k, int t) const;
  [[nodiscard]] bool complete() const;

  // Header "checkpoint,task_1,...", one row per checkpoint, empty undefined cells.
  [[nodiscard]] std::string to_csv() const;
  static EvaluationMatrix from_csv(const std::string& text, const std::string& source);

  bool operator==(const EvaluationMatrix&) const = default;

 private:
  [[nodiscard]] std::size_t index(int k, int t) const;

  int tasks_ = 0;
  std::vector<std::optional<double>> cells_;
  std::vector<std::int64_t> counts_;
};

struct ForgettingMetrics {
  double average_accuracy = 0.0;   // mean_t R[N][t]
  double backward_transfer = 0.0;  // mean_{t<N} (R[N][t] - R[t][t])
  std::vector<double> forgetting;  // R[t][t] - R[N][t], per task
};

ForgettingMetrics forgetting_metrics(const EvaluationMatrix& matrix);
void to_json(nlohmann::json& j, const ForgettingMetrics& metrics);

struct RunOptions {
  std::optional<std::filesystem::path> checkpoint_dir;
  std::int64_t eval_samples = 0;  // 0 = whole test split
};

struct SequenceResult {
  EvaluationMatrix matrix;  // last-epoch checkpoints
  // Same cells scored with each task's best monitored epoch; only when
  // monitoring is on. Training always continues from the last epoch.
  std::optional<EvaluationMatrix> best_matrix;
  std::vector<ModelSnapshot> checkpoints;  // model after each task
  std::vector<TaskTrainingResult> training;
  std::vector<std::optional<double>> best_monitor_accuracy;
};

// Trains the tasks in order, snapshots after each as the next teacher, and
// fills row k of the matrix once task k is done. Joint training retrains a
// fresh model on the union of tasks 1..k for row k.
SequenceResult run_sequence(const AttackSequence& seq, const ArchSpec& arch, const TrainingConfig& cfg,
                            const RunOptions& options = {});

// Evaluation stream for cell (k, t); fixed by the run seed.
Rng evaluation_rng(std::uint64_t seed, int k, int t);

struct FeatureTable {
  std::vector<int> task_ids;
  std::vector<std::int64_t> labels;
  torch::Tensor embeddings;  // [rows, d] float64

  [[nodiscard]] std::size_t rows() const { return task_ids.size(); }
  [[nodiscard]] std::string to_csv() const;
};

// Per task: craft its attack on up to `cap` test samples and record the
// penultimate embedding of each adversarial sample.
FeatureTable export_features(Classifier& model, const std::vector<TaskDataset>& tasks, std::int64_t cap, Rng& rng);

// For each class: mean pairwise distance between per-attack centroids divided
// by the mean distance of samples to their own attack centroid. NaN where a
// class has fewer than two attacks present.
std::vector<double> cluster_homogeneity(const FeatureTable& table, std::int64_t classes);

}  // namespace air
