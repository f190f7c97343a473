#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "air/config.hpp"
#include "air/harness.hpp"

namespace air {

struct ExperimentOutcome {
  SequenceResult result;
  ForgettingMetrics metrics;                     // last-epoch checkpoints
  std::optional<ForgettingMetrics> best_metrics;  // best monitored epochs
  std::optional<FeatureTable> features;
  std::vector<double> homogeneity;  // per class, empty unless features were exported
  nlohmann::json manifest;
};

// "pgd_to_fgsm" style label built from the task names.
std::string sequence_label(const ExperimentConfig& config);

// Builds the task splits from the local dataset cache (config root, else
// default_data_root()). Never touches the network.
AttackSequence load_sequence(const ExperimentConfig& config);

// Runs the sequence. With `out_dir`, artifacts are staged in a sibling
// directory and swapped into place once complete: manifest.json, matrix.csv,
// matrix_best.csv (monitoring on), metrics.json, checkpoints/, features.csv.
ExperimentOutcome run_experiment(const ExperimentConfig& config, const AttackSequence& sequence,
                                 const std::optional<std::filesystem::path>& out_dir = std::nullopt);

nlohmann::json history_json(const std::vector<TaskTrainingResult>& training);

}  // namespace air
