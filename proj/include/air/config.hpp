#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "air/attacks.hpp"
#include "air/data.hpp"
#include "air/model.hpp"
#include "air/training.hpp"

namespace air {

struct TaskEntry {
  std::string name;
  AttackSpec attack;
};

struct EvaluationSettings {
  std::int64_t test_samples = 0;  // 0 = whole test split
  bool export_features = false;
  std::int64_t feature_samples = 200;
};

struct ExperimentConfig {
  std::string name;
  std::string dataset_id = "mnist";
  std::optional<std::filesystem::path> data_root;
  SplitSizes sizes;
  std::string arch_name = "small_cnn";
  ArchSpec arch = ArchSpec::small_cnn();
  std::vector<TaskEntry> sequence;
  TrainingConfig training;
  EvaluationSettings evaluation;
  std::string output_dir;
  std::string device = "cpu";

  [[nodiscard]] std::uint64_t seed() const { return training.seed; }
  [[nodiscard]] std::vector<std::pair<std::string, AttackSpec>> attacks() const;
};

// The experiment JSON schema shipped in schemas/experiment.schema.json.
const nlohmann::json& experiment_schema();

// Checks `doc` against a JSON schema (the subset used by the experiment
// schema). Throws ConfigError carrying the JSON path of the first violation.
void validate_against_schema(const nlohmann::json& doc, const nlohmann::json& schema);

// Schema check, then semantic checks; unknown keys are rejected.
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);

// Fully resolved form; parse_config(to_json(c)) reproduces c.
nlohmann::json to_json(const ExperimentConfig& config);

}  // namespace air
