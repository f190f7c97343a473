#include "air/experiment.hpp"

#include <torch/version.h>

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>

#include "air/errors.hpp"
#include "air/io.hpp"

#ifndef AIR_VERSION
#define AIR_VERSION "0.0.0"
#endif

namespace air {
namespace {

constexpr std::uint64_t kSplitStream = 0x73706c6974ULL;
constexpr std::uint64_t kFeatureStream = 0x66656174ULL;

namespace fs = std::filesystem;

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

nlohmann::json metrics_json(const ForgettingMetrics& m) {
  nlohmann::json j;
  to_json(j, m);
  return j;
}

// Swaps a fully written staging directory into `target`, replacing any earlier run.
void publish(const fs::path& staging, const fs::path& target) {
  const auto pid = std::to_string(::getpid());
  fs::path retired;
  if (fs::exists(target)) {
    retired = target;
    retired += ".old-" + pid;
    fs::rename(target, retired);
  }
  fs::rename(staging, target);
  if (!retired.empty()) fs::remove_all(retired);
}

// "air" for the full objective, "air(ir+ar)" style labels for ablated variants.
std::string method_label(const TrainingConfig& cfg) {
  if (cfg.method != Method::kAir || (cfg.enable_ir && cfg.enable_ar && cfg.enable_reg)) return to_string(cfg.method);
  std::string parts;
  if (cfg.enable_ir) parts += "ir";
  if (cfg.enable_ar) parts += std::string(parts.empty() ? "" : "+") + "ar";
  if (cfg.enable_reg) parts += std::string(parts.empty() ? "" : "+") + "reg";
  return "air(" + (parts.empty() ? std::string("at") : parts) + ")";
}

}  // namespace

std::string sequence_label(const ExperimentConfig& config) {
  std::string label;
  for (const auto& task : config.sequence) label += (label.empty() ? "" : "_to_") + task.name;
  return label;
}

AttackSequence load_sequence(const ExperimentConfig& config) {
  if (config.dataset_id != "mnist") throw ConfigError("$.dataset.id", "unsupported dataset " + config.dataset_id);
  const auto root = config.data_root.value_or(default_data_root());
  const auto pool = load_mnist_pool(root);
  return build_sequence(pool, config.sizes, config.attacks(), sequence_label(config),
                        mix_seed(config.seed(), kSplitStream));
}

nlohmann::json history_json(const std::vector<TaskTrainingResult>& training) {
  auto tasks = nlohmann::json::array();
  for (std::size_t k = 0; k < training.size(); ++k) {
    auto epochs = nlohmann::json::array();
    for (const auto& r : training[k].history) {
      nlohmann::json e{{"epoch", r.epoch},
                       {"train_loss", r.train_loss},
                       {"at_loss", r.at_loss},
                       {"ir_loss", r.ir_loss},
                       {"ar_loss", r.ar_loss},
                       {"reg_loss", r.reg_loss},
                       {"penalty", r.penalty},
                       {"monitor_accuracy", optional_json(r.monitor_accuracy)}};
      if (!r.provenance.empty()) e["provenance"] = r.provenance;
      epochs.push_back(std::move(e));
    }
    tasks.push_back({{"task", k + 1},
                     {"best_epoch", training[k].best ? nlohmann::json(training[k].best_epoch) : nlohmann::json()},
                     {"epochs", std::move(epochs)}});
  }
  return tasks;
}

ExperimentOutcome run_experiment(const ExperimentConfig& config, const AttackSequence& sequence,
                                 const std::optional<fs::path>& out_dir) {
  if (config.device != "cpu") throw ConfigError("$.device", "only cpu is supported");
  ExperimentOutcome outcome;
  outcome.manifest = {
      {"config", to_json(config)},
      {"method", method_label(config.training)},
      {"sequence", sequence.name},
      {"seed", config.seed()},
      {"versions", {{"air_defense", AIR_VERSION}, {"libtorch", TORCH_VERSION}, {"compiler", __VERSION__}}},
  };

  fs::path staging;
  RunOptions options;
  options.eval_samples = config.evaluation.test_samples;
  if (out_dir) {
    staging = *out_dir;
    staging += ".tmp-" + std::to_string(::getpid());
    fs::remove_all(staging);
    fs::create_directories(staging / "checkpoints");
    options.checkpoint_dir = staging / "checkpoints";
  }

  const auto started = std::chrono::steady_clock::now();
  try {
    outcome.result = run_sequence(sequence, config.arch, config.training, options);
    outcome.metrics = forgetting_metrics(outcome.result.matrix);
    if (outcome.result.best_matrix && outcome.result.best_matrix->complete()) {
      outcome.best_metrics = forgetting_metrics(*outcome.result.best_matrix);
    }
    if (config.evaluation.export_features) {
      auto model = outcome.result.checkpoints.back().to_classifier();
      Rng rng(mix_seed(config.seed(), kFeatureStream));
      outcome.features = export_features(model, sequence.tasks, config.evaluation.feature_samples, rng);
      outcome.homogeneity = cluster_homogeneity(*outcome.features, config.arch.classes);
    }
  } catch (...) {
    if (!staging.empty()) fs::remove_all(staging);
    throw;
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  outcome.manifest["wall_seconds"] = seconds;

  if (out_dir) {
    nlohmann::json metrics{{"last_epoch", metrics_json(outcome.metrics)},
                           {"best_epoch", outcome.best_metrics ? metrics_json(*outcome.best_metrics) : nlohmann::json()},
                           {"history", history_json(outcome.result.training)}};
    if (!outcome.homogeneity.empty()) {
      auto ratios = nlohmann::json::array();
      for (double r : outcome.homogeneity) ratios.push_back(std::isnan(r) ? nlohmann::json() : nlohmann::json(r));
      metrics["cluster_homogeneity"] = ratios;
    }
    write_file_atomic(staging / "manifest.json", outcome.manifest.dump(2) + "\n");
    write_file_atomic(staging / "matrix.csv", outcome.result.matrix.to_csv());
    if (outcome.result.best_matrix) write_file_atomic(staging / "matrix_best.csv", outcome.result.best_matrix->to_csv());
    write_file_atomic(staging / "metrics.json", metrics.dump(2) + "\n");
    if (outcome.features) write_file_atomic(staging / "features.csv", outcome.features->to_csv());
    if (out_dir->has_parent_path()) fs::create_directories(out_dir->parent_path());
    publish(staging, *out_dir);
  }
  return outcome;
}

}  // namespace air
