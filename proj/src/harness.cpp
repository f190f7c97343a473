#include "air/harness.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "air/errors.hpp"

namespace air {

namespace {

constexpr std::uint64_t kEvalStream = 0x6576616cULL;
constexpr std::uint64_t kTrainStream = 0x747261696eULL;
constexpr std::uint64_t kFisherStream = 0x666973686572ULL;

std::string format_accuracy(double value) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%.6f", value);
  return buffer;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

EvaluationMatrix::EvaluationMatrix(int tasks)
    : tasks_(tasks),
      cells_(static_cast<std::size_t>(tasks * tasks)),
      counts_(static_cast<std::size_t>(tasks * tasks), 0) {
  if (tasks < 1) throw InputError("evaluation matrix needs at least one task");
}

std::size_t EvaluationMatrix::index(int k, int t) const {
  if (k < 1 || k > tasks_ || t < 1 || t > tasks_) throw InputError("evaluation matrix index out of range");
  return static_cast<std::size_t>((k - 1) * tasks_ + (t - 1));
}

void EvaluationMatrix::set(int k, int t, double accuracy, std::int64_t samples) {
  if (t > k) throw InputError("evaluation matrix cell (" + std::to_string(k) + ", " + std::to_string(t) +
                              ") lies above the diagonal");
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw InputError("accuracy must lie in [0, 1]");
  cells_[index(k, t)] = accuracy;
  counts_[index(k, t)] = samples;
}

std::optional<double> EvaluationMatrix::at(int k, int t) const { return cells_[index(k, t)]; }

std::int64_t EvaluationMatrix::samples(int k, int t) const { return counts_[index(k, t)]; }

bool EvaluationMatrix::complete() const {
  if (tasks_ < 1) return false;
  for (int k = 1; k <= tasks_; ++k) {
    for (int t = 1; t <= k; ++t) {
      if (!at(k, t)) return false;
    }
  }
  return true;
}

std::string EvaluationMatrix::to_csv() const {
  std::string out = "checkpoint";
  for (int t = 1; t <= tasks_; ++t) out += ",task_" + std::to_string(t);
  out += "\n";
  for (int k = 1; k <= tasks_; ++k) {
    out += "after_task_" + std::to_string(k);
    for (int t = 1; t <= tasks_; ++t) {
      out += ",";
      if (auto value = at(k, t)) out += format_accuracy(*value);
    }
    out += "\n";
  }
  return out;
}

EvaluationMatrix EvaluationMatrix::from_csv(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError(source + ": empty matrix file");
  const auto header = split_line(line);
  if (header.size() < 2 || header[0] != "checkpoint") throw DataError(source + ": malformed matrix header");
  const int n = static_cast<int>(header.size()) - 1;
  EvaluationMatrix matrix(n);
  int k = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++k;
    const auto cells = split_line(line);
    if (k > n || static_cast<int>(cells.size()) != n + 1) throw DataError(source + ": malformed matrix row " + std::to_string(k));
    for (int t = 1; t <= n; ++t) {
      const auto& cell = cells[static_cast<std::size_t>(t)];
      if (cell.empty()) {
        if (t <= k) throw DataError(source + ": missing cell (" + std::to_string(k) + ", " + std::to_string(t) + ")");
        continue;
      }
      if (t > k) throw DataError(source + ": value above the diagonal in row " + std::to_string(k));
      double value = 0.0;
      try {
        std::size_t used = 0;
        value = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw DataError(source + ": non-numeric cell '" + cell + "'");
      }
      if (!(value >= 0.0 && value <= 1.0)) throw DataError(source + ": accuracy outside [0, 1]");
      matrix.set(k, t, value, 0);
    }
  }
  if (k != n) throw DataError(source + ": expected " + std::to_string(n) + " rows, found " + std::to_string(k));
  return matrix;
}

ForgettingMetrics forgetting_metrics(const EvaluationMatrix& matrix) {
  if (!matrix.complete()) throw InputError("forgetting_metrics: evaluation matrix is incomplete");
  const int n = matrix.tasks();
  ForgettingMetrics metrics;
  double sum = 0.0;
  for (int t = 1; t <= n; ++t) {
    sum += *matrix.at(n, t);
    metrics.forgetting.push_back(*matrix.at(t, t) - *matrix.at(n, t));
  }
  metrics.average_accuracy = sum / n;
  if (n > 1) {
    double transfer = 0.0;
    for (int t = 1; t < n; ++t) transfer += *matrix.at(n, t) - *matrix.at(t, t);
    metrics.backward_transfer = transfer / (n - 1);
  }
  return metrics;
}

void to_json(nlohmann::json& j, const ForgettingMetrics& metrics) {
  j = {{"average_accuracy", metrics.average_accuracy},
       {"backward_transfer", metrics.backward_transfer},
       {"forgetting", metrics.forgetting}};
}

Rng evaluation_rng(std::uint64_t seed, int k, int t) {
  return Rng(mix_seed(mix_seed(seed, kEvalStream), static_cast<std::uint64_t>(k * 1000 + t)));
}

SequenceResult run_sequence(const AttackSequence& seq, const ArchSpec& arch, const TrainingConfig& cfg,
                            const RunOptions& options) {
  seq.validate(arch.classes);
  cfg.validate();
  const int n = static_cast<int>(seq.tasks.size());
  SequenceResult result;
  result.matrix = EvaluationMatrix(n);

  Rng rng(mix_seed(cfg.seed, kTrainStream));
  ContinualState state;
  std::optional<Classifier> model;
  if (cfg.method != Method::kJoint) model = make_classifier(arch, rng);

  for (int k = 1; k <= n; ++k) {
    const auto& task = seq.tasks[static_cast<std::size_t>(k - 1)];
    if (cfg.method == Method::kJoint) {
      std::vector<TaskDataset> prefix(seq.tasks.begin(), seq.tasks.begin() + k);
      Rng joint_rng = rng.fork(static_cast<std::uint64_t>(k));
      std::vector<EpochRecord> history;
      model = joint_training(prefix, arch, cfg, joint_rng, &history);
      TaskTrainingResult record;
      record.history = std::move(history);
      result.training.push_back(std::move(record));
    } else {
      result.training.push_back(train_task(*model, state, task, k, cfg, rng));
    }
    result.best_monitor_accuracy.push_back(
        result.training.back().best ? std::optional<double>(result.training.back().history.at(
                                          static_cast<std::size_t>(result.training.back().best_epoch - 1))
                                                                .monitor_accuracy.value())
                                    : std::nullopt);

    auto checkpoint = snapshot(*model, k);
    if (options.checkpoint_dir) {
      save_checkpoint(*options.checkpoint_dir / ("task_" + std::to_string(k) + ".ckpt"), checkpoint);
      if (const auto& best = result.training.back().best) {
        save_checkpoint(*options.checkpoint_dir / ("task_" + std::to_string(k) + "_best.ckpt"), *best);
      }
    }

    for (int t = 1; t <= k; ++t) {
      const auto& evaluated = seq.tasks[static_cast<std::size_t>(t - 1)];
      auto eval_rng = evaluation_rng(cfg.seed, k, t);
      const auto samples = options.eval_samples > 0 ? std::min(options.eval_samples, evaluated.test_size())
                                                     : evaluated.test_size();
      result.matrix.set(k, t, evaluate(*model, evaluated, eval_rng, samples), samples);
      if (const auto& best = result.training.back().best) {
        if (!result.best_matrix) result.best_matrix = EvaluationMatrix(n);
        auto best_model = best->to_classifier();
        auto best_rng = evaluation_rng(cfg.seed, k, t);
        result.best_matrix->set(k, t, evaluate(best_model, evaluated, best_rng, samples), samples);
      }
    }

    if (cfg.method == Method::kEwc && k < n) {
      const auto count = std::min(cfg.fisher_samples, task.train_size());
      Rng fisher_rng = rng.fork(kFisherStream + static_cast<std::uint64_t>(k));
      auto fisher = fisher_diag(*model, task.train_x.slice(0, 0, count), task.train_y.slice(0, 0, count),
                                task.attack, fisher_rng);
      state.ewc_terms.push_back({checkpoint, std::move(fisher)});
    }
    state.teacher = checkpoint;
    result.checkpoints.push_back(std::move(checkpoint));
  }
  return result;
}

std::string FeatureTable::to_csv() const {
  std::string out = "task_id,label";
  const auto d = embeddings.defined() && embeddings.dim() == 2 ? embeddings.size(1) : 0;
  for (std::int64_t j = 0; j < d; ++j) out += ",f_" + std::to_string(j);
  out += "\n";
  const auto values = d > 0 ? embeddings.to(torch::kFloat64).contiguous() : torch::zeros({0, 0}, torch::kFloat64);
  auto acc = values.accessor<double, 2>();
  for (std::size_t i = 0; i < rows(); ++i) {
    out += std::to_string(task_ids[i]) + "," + std::to_string(labels[i]);
    for (std::int64_t j = 0; j < d; ++j) {
      char buffer[40];
      std::snprintf(buffer, sizeof(buffer), ",%.9g", acc[static_cast<std::int64_t>(i)][j]);
      out += buffer;
    }
    out += "\n";
  }
  return out;
}

FeatureTable export_features(Classifier& model, const std::vector<TaskDataset>& tasks, std::int64_t cap, Rng& rng) {
  FeatureTable table;
  std::vector<torch::Tensor> blocks;
  for (const auto& task : tasks) {
    const auto n = cap > 0 ? std::min(cap, task.test_size()) : task.test_size();
    if (n == 0) continue;
    const auto x = task.test_x.slice(0, 0, n);
    const auto y = task.test_y.slice(0, 0, n);
    const auto adv = craft(model, x, y, task.attack, rng);
    torch::NoGradGuard no_grad;
    blocks.push_back(model->features(adv).to(torch::kFloat64));
    auto labels = y.accessor<std::int64_t, 1>();
    for (std::int64_t i = 0; i < n; ++i) {
      table.task_ids.push_back(task.id);
      table.labels.push_back(labels[i]);
    }
  }
  table.embeddings = blocks.empty() ? torch::zeros({0, model->arch().penultimate_width()}, torch::kFloat64)
                                    : torch::cat(blocks);
  return table;
}

std::vector<double> cluster_homogeneity(const FeatureTable& table, std::int64_t classes) {
  std::vector<double> ratios(static_cast<std::size_t>(classes), std::numeric_limits<double>::quiet_NaN());
  if (table.rows() == 0) return ratios;
  const auto labels = torch::tensor(table.labels, torch::kInt64);
  const auto tasks = torch::tensor(std::vector<std::int64_t>(table.task_ids.begin(), table.task_ids.end()),
                                   torch::kInt64);
  const auto task_values = std::get<0>(torch::_unique(tasks));
  for (std::int64_t c = 0; c < classes; ++c) {
    std::vector<torch::Tensor> centroids;
    double scatter = 0.0;
    for (std::int64_t i = 0; i < task_values.size(0); ++i) {
      const auto mask = labels.eq(c).logical_and(tasks.eq(task_values[i]));
      const auto rows = table.embeddings.index({mask});
      if (rows.size(0) == 0) continue;
      const auto centroid = rows.mean(0);
      scatter += (rows - centroid).norm(2, {1}).mean().item<double>();
      centroids.push_back(centroid);
    }
    if (centroids.size() < 2) continue;
    double between = 0.0;
    int pairs = 0;
    for (std::size_t a = 0; a < centroids.size(); ++a) {
      for (std::size_t b = a + 1; b < centroids.size(); ++b) {
        between += (centroids[a] - centroids[b]).norm().item<double>();
        ++pairs;
      }
    }
    between /= pairs;
    scatter /= static_cast<double>(centroids.size());
    ratios[static_cast<std::size_t>(c)] = scatter > 0.0 ? between / scatter : std::numeric_limits<double>::quiet_NaN();
  }
  return ratios;
}

}  // namespace air
