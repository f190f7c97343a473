#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <string>
#include <vector>

#include "air/config.hpp"
#include "air/errors.hpp"
#include "air/experiment.hpp"
#include "air/losses.hpp"

namespace py = pybind11;

namespace {

using Rows = std::vector<std::vector<std::optional<double>>>;

Rows matrix_rows(const air::EvaluationMatrix& m) {
  Rows rows;
  for (int k = 1; k <= m.tasks(); ++k) {
    auto& row = rows.emplace_back();
    for (int t = 1; t <= m.tasks(); ++t) row.push_back(m.at(k, t));
  }
  return rows;
}

air::EvaluationMatrix from_rows(const Rows& rows) {
  air::EvaluationMatrix m(static_cast<int>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k].size() != rows.size()) throw air::InputError("matrix rows must be square");
    for (std::size_t t = 0; t < rows.size(); ++t) {
      if (rows[k][t]) m.set(static_cast<int>(k) + 1, static_cast<int>(t) + 1, *rows[k][t], 1);
    }
  }
  return m;
}

py::dict metrics_dict(const air::ForgettingMetrics& metrics) {
  py::dict d;
  d["average_accuracy"] = metrics.average_accuracy;
  d["backward_transfer"] = metrics.backward_transfer;
  d["forgetting"] = metrics.forgetting;
  return d;
}

torch::Tensor to_tensor(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw air::InputError("empty logits");
  const auto cols = static_cast<std::int64_t>(rows[0].size());
  auto out = torch::empty({static_cast<std::int64_t>(rows.size()), cols}, torch::kFloat64);
  auto acc = out.accessor<double, 2>();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<std::int64_t>(rows[i].size()) != cols) throw air::InputError("ragged logits");
    for (std::int64_t j = 0; j < cols; ++j) acc[static_cast<std::int64_t>(i)][j] = rows[i][j];
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the continual adversarial defense library";
  m.attr("__version__") = AIR_VERSION;

  auto base = py::register_exception<air::Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<air::ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<air::DataError>(m, "DataError", base.ptr());

  m.def(
      "resolve_config",
      [](const std::string& text) {
        nlohmann::json doc;
        try {
          doc = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
          throw air::ConfigError("$", std::string("invalid JSON: ") + e.what());
        }
        return air::to_json(air::parse_config(doc)).dump();
      },
      py::arg("config_json"), "Validate a config document and return its fully resolved JSON text.");

  m.def(
      "run_experiment",
      [](const std::filesystem::path& config_path, std::optional<std::filesystem::path> out,
         std::optional<std::uint64_t> seed) {
        auto config = air::load_config(config_path);
        if (seed) config.training.seed = *seed;
        std::optional<air::ExperimentOutcome> result;
        {
          py::gil_scoped_release release;
          result = air::run_experiment(config, air::load_sequence(config), out);
        }
        const auto& outcome = *result;
        py::dict d;
        d["matrix"] = matrix_rows(outcome.result.matrix);
        d["metrics"] = metrics_dict(outcome.metrics);
        d["homogeneity"] = outcome.homogeneity;
        return d;
      },
      py::arg("config_path"), py::arg("out") = py::none(), py::arg("seed") = py::none(),
      "Run one experiment config; returns the accuracy matrix and forgetting metrics.");

  m.def(
      "forgetting_metrics", [](const Rows& rows) { return metrics_dict(air::forgetting_metrics(from_rows(rows))); },
      py::arg("matrix"), "Average accuracy, backward transfer and per-task forgetting of a lower-triangular matrix.");

  m.def(
      "parse_matrix_csv",
      [](const std::string& text) { return matrix_rows(air::EvaluationMatrix::from_csv(text, "<string>")); },
      py::arg("text"));

  m.def(
      "kl_div",
      [](const std::vector<std::vector<double>>& target, const std::vector<std::vector<double>>& learner) {
        return air::kl_div(to_tensor(target), to_tensor(learner)).item<double>();
      },
      py::arg("target_logits"), py::arg("learner_logits"), "Batch-mean KL(softmax(target) || softmax(learner)).");

  m.def(
      "cluster_homogeneity",
      [](std::vector<int> task_ids, std::vector<std::int64_t> labels, const std::vector<std::vector<double>>& features,
         std::int64_t classes) {
        air::FeatureTable table;
        table.task_ids = std::move(task_ids);
        table.labels = std::move(labels);
        table.embeddings = to_tensor(features);
        return air::cluster_homogeneity(table, classes);
      },
      py::arg("task_ids"), py::arg("labels"), py::arg("features"), py::arg("classes"),
      "Per-class between-attack / within-attack centroid spread ratio (NaN if undefined).");
}
