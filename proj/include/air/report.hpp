#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "air/harness.hpp"

namespace air {

// One finished run as found on disk: <dir>/manifest.json + <dir>/matrix.csv.
struct RunRecord {
  std::filesystem::path dir;
  std::string method;
  std::string sequence;
  std::uint64_t seed = 0;
  EvaluationMatrix matrix;
};

// Every run directory below `root` (searched recursively), sorted by path.
std::vector<RunRecord> collect_runs(const std::filesystem::path& root);

// Seed-averaged table with one row per (sequence, method, task): accuracy
// just after training the task, after the last task, and the difference.
std::string summary_csv(const std::vector<RunRecord>& runs);

// Accuracy-over-checkpoint plot for one sequence: one line per task, colored
// by task, dash pattern by method (seeds averaged).
std::string sequence_svg(const std::vector<RunRecord>& runs, const std::string& sequence);

// Collects runs under every root, writes summary.csv and one <sequence>.svg
// per sequence into `out`; returns the paths written.
std::vector<std::filesystem::path> write_report(const std::vector<std::filesystem::path>& roots,
                                               const std::filesystem::path& out);

}  // namespace air
