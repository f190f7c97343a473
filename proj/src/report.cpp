#include "air/report.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "air/errors.hpp"
#include "air/io.hpp"

namespace air {
namespace {

std::string fmt(const char* pattern, double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, value);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string file_stem(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return out.empty() ? "sequence" : out;
}

const char* kPalette[] = {"#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb"};

}  // namespace

std::vector<RunRecord> collect_runs(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError("report: not a directory: " + root.string());
  std::vector<RunRecord> runs;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file() || entry.path().filename() != "manifest.json") continue;
    const auto dir = entry.path().parent_path();
    const auto matrix_path = dir / "matrix.csv";
    if (!fs::exists(matrix_path)) continue;  // run still in progress or failed
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(read_file(entry.path()));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("report: " + entry.path().string() + ": " + e.what());
    }
    RunRecord run;
    run.dir = dir;
    run.method = manifest.value("method", "unknown");
    run.sequence = manifest.value("sequence", "unknown");
    run.seed = manifest.value("seed", std::uint64_t{0});
    run.matrix = EvaluationMatrix::from_csv(read_file(matrix_path), matrix_path.string());
    runs.push_back(std::move(run));
  }
  std::sort(runs.begin(), runs.end(), [](const auto& a, const auto& b) { return a.dir < b.dir; });
  return runs;
}

namespace {

// Seed-averaged matrix cells for one (sequence, method) group.
struct MethodCurves {
  int tasks = 0;
  int runs = 0;
  std::vector<double> sum;  // row-major [k][t], 0-based
  std::vector<int> count;

  void add(const EvaluationMatrix& m) {
    if (runs == 0) {
      tasks = m.tasks();
      sum.assign(static_cast<std::size_t>(tasks * tasks), 0.0);
      count.assign(sum.size(), 0);
    } else if (m.tasks() != tasks) {
      throw DataError("report: runs of one sequence disagree on task count");
    }
    ++runs;
    for (int k = 1; k <= tasks; ++k) {
      for (int t = 1; t <= k; ++t) {
        if (auto v = m.at(k, t)) {
          sum[static_cast<std::size_t>((k - 1) * tasks + t - 1)] += *v;
          count[static_cast<std::size_t>((k - 1) * tasks + t - 1)] += 1;
        }
      }
    }
  }
  [[nodiscard]] std::optional<double> at(int k, int t) const {
    const auto i = static_cast<std::size_t>((k - 1) * tasks + t - 1);
    if (t > k || count[i] == 0) return std::nullopt;
    return sum[i] / count[i];
  }
};

using Groups = std::map<std::string, std::map<std::string, MethodCurves>>;  // sequence -> method -> curves

Groups group_runs(const std::vector<RunRecord>& runs) {
  Groups groups;
  for (const auto& run : runs) groups[run.sequence][run.method].add(run.matrix);
  return groups;
}

}  // namespace

std::string summary_csv(const std::vector<RunRecord>& runs) {
  std::ostringstream out;
  out << "sequence,method,task,runs,just_trained,final,forgetting\n";
  for (const auto& [sequence, methods] : group_runs(runs)) {
    for (const auto& [method, curves] : methods) {
      const int n = curves.tasks;
      for (int t = 1; t <= n; ++t) {
        const auto diag = curves.at(t, t);
        const auto last = curves.at(n, t);
        out << sequence << ',' << method << ',' << t << ',' << curves.runs << ',';
        if (diag) out << fmt("%.6f", *diag);
        out << ',';
        if (last) out << fmt("%.6f", *last);
        out << ',';
        if (diag && last) out << fmt("%.6f", *diag - *last);
        out << '\n';
      }
    }
  }
  return out.str();
}

std::string sequence_svg(const std::vector<RunRecord>& runs, const std::string& sequence) {
  const auto groups = group_runs(runs);
  const auto found = groups.find(sequence);
  if (found == groups.end()) throw DataError("report: no runs for sequence " + sequence);
  const auto& methods = found->second;
  int tasks = 0;
  for (const auto& [_, curves] : methods) tasks = std::max(tasks, curves.tasks);

  const double left = 50.0;
  const double top = 30.0;
  const double plot_w = std::max(160.0, 120.0 * tasks);
  const double plot_h = 220.0;
  const double width = left + plot_w + 200.0;
  const double height = top + plot_h + 50.0;
  const auto x_of = [&](int k) { return tasks <= 1 ? left + plot_w / 2 : left + plot_w * (k - 1) / (tasks - 1); };
  const auto y_of = [&](double v) { return top + plot_h * (1.0 - v); };
  const char* dashes[] = {"", "6,3", "2,3", "8,3,2,3"};

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << xml_escape(sequence)
      << ": robust accuracy per task after each checkpoint</text>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double y = y_of(tick / 4.0);
    svg << "<line x1=\"" << left << "\" x2=\"" << left + plot_w << "\" y1=\"" << y << "\" y2=\"" << y
        << "\" stroke=\"#dddddd\"/>\n";
    svg << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << tick * 25
        << "</text>\n";
  }
  for (int k = 1; k <= tasks; ++k) {
    svg << "<text x=\"" << x_of(k) << "\" y=\"" << top + plot_h + 16 << "\" text-anchor=\"middle\">after task " << k
        << "</text>\n";
  }
  int m = 0;
  int legend = 0;
  for (const auto& [method, curves] : methods) {
    const char* dash = dashes[m % (sizeof dashes / sizeof *dashes)];
    for (int t = 1; t <= curves.tasks; ++t) {
      const char* color = kPalette[(t - 1) % (sizeof kPalette / sizeof *kPalette)];
      std::ostringstream points;
      for (int k = t; k <= curves.tasks; ++k) {
        if (auto v = curves.at(k, t)) points << x_of(k) << ',' << y_of(*v) << ' ';
      }
      svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\"";
      if (*dash != '\0') svg << " stroke-dasharray=\"" << dash << "\"";
      svg << " points=\"" << points.str() << "\"><title>" << xml_escape(method) << " task " << t << "</title></polyline>\n";
      for (int k = t; k <= curves.tasks; ++k) {
        if (auto v = curves.at(k, t)) {
          svg << "<circle cx=\"" << x_of(k) << "\" cy=\"" << y_of(*v) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        }
      }
      const double ly = top + 14.0 * legend++;
      const double lx = left + plot_w + 16;
      svg << "<line x1=\"" << lx << "\" x2=\"" << lx + 24 << "\" y1=\"" << ly + 5 << "\" y2=\"" << ly + 5
          << "\" stroke=\"" << color << "\" stroke-width=\"2\"";
      if (*dash != '\0') svg << " stroke-dasharray=\"" << dash << "\"";
      svg << "/>\n<text x=\"" << lx + 30 << "\" y=\"" << ly + 9 << "\">" << xml_escape(method) << ", task " << t
          << "</text>\n";
    }
    ++m;
  }
  svg << "</svg>\n";
  return svg.str();
}

std::vector<std::filesystem::path> write_report(const std::vector<std::filesystem::path>& roots,
                                               const std::filesystem::path& out) {
  std::vector<RunRecord> runs;
  for (const auto& root : roots) {
    auto found = collect_runs(root);
    if (found.empty()) throw DataError("report: no finished runs under " + root.string());
    for (auto& run : found) runs.push_back(std::move(run));
  }
  if (runs.empty()) throw DataError("report: no run directories given");
  std::filesystem::create_directories(out);
  std::vector<std::filesystem::path> written;
  written.push_back(out / "summary.csv");
  write_file_atomic(written.back(), summary_csv(runs));
  std::set<std::string> sequences;
  for (const auto& run : runs) sequences.insert(run.sequence);
  for (const auto& seq : sequences) {
    written.push_back(out / (file_stem(seq) + ".svg"));
    write_file_atomic(written.back(), sequence_svg(runs, seq));
  }
  return written;
}

}  // namespace air
