// Command-line driver: fetch-data, run, report, ablate.

#include <CLI11.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "air/config.hpp"
#include "air/errors.hpp"
#include "air/experiment.hpp"
#include "air/report.hpp"

namespace fs = std::filesystem;

namespace {

struct Job {
  air::ExperimentConfig config;
  fs::path out;
};

int run_job(const Job& job) {
  const auto sequence = air::load_sequence(job.config);
  const auto outcome = air::run_experiment(job.config, sequence, job.out);
  const auto& m = outcome.result.matrix;
  std::printf("%s (%s, seed %llu): avg %.4f  bwt %+.4f  -> %s\n", job.config.name.c_str(),
              air::to_string(job.config.training.method).c_str(),
              static_cast<unsigned long long>(job.config.seed()), outcome.metrics.average_accuracy,
              outcome.metrics.backward_transfer, job.out.string().c_str());
  for (int k = 1; k <= m.tasks(); ++k) {
    std::printf("  after task %d:", k);
    for (int t = 1; t <= k; ++t) std::printf(" %.4f", *m.at(k, t));
    std::printf("\n");
  }
  std::fflush(stdout);
  return 0;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const air::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(air::ExitCode::kConfig);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(air::ExitCode::kData);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(air::ExitCode::kFailure);
  }
}

// Runs jobs in up to `jobs` child processes; returns the first non-zero status.
int run_all(const std::vector<Job>& all, int jobs) {
  if (jobs <= 1 || all.size() <= 1) {
    for (const auto& job : all) {
      if (int rc = guarded([&] { return run_job(job); }); rc != 0) return rc;
    }
    return 0;
  }
  int status = 0;
  std::size_t next = 0;
  int running = 0;
  while (next < all.size() || running > 0) {
    while (running < jobs && next < all.size()) {
      std::fflush(nullptr);
      const pid_t pid = ::fork();
      if (pid < 0) throw air::Error("fork failed");
      if (pid == 0) {
        const int rc = guarded([&] { return run_job(all[next]); });
        std::fflush(nullptr);
        std::_Exit(rc);
      }
      ++next;
      ++running;
    }
    int wstatus = 0;
    if (::wait(&wstatus) > 0) {
      --running;
      const int rc = WIFEXITED(wstatus) ? WEXITSTATUS(wstatus) : static_cast<int>(air::ExitCode::kFailure);
      if (status == 0) status = rc;
    }
  }
  return status;
}

std::vector<Job> expand(const std::vector<std::string>& config_paths, const std::vector<std::uint64_t>& seeds,
                        const std::string& out, const std::string& device) {
  std::vector<Job> jobs;
  const bool many = config_paths.size() > 1 || seeds.size() > 1;
  for (const auto& path : config_paths) {
    const auto base = air::load_config(path);
    const auto run_seeds = seeds.empty() ? std::vector<std::uint64_t>{base.seed()} : seeds;
    for (auto seed : run_seeds) {
      Job job{base, {}};
      job.config.training.seed = seed;
      if (!device.empty()) job.config.device = device;
      if (job.config.device != "cpu") throw air::ConfigError("--device", "only cpu is supported");
      fs::path root = !out.empty() ? fs::path(out)
                      : !base.output_dir.empty() ? fs::path(base.output_dir)
                                                 : fs::path("runs") / base.name;
      if (many) {
        if (config_paths.size() > 1) root /= base.name;
        root /= "seed_" + std::to_string(seed);
      }
      job.out = root;
      jobs.push_back(std::move(job));
    }
  }
  return jobs;
}

}  // namespace

int main(int argc, char** argv) {
  // One intra-op thread keeps reductions in a fixed order across machines' core counts.
  torch::set_num_threads(1);
  CLI::App app{"Continual adversarial defense experiments"};
  app.require_subcommand(1);

  auto* fetch = app.add_subcommand("fetch-data", "Populate the local dataset cache");
  std::string source;
  std::string cache;
  fetch->add_option("--source", source, "IDX directory, unpacked npm 'mnist' package, or http(s) URL prefix")
      ->required();
  fetch->add_option("--cache", cache, "Cache root (default: $AIR_DATA_DIR or ~/.cache/air-defense)");

  auto* run = app.add_subcommand("run", "Run experiment configs");
  std::vector<std::string> configs;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::string device;
  int jobs = 1;
  run->add_option("--config", configs, "Experiment config file(s)")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "Output directory");
  run->add_option("--seed-override", seeds, "Seed(s) replacing the config seed");
  run->add_option("--device", device, "Compute device (cpu)");
  run->add_option("--jobs", jobs, "Parallel runs as separate processes")->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "Summarize finished runs");
  std::vector<std::string> run_dirs;
  std::string report_out = "report";
  report->add_option("--runs", run_dirs, "Run directories (searched recursively)")->required();
  report->add_option("--out", report_out, "Directory for summary.csv and plots");

  auto* ablate = app.add_subcommand("ablate", "Replay ablation grid: IR only, AR only, IR+AR, full");
  std::string ablate_config;
  std::string ablate_out;
  std::vector<std::uint64_t> ablate_seeds;
  int ablate_jobs = 1;
  ablate->add_option("--config", ablate_config, "Base experiment config")->required()->check(CLI::ExistingFile);
  ablate->add_option("--out", ablate_out, "Output directory");
  ablate->add_option("--seed-override", ablate_seeds, "Seed(s) replacing the config seed");
  ablate->add_option("--device", device, "Compute device (cpu)");
  ablate->add_option("--jobs", ablate_jobs, "Parallel runs as separate processes")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(air::ExitCode::kConfig);
  }

  if (*fetch) {
    return guarded([&] {
      const fs::path root = cache.empty() ? air::default_data_root() : fs::path(cache);
      const auto count = air::fetch_mnist(source, root);
      std::printf("%lld images cached under %s\n", static_cast<long long>(count), (root / "mnist").string().c_str());
      return 0;
    });
  }

  if (*report) {
    return guarded([&] {
      std::vector<fs::path> roots(run_dirs.begin(), run_dirs.end());
      for (const auto& path : air::write_report(roots, report_out)) std::printf("wrote %s\n", path.string().c_str());
      return 0;
    });
  }

  if (*run) {
    std::vector<Job> all;
    if (int rc = guarded([&] {
          all = expand(configs, seeds, out, device);
          return 0;
        });
        rc != 0) {
      return rc;
    }
    return run_all(all, jobs);
  }

  // ablate
  std::vector<Job> all;
  if (int rc = guarded([&] {
        auto base = expand({ablate_config}, ablate_seeds, "", device);
        const struct {
          const char* name;
          bool ir, ar, reg;
        } grid[] = {{"ir_only", true, false, false},
                    {"ar_only", false, true, false},
                    {"ir_ar", true, true, false},
                    {"full", true, true, true}};
        for (const auto& job : base) {
          const fs::path root = !ablate_out.empty() ? fs::path(ablate_out) : fs::path("runs") / (job.config.name + "_ablation");
          for (const auto& variant : grid) {
            Job v = job;
            v.config.training.method = air::Method::kAir;
            v.config.training.enable_ir = variant.ir;
            v.config.training.enable_ar = variant.ar;
            v.config.training.enable_reg = variant.reg;
            v.config.name = job.config.name + "_" + variant.name;
            v.out = root / variant.name / ("seed_" + std::to_string(job.config.seed()));
            all.push_back(std::move(v));
          }
        }
        return 0;
      });
      rc != 0) {
    return rc;
  }
  return run_all(all, ablate_jobs);
}
