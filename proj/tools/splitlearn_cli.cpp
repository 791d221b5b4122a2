// splitlearn run | report | compare
//
// Exit codes: 0 success, 1 at least one failed cell, 2 configuration or input error.

#include <CLI11.hpp>

#include <iostream>

#include "splitlearn/splitlearn.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kCellFailed = 1;
constexpr int kConfigError = 2;

int run(const std::string& config_path, std::size_t parallel, bool resume) {
  const splitlearn::ExperimentConfig cfg = splitlearn::load_config(config_path);
  splitlearn::SweepOptions options;
  options.parallel = parallel;
  options.resume = resume;
  options.progress = [](const std::string& line) { std::cerr << line << "\n"; };
  const auto result = splitlearn::run_sweep(cfg, options);
  std::cout << "output: " << result.dir.string() << "\ncells: " << result.records.size() << " (executed " << result.executed << ", reused "
            << result.reused << ", failed " << result.failed << ")\n\n";
  std::ifstream report(result.dir / "report.txt");
  std::cout << report.rdbuf();
  return result.failed == 0 ? kOk : kCellFailed;
}

int report(const std::string& dir) {
  std::cout << splitlearn::emit_report(splitlearn::load_results_csv(std::filesystem::path(dir) / "results.csv"));
  return kOk;
}

int compare(const std::string& dir, std::size_t clients) {
  const auto records = splitlearn::load_results_csv(std::filesystem::path(dir) / "results.csv");
  std::cout << splitlearn::format_comparison(splitlearn::compare_modes(records, clients)) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Split learning experiments on synthetic image data"};
  app.require_subcommand(1);

  std::string config_path;
  std::size_t parallel = 1;
  bool resume = false;
  auto* run_cmd = app.add_subcommand("run", "Run a sweep described by a key=value config file");
  run_cmd->add_option("--config", config_path, "Config file")->required();
  run_cmd->add_option("--parallel", parallel, "Cells to run at once")->check(CLI::PositiveNumber);
  run_cmd->add_flag("--resume", resume, "Skip cells already finished in the output directory");

  std::string dir;
  auto* report_cmd = app.add_subcommand("report", "Print the results table of a finished sweep");
  report_cmd->add_option("--dir", dir, "Sweep output directory")->required();

  std::size_t clients = 0;
  auto* compare_cmd = app.add_subcommand("compare", "Welch t-test of split vs non-collaborative at one client count");
  compare_cmd->add_option("--dir", dir, "Sweep output directory")->required();
  compare_cmd->add_option("--clients", clients, "Number of clients")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run_cmd) return run(config_path, parallel, resume);
    if (*report_cmd) return report(dir);
    return compare(dir, clients);
  } catch (const splitlearn::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  }
}
