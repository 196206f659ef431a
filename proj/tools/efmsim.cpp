#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "efm/harness.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "results";
  bool keep_traces = false;
  std::optional<unsigned> parallel;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "base seed; run i uses seed + i");
  sub->add_option("--out", c.out, "output directory")->capture_default_str();
  sub->add_flag("--keep-traces", c.keep_traces, "write per-run observer traces and reports");
  sub->add_option("--parallel", c.parallel, "worker threads")->check(CLI::PositiveNumber);
}

int experiment(const Common& c, bool single_point, const std::string& command) {
  efm::ExperimentConfig cfg = efm::load_config(c.config);
  if (c.seed) cfg.base_seed = *c.seed;
  if (c.keep_traces) cfg.keep_traces = true;
  if (c.parallel) cfg.parallel = *c.parallel;
  const auto points = efm::expand(cfg);
  if (single_point && points.size() != 1) {
    std::cerr << "error: config defines " << points.size()
              << " parameter points; use 'sweep' or reduce the list to one value\n";
    return 2;
  }
  efm::run_experiment(cfg, c.out, command, std::cerr);
  std::cerr << "results in " << c.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Explicit flow measurement testbed"};
  app.require_subcommand(1);

  Common run_opts;
  Common sweep_opts;
  auto* run = app.add_subcommand("run", "run all repetitions of a single parameter point");
  add_common(run, run_opts);
  auto* sweep = app.add_subcommand("sweep", "run every parameter point of a scenario");
  add_common(sweep, sweep_opts);

  std::string trace_path;
  std::string replay_out;
  std::uint32_t block_length = 64;
  std::uint32_t threshold = 8;
  auto* replay = app.add_subcommand("replay", "run the observer over a stored trace");
  replay->add_option("trace", trace_path, "trace file")->required()->check(CLI::ExistingFile);
  replay->add_option("--out", replay_out, "report CSV (default stdout)");
  replay->add_option("--block-length", block_length, "Q block length, 0 to deduce")
      ->capture_default_str();
  replay->add_option("--threshold", threshold, "phase change threshold")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  std::string command;
  for (int i = 0; i < argc; ++i) command += (i ? " " : "") + std::string(argv[i]);

  try {
    if (*run) return experiment(run_opts, true, command);
    if (*sweep) return experiment(sweep_opts, false, command);

    efm::ObserverConfig cfg;
    if (block_length == 0) {
      cfg.block_length.reset();
    } else {
      cfg.block_length = block_length;
    }
    cfg.threshold = threshold;
    std::ifstream in(trace_path, std::ios::binary);
    if (replay_out.empty()) {
      efm::replay(in, std::cout, cfg);
    } else {
      std::ofstream out(replay_out, std::ios::binary);
      if (!out) {
        std::cerr << "error: cannot write " << replay_out << "\n";
        return 1;
      }
      efm::replay(in, out, cfg);
    }
    return 0;
  } catch (const efm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const efm::ParseError& e) {
    std::cerr << "trace error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
