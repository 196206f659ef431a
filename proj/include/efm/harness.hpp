#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "efm/netsim.hpp"

namespace efm {

enum class Scenario : std::uint8_t { RandomLoss, BurstLoss, FlowLength };

std::string_view to_string(Scenario s);

/// Parsed experiment description. See README.md for the file schema.
struct ExperimentConfig {
  Scenario scenario = Scenario::RandomLoss;
  std::uint32_t repetitions = 30;
  std::uint64_t base_seed = 1;

  std::vector<double> loss_rates = {0.0001, 0.001, 0.01, 0.1};
  double target_loss = 0.01;
  std::vector<double> burst_sizes = {2, 4, 8, 16};
  std::vector<std::uint64_t> volumes_bytes = {50'000, 500'000, 5'000'000, 50'000'000};
  double loss_rate = 0.01;

  CbrConfig cbr;
  DownloadConfig download;
  Topology topology;
  EndpointConfig endpoint;
  ObserverConfig observer;

  Nanos timecourse_interval = std::chrono::milliseconds(100);
  bool keep_traces = false;
  unsigned parallel = 1;
};

/// Throws ConfigError with the offending key on invalid input.
ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON of a config; its hash identifies a result set.
std::string canonical_config(const ExperimentConfig& cfg);
std::uint64_t fnv1a64(std::string_view data);

/// One value of the swept parameter.
struct ParameterPoint {
  std::string label;      // e.g. "loss=0.01"
  std::string parameter;  // "loss_rate", "mean_burst", "volume_bytes"
  double value = 0.0;
  SimConfig sim;          // seed filled in per run
};

std::vector<ParameterPoint> expand(const ExperimentConfig& cfg);

struct RunStats {
  std::size_t n = 0;
  double mean = 0.0;
  /// t(0.995, n-1) * s / sqrt(n); zero for n <= 1.
  double ci_half_width = 0.0;
  bool no_measurement() const { return n == 0; }
};

/// Two-sided 99% Student-t quantile, t(0.995, dof).
double student_t_995(std::size_t dof);
RunStats aggregate(std::span<const double> samples);

struct MechanismOutcome {
  Mechanism mechanism = Mechanism::L;
  std::optional<LossReport> final_report;
  std::optional<std::uint64_t> first_report_bytes;
  std::optional<Nanos> first_report_time;
  std::uint64_t measurements = 0;
};

/// Per-run result; everything the output files need, nothing more.
struct RunOutcome {
  std::size_t point = 0;
  std::uint32_t run = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  Groundtruth groundtruth;  // loss link (Down1)
  std::vector<MechanismOutcome> mechanisms;
  std::optional<Nanos> median_rtt;
  Nanos end_time{0};
  std::uint64_t server_losses_detected = 0;
  std::string timecourse_csv;
};

/// Runs one repetition. With `trace` the observed records are written to it.
RunOutcome run_once(const ParameterPoint& point, std::size_t point_index, std::uint32_t run,
                    std::uint64_t seed, Nanos timecourse_interval, TraceWriter* trace = nullptr,
                    std::ostream* reports = nullptr);

struct ExperimentResult {
  std::vector<ParameterPoint> points;
  std::vector<RunOutcome> runs;  // point-major, run order
};

/// Runs every repetition of every point (in parallel when configured) and
/// writes results.csv, groundtruth.csv, runs.csv, timecourse-*.csv and
/// manifest.json into `out_dir`. Failed runs are recorded and excluded.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                std::string_view command, std::ostream& log);

void write_results_csv(std::ostream& out, const ExperimentResult& res);
void write_groundtruth_csv(std::ostream& out, const ExperimentResult& res);
void write_runs_csv(std::ostream& out, const ExperimentResult& res);

/// Observer over a stored trace; returns the number of records read.
std::uint64_t replay(std::istream& trace, std::ostream& reports, const ObserverConfig& cfg = {});

}  // namespace efm
