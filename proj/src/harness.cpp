#include "efm/harness.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

#include "json.hpp"

#ifndef EFM_VERSION
#define EFM_VERSION "dev"
#endif

namespace efm {

using nlohmann::json;

std::string_view to_string(Scenario s) {
  switch (s) {
    case Scenario::RandomLoss: return "random_loss";
    case Scenario::BurstLoss: return "burst_loss";
    case Scenario::FlowLength: return "flow_length";
  }
  return "?";
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string describe(const json& j) { return j.dump(); }

void check_keys(const json& obj, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
    }
  }
}

template <class T>
T get_number(const json& obj, const char* key, T fallback, std::string_view where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  const std::string path = std::string(where) + "." + key;
  if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(path + ": expected a number, got " + describe(v));
    return v.get<T>();
  } else {
    if (!v.is_number_integer() || (v.is_number_integer() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(path + ": expected a non-negative integer, got " + describe(v));
    }
    return static_cast<T>(v.get<std::uint64_t>());
  }
}

template <class T>
std::vector<T> get_list(const json& obj, const char* key, std::vector<T> fallback,
                        std::string_view where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  const std::string path = std::string(where) + "." + key;
  if (!v.is_array() || v.empty()) throw ConfigError(path + ": expected a non-empty list");
  std::vector<T> out;
  for (const json& e : v) {
    if constexpr (std::is_floating_point_v<T>) {
      if (!e.is_number()) throw ConfigError(path + ": expected numbers, got " + describe(e));
    } else {
      if (!e.is_number_integer() || e.get<std::int64_t>() < 0) {
        throw ConfigError(path + ": expected non-negative integers, got " + describe(e));
      }
    }
    out.push_back(e.get<T>());
  }
  return out;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

Nanos millis(double ms) { return Nanos(static_cast<std::int64_t>(std::llround(ms * 1e6))); }

std::string file_stem(const ParameterPoint& p, std::uint32_t run) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "run%03u", run);
  return p.parameter + "-" + fmt(p.value) + "-" + buf;
}

}  // namespace

ExperimentConfig parse_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, "config",
             {"scenario", "repetitions", "base_seed", "loss_rates", "target_loss", "burst_sizes",
              "volumes_bytes", "loss_rate", "traffic", "delays_ms", "observer", "endpoint",
              "timecourse_interval_ms", "keep_traces", "parallel"});

  ExperimentConfig cfg;
  if (!j.contains("scenario") || !j["scenario"].is_string()) {
    throw ConfigError("config.scenario: required, one of random_loss, burst_loss, flow_length");
  }
  const auto scenario = j["scenario"].get<std::string>();
  if (scenario == "random_loss") {
    cfg.scenario = Scenario::RandomLoss;
  } else if (scenario == "burst_loss") {
    cfg.scenario = Scenario::BurstLoss;
  } else if (scenario == "flow_length") {
    cfg.scenario = Scenario::FlowLength;
  } else {
    throw ConfigError("config.scenario: unknown scenario '" + scenario + "'");
  }

  cfg.repetitions = get_number<std::uint32_t>(j, "repetitions", cfg.repetitions, "config");
  require(cfg.repetitions >= 1, "config.repetitions: must be at least 1");
  cfg.base_seed = get_number<std::uint64_t>(j, "base_seed", cfg.base_seed, "config");

  cfg.loss_rates = get_list<double>(j, "loss_rates", cfg.loss_rates, "config");
  for (double r : cfg.loss_rates) require(r >= 0.0 && r < 1.0, "config.loss_rates: values must be in [0, 1)");
  cfg.target_loss = get_number<double>(j, "target_loss", cfg.target_loss, "config");
  require(cfg.target_loss >= 0.0 && cfg.target_loss < 1.0, "config.target_loss: must be in [0, 1)");
  cfg.burst_sizes = get_list<double>(j, "burst_sizes", cfg.burst_sizes, "config");
  for (double b : cfg.burst_sizes) require(b >= 1.0, "config.burst_sizes: values must be >= 1");
  cfg.volumes_bytes = get_list<std::uint64_t>(j, "volumes_bytes", cfg.volumes_bytes, "config");
  for (auto v : cfg.volumes_bytes) require(v > 0, "config.volumes_bytes: values must be positive");
  cfg.loss_rate = get_number<double>(j, "loss_rate", cfg.loss_rate, "config");
  require(cfg.loss_rate >= 0.0 && cfg.loss_rate < 1.0, "config.loss_rate: must be in [0, 1)");

  if (j.contains("traffic")) {
    const json& t = j["traffic"];
    check_keys(t, "config.traffic",
               {"rate_pps", "total_packets", "packet_size", "ack_ratio", "initial_cwnd",
                "max_rate_pps", "max_ack_delay_ms"});
    cfg.cbr.rate_pps = get_number<std::uint64_t>(t, "rate_pps", cfg.cbr.rate_pps, "config.traffic");
    cfg.cbr.total_packets =
        get_number<std::uint64_t>(t, "total_packets", cfg.cbr.total_packets, "config.traffic");
    cfg.cbr.packet_size =
        get_number<std::uint32_t>(t, "packet_size", cfg.cbr.packet_size, "config.traffic");
    cfg.download.packet_size = cfg.cbr.packet_size;
    cfg.download.ack_ratio =
        get_number<std::uint32_t>(t, "ack_ratio", cfg.download.ack_ratio, "config.traffic");
    cfg.download.initial_cwnd =
        get_number<double>(t, "initial_cwnd", cfg.download.initial_cwnd, "config.traffic");
    cfg.download.max_rate_pps =
        get_number<std::uint64_t>(t, "max_rate_pps", cfg.download.max_rate_pps, "config.traffic");
    if (t.contains("max_ack_delay_ms")) {
      cfg.download.max_ack_delay = millis(get_number<double>(t, "max_ack_delay_ms", 1.0, "config.traffic"));
    }
    require(cfg.cbr.rate_pps > 0, "config.traffic.rate_pps: must be positive");
    require(cfg.cbr.total_packets > 0, "config.traffic.total_packets: must be positive");
    require(cfg.cbr.packet_size > 0, "config.traffic.packet_size: must be positive");
    require(cfg.download.ack_ratio > 0, "config.traffic.ack_ratio: must be positive");
    require(cfg.download.initial_cwnd >= kMinCwnd, "config.traffic.initial_cwnd: must be >= 2");
    require(cfg.download.max_ack_delay >= Nanos(0), "config.traffic.max_ack_delay_ms: must be >= 0");
  }

  if (j.contains("delays_ms")) {
    const json& d = j["delays_ms"];
    check_keys(d, "config.delays_ms", {"up1", "up2", "down1", "down2"});
    for (Link l : kAllLinks) {
      const std::string key(to_string(l));
      if (!d.contains(key)) continue;
      const double ms = get_number<double>(d, key.c_str(), 10.0, "config.delays_ms");
      require(ms > 0.0, "config.delays_ms." + key + ": must be positive");
      cfg.topology[l] = millis(ms);
    }
  }

  if (j.contains("observer")) {
    const json& o = j["observer"];
    check_keys(o, "config.observer", {"block_length", "threshold"});
    if (o.contains("block_length")) {
      if (o["block_length"].is_null()) {
        cfg.observer.block_length.reset();
      } else {
        cfg.observer.block_length =
            get_number<std::uint32_t>(o, "block_length", 64, "config.observer");
        require(*cfg.observer.block_length > 0, "config.observer.block_length: must be positive");
      }
    }
    cfg.observer.threshold =
        get_number<std::uint32_t>(o, "threshold", cfg.observer.threshold, "config.observer");
    require(cfg.observer.threshold > 0, "config.observer.threshold: must be positive");
  }

  if (j.contains("endpoint")) {
    const json& e = j["endpoint"];
    check_keys(e, "config.endpoint",
               {"block_length", "q_threshold", "generation_periods", "pause_periods"});
    auto& ep = cfg.endpoint;
    ep.block_length = get_number<std::uint32_t>(e, "block_length", ep.block_length, "config.endpoint");
    ep.q_threshold = get_number<std::uint32_t>(e, "q_threshold", ep.q_threshold, "config.endpoint");
    ep.t_client.generation_periods = get_number<std::uint32_t>(
        e, "generation_periods", ep.t_client.generation_periods, "config.endpoint");
    ep.t_client.pause_periods = get_number<std::uint32_t>(e, "pause_periods",
                                                          ep.t_client.pause_periods, "config.endpoint");
    require(ep.block_length > 0 && std::has_single_bit(ep.block_length),
            "config.endpoint.block_length: must be a power of two");
    require(ep.q_threshold > 0, "config.endpoint.q_threshold: must be positive");
    require(ep.t_client.generation_periods >= 2,
            "config.endpoint.generation_periods: must be at least 2");
    require(ep.t_client.pause_periods >= 1, "config.endpoint.pause_periods: must be at least 1");
  }

  if (j.contains("timecourse_interval_ms")) {
    const double ms = get_number<double>(j, "timecourse_interval_ms", 100.0, "config");
    require(ms >= 0.0, "config.timecourse_interval_ms: must be >= 0");
    cfg.timecourse_interval = millis(ms);
  }
  if (j.contains("keep_traces")) {
    require(j["keep_traces"].is_boolean(), "config.keep_traces: expected true or false");
    cfg.keep_traces = j["keep_traces"].get<bool>();
  }
  cfg.parallel = get_number<unsigned>(j, "parallel", cfg.parallel, "config");
  require(cfg.parallel >= 1, "config.parallel: must be at least 1");
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string canonical_config(const ExperimentConfig& cfg) {
  json j;
  j["scenario"] = std::string(to_string(cfg.scenario));
  j["repetitions"] = cfg.repetitions;
  j["base_seed"] = cfg.base_seed;
  switch (cfg.scenario) {
    case Scenario::RandomLoss:
      j["loss_rates"] = cfg.loss_rates;
      break;
    case Scenario::BurstLoss:
      j["target_loss"] = cfg.target_loss;
      j["burst_sizes"] = cfg.burst_sizes;
      break;
    case Scenario::FlowLength:
      j["volumes_bytes"] = cfg.volumes_bytes;
      j["loss_rate"] = cfg.loss_rate;
      break;
  }
  j["traffic"] = {{"rate_pps", cfg.cbr.rate_pps},
                  {"total_packets", cfg.cbr.total_packets},
                  {"packet_size", cfg.cbr.packet_size},
                  {"ack_ratio", cfg.download.ack_ratio},
                  {"initial_cwnd", cfg.download.initial_cwnd},
                  {"max_rate_pps", cfg.download.max_rate_pps},
                  {"max_ack_delay_ms", static_cast<double>(cfg.download.max_ack_delay.count()) / 1e6}};
  json delays;
  for (Link l : kAllLinks) {
    delays[std::string(to_string(l))] = static_cast<double>(cfg.topology[l].count()) / 1e6;
  }
  j["delays_ms"] = delays;
  j["observer"] = {{"block_length", cfg.observer.block_length ? json(*cfg.observer.block_length)
                                                              : json(nullptr)},
                   {"threshold", cfg.observer.threshold}};
  j["endpoint"] = {{"block_length", cfg.endpoint.block_length},
                   {"q_threshold", cfg.endpoint.q_threshold},
                   {"generation_periods", cfg.endpoint.t_client.generation_periods},
                   {"pause_periods", cfg.endpoint.t_client.pause_periods}};
  j["timecourse_interval_ms"] = static_cast<double>(cfg.timecourse_interval.count()) / 1e6;
  return j.dump();
}

std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<ParameterPoint> expand(const ExperimentConfig& cfg) {
  SimConfig base;
  base.topology = cfg.topology;
  base.endpoint = cfg.endpoint;
  base.observer = cfg.observer;
  base.record_drops = true;
  const auto down1 = static_cast<std::size_t>(Link::Down1);

  std::vector<ParameterPoint> points;
  switch (cfg.scenario) {
    case Scenario::RandomLoss:
      for (double rate : cfg.loss_rates) {
        ParameterPoint p{"loss_rate=" + fmt(rate), "loss_rate", rate, base};
        p.sim.traffic = cfg.cbr;
        if (rate > 0.0) p.sim.loss[down1] = RandomLoss{rate};
        points.push_back(std::move(p));
      }
      break;
    case Scenario::BurstLoss:
      for (double burst : cfg.burst_sizes) {
        ParameterPoint p{"mean_burst=" + fmt(burst), "mean_burst", burst, base};
        p.sim.traffic = cfg.cbr;
        if (cfg.target_loss > 0.0) {
          p.sim.loss[down1] = GilbertLoss{gilbert_params_for(cfg.target_loss, burst)};
        }
        points.push_back(std::move(p));
      }
      break;
    case Scenario::FlowLength:
      for (std::uint64_t volume : cfg.volumes_bytes) {
        ParameterPoint p{"volume_bytes=" + std::to_string(volume), "volume_bytes",
                         static_cast<double>(volume), base};
        DownloadConfig dl = cfg.download;
        dl.volume_bytes = volume;
        p.sim.traffic = dl;
        if (cfg.loss_rate > 0.0) p.sim.loss[down1] = RandomLoss{cfg.loss_rate};
        points.push_back(std::move(p));
      }
      break;
  }
  return points;
}

// ---------------------------------------------------------------------------

double student_t_995(std::size_t dof) {
  if (dof == 0) throw std::invalid_argument("t quantile needs at least one degree of freedom");
  boost::math::students_t_distribution<double> dist(static_cast<double>(dof));
  return boost::math::quantile(dist, 0.995);
}

RunStats aggregate(std::span<const double> samples) {
  RunStats st;
  st.n = samples.size();
  if (st.n == 0) return st;
  // Sorting first makes the floating-point sums independent of run order.
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(st.n);
  st.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / n;
  if (sorted.front() == sorted.back()) {
    st.mean = sorted.front();  // avoid rounding noise in a constant series
    return st;
  }
  double ss = 0.0;
  for (double x : sorted) ss += (x - st.mean) * (x - st.mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  st.ci_half_width = student_t_995(st.n - 1) * sd / std::sqrt(n);
  return st;
}

// ---------------------------------------------------------------------------

namespace {

std::string make_timecourse(const SimResult& r, Nanos interval) {
  const auto& drops = r.drops[static_cast<std::size_t>(Link::Down1)];
  std::ostringstream out;
  out << "time_ns,mechanism,observed,lost,rate,bytes_observed,groundtruth_dropped,groundtruth_rate\n";

  auto emit = [&](const LossReport& rep) {
    const auto it = std::upper_bound(drops.begin(), drops.end(), rep.report_time,
                                     [](Nanos t, const DropRecord& d) { return t < d.time; });
    const auto dropped = static_cast<std::uint64_t>(it - drops.begin());
    const double gt_rate =
        dropped == 0 ? 0.0 : static_cast<double>(dropped) / static_cast<double>((it - 1)->entered);
    out << rep.report_time.count() << ',' << to_string(rep.mechanism) << ','
        << rep.packets_observed << ',' << rep.packets_lost_estimate << ','
        << fmt(rep.loss_rate_estimate) << ',' << rep.bytes_observed << ',' << dropped << ','
        << fmt(gt_rate) << '\n';
  };

  std::optional<LossReport> held[4];
  auto bucket = [&](Nanos t) { return interval.count() > 0 ? t.count() / interval.count() : t.count(); };
  for (const auto& ev : r.observer.events()) {
    const auto* rep = std::get_if<LossReport>(&ev);
    if (rep == nullptr || rep->direction != Direction::ServerToClient) continue;
    auto& slot = held[static_cast<std::size_t>(rep->mechanism)];
    if (slot && bucket(slot->report_time) != bucket(rep->report_time)) emit(*slot);
    slot = *rep;
  }
  for (const auto& slot : held) {
    if (slot) emit(*slot);
  }
  return out.str();
}

}  // namespace

RunOutcome run_once(const ParameterPoint& point, std::size_t point_index, std::uint32_t run,
                    std::uint64_t seed, Nanos timecourse_interval, TraceWriter* trace,
                    std::ostream* reports) {
  RunOutcome o;
  o.point = point_index;
  o.run = run;
  o.seed = seed;
  SimConfig sim = point.sim;
  sim.seed = seed;
  try {
    const SimResult r = run_simulation(sim, trace);
    o.groundtruth = r.gt(Link::Down1);
    for (Mechanism m : kAllMechanisms) {
      const MechanismSummary s = r.observer.summary(Direction::ServerToClient, m);
      o.mechanisms.push_back(
          MechanismOutcome{m, s.final_report, s.first_report_bytes, s.first_report_time, s.measurements});
    }
    o.median_rtt = r.observer.median_rtt(Direction::ServerToClient);
    o.end_time = r.end_time;
    o.server_losses_detected = r.server.losses_detected;
    o.timecourse_csv = make_timecourse(r, timecourse_interval);
    if (reports != nullptr) write_events_csv(*reports, r.observer.events());
    o.ok = true;
  } catch (const std::exception& e) {
    o.ok = false;
    o.error = e.what();
  }
  return o;
}

// ---------------------------------------------------------------------------

void write_results_csv(std::ostream& out, const ExperimentResult& res) {
  out << "parameter,value,mechanism,scope,runs,samples,mean_rate,ci_half_width,"
         "groundtruth_mean,groundtruth_ci_half_width,mean_first_report_bytes,status\n";
  for (std::size_t pi = 0; pi < res.points.size(); ++pi) {
    const auto& p = res.points[pi];
    std::vector<double> gt;
    for (const auto& r : res.runs) {
      if (r.point == pi && r.ok) gt.push_back(r.groundtruth.rate());
    }
    const RunStats gts = aggregate(gt);
    for (Mechanism m : kAllMechanisms) {
      std::vector<double> est;
      std::vector<double> first_bytes;
      for (const auto& r : res.runs) {
        if (r.point != pi || !r.ok) continue;
        const auto& mo = r.mechanisms[static_cast<std::size_t>(m)];
        if (mo.final_report) est.push_back(mo.final_report->loss_rate_estimate);
        if (mo.first_report_bytes) first_bytes.push_back(static_cast<double>(*mo.first_report_bytes));
      }
      const RunStats st = aggregate(est);
      const RunStats fb = aggregate(first_bytes);
      out << p.parameter << ',' << fmt(p.value) << ',' << to_string(m) << ','
          << scope_label(scope_of(m), Direction::ServerToClient) << ',' << gt.size() << ',' << st.n
          << ',';
      if (st.no_measurement()) {
        out << ",,";
      } else {
        out << fmt(st.mean) << ',' << fmt(st.ci_half_width) << ',';
      }
      out << fmt(gts.mean) << ',' << fmt(gts.ci_half_width) << ',';
      if (!fb.no_measurement()) out << fmt(fb.mean);
      out << ',' << (st.no_measurement() ? "no measurement" : "ok") << '\n';
    }
  }
}

void write_groundtruth_csv(std::ostream& out, const ExperimentResult& res) {
  out << "parameter,value,run,seed,status,arbiter_in,arbiter_dropped,loss_rate,bursts,mean_burst,"
         "median_rtt_ns,end_time_ns\n";
  for (const auto& r : res.runs) {
    const auto& p = res.points[r.point];
    out << p.parameter << ',' << fmt(p.value) << ',' << r.run << ',' << r.seed << ','
        << (r.ok ? "ok" : "failed") << ',';
    if (r.ok) {
      const auto& g = r.groundtruth;
      out << g.arbiter_in << ',' << g.arbiter_dropped << ',' << fmt(g.rate()) << ',' << g.bursts
          << ',' << fmt(g.mean_burst()) << ',';
      if (r.median_rtt) out << r.median_rtt->count();
      out << ',' << r.end_time.count();
    } else {
      out << ",,,,,,";
    }
    out << '\n';
  }
}

void write_runs_csv(std::ostream& out, const ExperimentResult& res) {
  out << "parameter,value,run,seed,mechanism,observed,lost,rate,measurements,first_report_ns,"
         "first_report_bytes,groundtruth_rate\n";
  for (const auto& r : res.runs) {
    if (!r.ok) continue;
    const auto& p = res.points[r.point];
    for (const auto& mo : r.mechanisms) {
      out << p.parameter << ',' << fmt(p.value) << ',' << r.run << ',' << r.seed << ','
          << to_string(mo.mechanism) << ',';
      if (mo.final_report) {
        out << mo.final_report->packets_observed << ',' << mo.final_report->packets_lost_estimate
            << ',' << fmt(mo.final_report->loss_rate_estimate);
      } else {
        out << ",,";
      }
      out << ',' << mo.measurements << ',';
      if (mo.first_report_time) out << mo.first_report_time->count();
      out << ',';
      if (mo.first_report_bytes) out << *mo.first_report_bytes;
      out << ',' << fmt(r.groundtruth.rate()) << '\n';
    }
  }
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

template <class F>
void write_file_with(const std::filesystem::path& path, F&& fill) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  fill(out);
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                std::string_view command, std::ostream& log) {
  std::filesystem::create_directories(out_dir);
  ExperimentResult res;
  res.points = expand(cfg);

  struct Job {
    std::size_t point;
    std::uint32_t run;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t pi = 0; pi < res.points.size(); ++pi) {
    for (std::uint32_t i = 0; i < cfg.repetitions; ++i) jobs.push_back({pi, i, cfg.base_seed + i});
  }
  res.runs.resize(jobs.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < jobs.size(); k = next++) {
      const Job& job = jobs[k];
      const ParameterPoint& p = res.points[job.point];
      if (cfg.keep_traces) {
        const std::string stem = file_stem(p, job.run);
        std::ofstream trace_out(out_dir / ("trace-" + stem + ".csv"), std::ios::binary);
        std::ofstream report_out(out_dir / ("reports-" + stem + ".csv"), std::ios::binary);
        TraceWriter writer(trace_out);
        res.runs[k] = run_once(p, job.point, job.run, job.seed, cfg.timecourse_interval, &writer,
                               &report_out);
      } else {
        res.runs[k] = run_once(p, job.point, job.run, job.seed, cfg.timecourse_interval);
      }
    }
  };
  const unsigned n_threads =
      static_cast<unsigned>(std::min<std::size_t>(std::max(1u, cfg.parallel), jobs.size()));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  json failed = json::array();
  for (auto& r : res.runs) {
    const auto& p = res.points[r.point];
    if (!r.ok) {
      log << "warning: " << p.label << " run " << r.run << " (seed " << r.seed
          << ") failed and is excluded: " << r.error << '\n';
      failed.push_back({{"point", p.label}, {"run", r.run}, {"seed", r.seed}, {"error", r.error}});
      continue;
    }
    write_file(out_dir / ("timecourse-" + file_stem(p, r.run) + ".csv"), r.timecourse_csv);
    r.timecourse_csv.clear();
    r.timecourse_csv.shrink_to_fit();
  }

  write_file_with(out_dir / "results.csv", [&](std::ostream& o) { write_results_csv(o, res); });
  write_file_with(out_dir / "groundtruth.csv", [&](std::ostream& o) { write_groundtruth_csv(o, res); });
  write_file_with(out_dir / "runs.csv", [&](std::ostream& o) { write_runs_csv(o, res); });

  const std::string canon = canonical_config(cfg);
  char hash[24];
  std::snprintf(hash, sizeof hash, "%016" PRIx64, fnv1a64(canon));
  json points = json::array();
  for (std::size_t pi = 0; pi < res.points.size(); ++pi) {
    json seeds = json::array();
    for (const auto& r : res.runs) {
      if (r.point == pi) seeds.push_back(r.seed);
    }
    points.push_back({{"label", res.points[pi].label}, {"seeds", seeds}});
  }
  json manifest = {{"tool", "efmsim"},
                   {"version", EFM_VERSION},
                   {"command", std::string(command)},
                   {"scenario", std::string(to_string(cfg.scenario))},
                   {"config_hash", hash},
                   {"config", json::parse(canon)},
                   {"base_seed", cfg.base_seed},
                   {"repetitions", cfg.repetitions},
                   {"keep_traces", cfg.keep_traces},
                   {"points", points},
                   {"failed_runs", failed}};
  write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");

  for (std::size_t pi = 0; pi < res.points.size(); ++pi) {
    std::size_t ok = 0;
    for (const auto& r : res.runs) ok += (r.point == pi && r.ok) ? 1 : 0;
    log << res.points[pi].label << ": " << ok << "/" << cfg.repetitions << " runs ok\n";
  }
  return res;
}

std::uint64_t replay(std::istream& trace, std::ostream& reports, const ObserverConfig& cfg) {
  Observer obs(cfg);
  std::uint64_t n = 0;
  read_trace(trace, [&](const TraceRecord& rec) {
    obs.ingest(rec);
    ++n;
  });
  write_events_csv(reports, obs.events());
  return n;
}

}  // namespace efm
