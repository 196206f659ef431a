#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "efm/harness.hpp"

using namespace efm;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("efm_harness_test_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("t quantiles") {
  CHECK(student_t_995(2) == doctest::Approx(9.925).epsilon(1e-3));
  CHECK(student_t_995(29) == doctest::Approx(2.756).epsilon(1e-3));
  CHECK_THROWS(student_t_995(0));
}

TEST_CASE("aggregate") {
  const double s[] = {1, 2, 3};
  const RunStats st = aggregate(s);
  CHECK(st.n == 3);
  CHECK(st.mean == doctest::Approx(2.0));
  CHECK(st.ci_half_width == doctest::Approx(5.73).epsilon(1e-3));

  std::vector<double> same(30, 0.0123);
  const RunStats c = aggregate(same);
  CHECK(c.mean == doctest::Approx(0.0123));
  CHECK(c.ci_half_width == 0.0);

  CHECK(aggregate(std::span<const double>{}).no_measurement());
  const double one[] = {0.5};
  CHECK(aggregate(one).ci_half_width == 0.0);
}

TEST_CASE("aggregate ignores run order") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 0.1);
  std::vector<double> xs(30);
  for (auto& x : xs) x = u(rng);
  const RunStats ref = aggregate(xs);
  for (int i = 0; i < 100; ++i) {
    std::shuffle(xs.begin(), xs.end(), rng);
    const RunStats st = aggregate(xs);
    CHECK(st.mean == ref.mean);
    CHECK(st.ci_half_width == ref.ci_half_width);
  }
}

TEST_CASE("config parsing") {
  const auto cfg = parse_config(R"({"scenario": "burst_loss", "repetitions": 3,
                                    "burst_sizes": [2, 8], "observer": {"block_length": null}})");
  CHECK(cfg.scenario == Scenario::BurstLoss);
  CHECK(cfg.repetitions == 3);
  CHECK(cfg.burst_sizes == std::vector<double>{2, 8});
  CHECK_FALSE(cfg.observer.block_length.has_value());
  CHECK(expand(cfg).size() == 2);

  CHECK(expand(parse_config(R"({"scenario": "random_loss"})")).size() == 4);
  CHECK(expand(parse_config(R"({"scenario": "flow_length"})")).size() == 4);

  auto rejects = [](const char* text, const char* needle) {
    try {
      parse_config(text);
      return false;
    } catch (const ConfigError& e) {
      return std::string(e.what()).find(needle) != std::string::npos;
    }
  };
  CHECK(rejects(R"({"scenario": "random_loss", "bogus": 1})", "bogus"));
  CHECK(rejects(R"({"scenario": "nope"})", "scenario"));
  CHECK(rejects(R"({})", "scenario"));
  CHECK(rejects(R"({"scenario": "random_loss", "repetitions": 0})", "repetitions"));
  CHECK(rejects(R"({"scenario": "random_loss", "loss_rates": [1.5]})", "loss_rates"));
  CHECK(rejects(R"({"scenario": "random_loss", "endpoint": {"block_length": 48}})", "block_length"));
  CHECK(rejects(R"({"scenario": "random_loss", "traffic": {"rate_pps": -1}})", "rate_pps"));
  CHECK(rejects(R"({"scenario": )", "JSON"));
}

TEST_CASE("canonical config hash is stable") {
  const auto a = parse_config(R"({"scenario": "random_loss", "loss_rates": [0.01]})");
  const auto b = parse_config(R"({"loss_rates": [0.01], "scenario": "random_loss"})");
  CHECK(canonical_config(a) == canonical_config(b));
  CHECK(fnv1a64(canonical_config(a)) == fnv1a64(canonical_config(b)));
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
}

TEST_CASE("single lossless repetition reports zero everywhere") {
  const auto cfg = parse_config(R"({"scenario": "random_loss", "loss_rates": [0],
      "repetitions": 1, "traffic": {"total_packets": 20000}})");
  const fs::path dir = scratch("lossless");
  std::ostringstream log;
  const auto res = run_experiment(cfg, dir, "test", log);
  REQUIRE(res.runs.size() == 1);
  REQUIRE(res.runs[0].ok);
  for (const auto& m : res.runs[0].mechanisms) {
    REQUIRE(m.final_report);
    CHECK(m.final_report->packets_lost_estimate == 0);
  }
  const std::string results = slurp(dir / "results.csv");
  CHECK(results.find("loss_rate,0,Q,down1,1,1,0,0,0,0,") != std::string::npos);
  CHECK(fs::exists(dir / "groundtruth.csv"));
  CHECK(fs::exists(dir / "runs.csv"));
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "timecourse-loss_rate-0-run000.csv"));
  fs::remove_all(dir);
}

TEST_CASE("identical config and seed give identical result files") {
  auto cfg = parse_config(R"({"scenario": "burst_loss", "burst_sizes": [4],
      "repetitions": 3, "traffic": {"total_packets": 20000}})");
  const fs::path a = scratch("det_a");
  const fs::path b = scratch("det_b");
  std::ostringstream log;
  run_experiment(cfg, a, "test", log);
  cfg.parallel = 3;
  run_experiment(cfg, b, "test", log);
  for (const char* f : {"results.csv", "groundtruth.csv", "runs.csv",
                        "timecourse-mean_burst-4-run002.csv"}) {
    CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f);
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("replay reproduces the live observer") {
  const auto cfg = parse_config(R"({"scenario": "random_loss", "loss_rates": [0.05]})");
  const auto points = expand(cfg);
  auto point = points[0];
  point.sim.traffic = CbrConfig{10000, 30000, 1250};
  std::ostringstream trace;
  std::ostringstream live;
  {
    TraceWriter w(trace);
    const RunOutcome o = run_once(point, 0, 0, 9, std::chrono::milliseconds(100), &w, &live);
    REQUIRE(o.ok);
  }
  std::istringstream in(trace.str());
  std::ostringstream replayed;
  const std::string text = trace.str();
  const auto lines = static_cast<std::uint64_t>(std::count(text.begin(), text.end(), '\n'));
  CHECK(replay(in, replayed) == lines - 1);
  CHECK(replayed.str() == live.str());
}

TEST_CASE("replay edge cases") {
  SUBCASE("empty trace") {
    std::istringstream in("");
    std::ostringstream out;
    CHECK(replay(in, out) == 0);
    CHECK(out.str() == std::string(kReportCsvHeader) + "\n");
  }
  SUBCASE("one full Q-block missing") {
    std::ostringstream trace;
    TraceWriter w(trace);
    std::uint64_t seq = 0;
    Nanos t{0};
    auto emit = [&](bool q, int n) {
      for (int i = 0; i < n; ++i) {
        MarkedHeader h;
        h.q = q;
        h.seq = seq++;
        h.size_bytes = 1250;
        t += Nanos(100'000);
        w.write({t, Direction::ServerToClient, h});
      }
    };
    emit(false, 64);
    seq += 64;  // the whole second block never reaches the observer
    emit(false, 64);
    emit(true, 8);
    std::istringstream in(trace.str());
    std::ostringstream out;
    replay(in, out);
    CHECK(out.str().find("S2C,Q,") != std::string::npos);
    CHECK(out.str().find(",128,0,0,") != std::string::npos);
  }
  SUBCASE("malformed line") {
    std::istringstream in(std::string(kTraceHeader) + "\n0,S2C,0,1250,0,0,0,0,0\nbroken\n");
    std::ostringstream out;
    try {
      replay(in, out);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
    }
  }
}
