#include <random>
#include <sstream>

#include "doctest.h"
#include "efm/core.hpp"
#include "efm/phase_detector.hpp"

using namespace efm;

namespace {

TraceRecord random_record(std::mt19937_64& rng, Nanos t) {
  std::bernoulli_distribution bit(0.5);
  TraceRecord r;
  r.observe_time = t;
  r.direction = bit(rng) ? Direction::ClientToServer : Direction::ServerToClient;
  r.header.spin = bit(rng);
  r.header.l = bit(rng);
  r.header.q = bit(rng);
  r.header.r = bit(rng);
  r.header.t = bit(rng);
  r.header.seq = rng();
  r.header.size_bytes = static_cast<std::uint32_t>(rng());
  return r;
}

}  // namespace

TEST_CASE("record encoding") {
  TraceRecord r;
  r.observe_time = Nanos(10'000'000);
  r.direction = Direction::ServerToClient;
  r.header = MarkedHeader{true, false, true, false, true, 42, 1250};
  CHECK(encode_record(r) == "10000000,S2C,42,1250,1,0,1,0,1");
  CHECK(decode_record("10000000,S2C,42,1250,1,0,1,0,1") == r);
}

TEST_CASE("round trip holds for random records") {
  std::mt19937_64 rng(99);
  std::vector<TraceRecord> recs;
  Nanos t{0};
  for (int i = 0; i < 1000; ++i) {
    t += Nanos(rng() % 1'000'000);
    recs.push_back(random_record(rng, t));
  }
  std::stringstream ss;
  {
    TraceWriter w(ss);
    for (const auto& r : recs) w.write(r);
  }
  CHECK(read_trace(ss) == recs);
  for (const auto& r : recs) CHECK(decode_record(encode_record(r)) == r);
}

TEST_CASE("malformed lines report line and field") {
  CHECK_THROWS_AS(decode_record("0,C2S,0,1250,0,0,0,0"), ParseError);
  CHECK_THROWS_AS(decode_record("0,C2S,0,1250,0,0,0,0,0,0"), ParseError);
  CHECK_THROWS_AS(decode_record("0,XYZ,0,1250,0,0,0,0,0"), ParseError);
  CHECK_THROWS_AS(decode_record("0,C2S,0,1250,2,0,0,0,0"), ParseError);
  CHECK_THROWS_AS(decode_record("-5,C2S,0,1250,0,0,0,0,0"), ParseError);
  CHECK_THROWS_AS(decode_record("0,C2S,abc,1250,0,0,0,0,0"), ParseError);

  std::stringstream ss;
  ss << kTraceHeader << "\n0,C2S,0,1250,0,0,0,0,0\n1,C2S,1,1250,0,0,7,0,0\n";
  try {
    read_trace(ss);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
    CHECK(e.field() == "q");
  }
}

TEST_CASE("trace reader rules") {
  SUBCASE("empty file has no records") {
    std::stringstream ss;
    CHECK(read_trace(ss).empty());
  }
  SUBCASE("header only") {
    std::stringstream ss;
    ss << kTraceHeader << "\n";
    CHECK(read_trace(ss).empty());
  }
  SUBCASE("missing header") {
    std::stringstream ss;
    ss << "0,C2S,0,1250,0,0,0,0,0\n";
    CHECK_THROWS_AS(read_trace(ss), ParseError);
  }
  SUBCASE("time going backwards") {
    std::stringstream ss;
    ss << kTraceHeader << "\n5,C2S,0,1250,0,0,0,0,0\n4,C2S,1,1250,0,0,0,0,0\n";
    CHECK_THROWS_AS(read_trace(ss), ParseError);
  }
  SUBCASE("writer refuses backwards time") {
    std::stringstream ss;
    TraceWriter w(ss);
    TraceRecord r;
    r.observe_time = Nanos(5);
    w.write(r);
    r.observe_time = Nanos(4);
    CHECK_THROWS_AS(w.write(r), std::logic_error);
  }
}

TEST_CASE("phase detector") {
  QPhaseDetector d(8);
  std::vector<PhaseRun> runs;
  auto feed = [&](bool v, int n) {
    for (int i = 0; i < n; ++i) {
      if (auto r = d.push(v)) runs.push_back(*r);
    }
  };
  feed(false, 64);
  feed(true, 64);
  feed(false, 8);
  REQUIRE(runs.size() == 2);
  CHECK(runs[0] == PhaseRun{false, 64});
  CHECK(runs[1] == PhaseRun{true, 64});

  SUBCASE("stray values stay in the current phase") {
    QPhaseDetector s(8);
    std::vector<PhaseRun> out;
    auto push = [&](bool v) {
      if (auto r = s.push(v)) out.push_back(*r);
    };
    for (int i = 0; i < 30; ++i) push(false);
    push(true);  // reordered straggler
    for (int i = 0; i < 33; ++i) push(false);
    for (int i = 0; i < 8; ++i) push(true);
    REQUIRE(out.size() == 1);
    CHECK(out[0].length == 64);
  }
  CHECK_THROWS_AS(QPhaseDetector(0), std::invalid_argument);
}
