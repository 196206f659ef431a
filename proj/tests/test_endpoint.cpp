#include <cmath>
#include <deque>
#include <random>

#include "doctest.h"
#include "efm/endpoint.hpp"

using namespace efm;
using std::chrono::milliseconds;

TEST_CASE("spin reflection and flipping") {
  SpinState server(Role::Server);
  server.on_receive(true);
  CHECK(server.outgoing() == true);
  server.on_receive(false);
  CHECK(server.outgoing() == false);

  SpinState client(Role::Client);
  CHECK(client.outgoing() == false);
  client.on_receive(false);  // caught up with its own value
  CHECK(client.outgoing() == true);
  client.on_receive(false);  // still the old value in flight
  CHECK(client.outgoing() == true);
  CHECK(client.on_receive(true));
  CHECK(client.outgoing() == false);
}

TEST_CASE("L marks equal detected losses") {
  std::mt19937_64 rng(2024);
  for (int schedule = 0; schedule < 1000; ++schedule) {
    LState l;
    std::uint64_t detected = 0;
    std::uint64_t marks = 0;
    const int events = 1 + static_cast<int>(rng() % 200);
    for (int i = 0; i < events; ++i) {
      if (rng() % 4 == 0) {
        const std::uint64_t n = rng() % 5;
        l.on_loss_detected(n);
        detected += n;
      }
      marks += l.next_mark() ? 1 : 0;
      CHECK(marks + l.counter() == detected);
    }
    // Drain the backlog.
    while (l.counter() > 0) marks += l.next_mark() ? 1 : 0;
    CHECK(marks == detected);
    CHECK_FALSE(l.next_mark());
  }
}

TEST_CASE("Q square wave") {
  SUBCASE("n = 64 over a million packets") {
    QState q(64);
    bool level = false;
    std::uint64_t run = 0;
    std::uint64_t runs = 0;
    for (int i = 0; i < 1'000'000; ++i) {
      const bool m = q.next_mark();
      if (i < 64) CHECK_FALSE(m);
      if (m == level) {
        ++run;
      } else {
        CHECK(run == 64);
        ++runs;
        level = m;
        run = 1;
      }
    }
    CHECK(runs + 1 == 1'000'000 / 64);  // the last run never closes
  }
  SUBCASE("n = 1 alternates") {
    QState q(1);
    for (int i = 0; i < 100; ++i) CHECK(q.next_mark() == (i % 2 == 1));
  }
  CHECK_THROWS_AS(QState(48), std::invalid_argument);
  CHECK_THROWS_AS(QState(0), std::invalid_argument);
}

namespace {

// Straightforward restatement of the R marking rule with doubles and explicit
// lists, used as an oracle.
struct RReference {
  bool level = false;
  bool active = false;
  std::vector<std::uint64_t> since_start;
  std::int64_t remaining = 0;
  std::uint64_t marked = 0;
  std::optional<std::uint64_t> pending;

  void start(std::uint64_t count) {
    level = !level;
    since_start = {count};
    marked = 0;
    remaining = static_cast<std::int64_t>(count);
    active = count > 0;
    pending.reset();
  }
  void complete(std::uint64_t count) {
    if (!active) {
      start(count);
      return;
    }
    since_start.push_back(count);
    pending = count;
    double sum = 0;
    for (auto c : since_start) sum += static_cast<double>(c);
    const auto avg = static_cast<std::int64_t>(std::floor(sum / static_cast<double>(since_start.size()) + 0.5));
    remaining = std::max<std::int64_t>(0, avg - static_cast<std::int64_t>(marked));
    if (remaining == 0) end();
  }
  void end() {
    active = false;
    if (pending) start(*pending);
  }
  bool mark() {
    if (!active) return level;
    const bool m = level;
    ++marked;
    if (--remaining == 0) end();
    return m;
  }
};

}  // namespace

TEST_CASE("R re-targets to the average since the block started") {
  RState r;
  r.on_qblock_complete(64);
  CHECK(r.current_level() == true);
  for (int i = 0; i < 10; ++i) CHECK(r.next_mark());
  r.on_qblock_complete(64);
  r.on_qblock_complete(60);
  CHECK(r.qblocks_since_r_start() == 3);
  CHECK(r.marking_target() == 53);
  for (int i = 0; i < 53; ++i) CHECK(r.next_mark());
  // The pending 60 starts the next block immediately.
  CHECK(r.current_level() == false);
  CHECK(r.marking_target() == 60);
}

TEST_CASE("R idles without a pending block") {
  RState r;
  r.on_qblock_complete(4);
  for (int i = 0; i < 4; ++i) CHECK(r.next_mark());
  CHECK_FALSE(r.in_progress());
  for (int i = 0; i < 10; ++i) CHECK(r.next_mark());  // level holds
  r.on_qblock_complete(4);
  CHECK_FALSE(r.next_mark());
}

TEST_CASE("R matches the reference under random schedules") {
  std::mt19937_64 rng(7);
  for (int schedule = 0; schedule < 200; ++schedule) {
    RState r;
    RReference ref;
    for (int step = 0; step < 2000; ++step) {
      if (rng() % 50 == 0) {
        const std::uint64_t count = 40 + rng() % 40;
        r.on_qblock_complete(count);
        ref.complete(count);
      }
      REQUIRE(r.next_mark() == ref.mark());
    }
  }
}

TEST_CASE("R via incoming Q wave") {
  QState q(64);
  RState r;
  std::vector<bool> out;
  for (int i = 0; i < 64 * 6; ++i) {
    r.on_receive(q.next_mark());
    out.push_back(r.next_mark());
  }
  // Idle until the first block is committed on the eighth opposite mark,
  // then runs of exactly 64.
  std::vector<std::uint64_t> runs;
  bool level = out.front();
  std::uint64_t len = 0;
  for (bool b : out) {
    if (b == level) {
      ++len;
    } else {
      runs.push_back(len);
      level = b;
      len = 1;
    }
  }
  REQUIRE(runs.size() >= 3);
  CHECK(runs[0] == 71);
  for (std::size_t i = 1; i < runs.size(); ++i) CHECK(runs[i] == 64);
}

TEST_CASE("T server reflects what it received") {
  TServerState s;
  for (int i = 0; i < 95; ++i) s.on_receive(true);
  s.on_receive(false);
  std::uint64_t emitted = 0;
  for (int i = 0; i < 200; ++i) {
    emitted += s.next_mark() ? 1 : 0;
    CHECK(s.emitted() <= s.received());
    CHECK(s.emitted() + s.credit() == s.received());
  }
  CHECK(emitted == 95);
}

namespace {

// Client talking to an ideal reflecting server over a fixed-delay path. The
// client sends every millisecond and sees a spin edge every `rtt`.
struct TLoop {
  TClientState client;
  Nanos rtt = milliseconds(40);
  std::deque<std::pair<Nanos, bool>> in_flight;  // arrival time, marked
  std::uint64_t drop_reflected = 0;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> cycles;  // generated, budget

  void run(Nanos until) {
    std::uint64_t generated = 0;
    TPhase last = client.phase();
    for (Nanos now{0}; now < until; now += milliseconds(1)) {
      const bool edge = now.count() > 0 && now.count() % rtt.count() == 0;
      bool marked = false;
      while (!in_flight.empty() && in_flight.front().first <= now) {
        marked = marked || in_flight.front().second;
        if (in_flight.front().second) {
          if (drop_reflected > 0) {
            --drop_reflected;
          } else {
            client.on_receive(now, true, false);
          }
        }
        in_flight.pop_front();
      }
      if (!marked) client.on_receive(now, false, edge);
      if (marked && edge) client.on_receive(now, false, true);
      const bool m = client.next_mark(now);
      if (client.phase() != last) {
        if (client.phase() == TPhase::Reflection) cycles.push_back({generated, client.reflection_budget()});
        if (client.phase() == TPhase::Generation) generated = 0;
        last = client.phase();
      }
      if (client.phase() == TPhase::Generation && m) ++generated;
      // An ideal server reflects each mark one RTT later.
      if (m) in_flight.push_back({now + rtt, true});
    }
  }
};

}  // namespace

TEST_CASE("T client reflects what came back") {
  SUBCASE("lossless") {
    TLoop loop;
    loop.run(milliseconds(3000));
    REQUIRE(loop.cycles.size() >= 3);
    for (auto [generated, budget] : loop.cycles) {
      CHECK(generated >= 80);  // two periods at one packet per ms
      CHECK(budget == generated);
    }
    CHECK(loop.client.faulty_cycles() == 0);
  }
  SUBCASE("three reflected marks lost") {
    TLoop loop;
    loop.drop_reflected = 3;
    loop.run(milliseconds(1000));
    REQUIRE(!loop.cycles.empty());
    CHECK(loop.cycles[0].second == loop.cycles[0].first - 3);
  }
  SUBCASE("nothing reflected") {
    TClientState c;
    Nanos now{0};
    std::uint64_t cycles_seen = 0;
    for (int i = 0; i < 2000; ++i, now += milliseconds(1)) {
      c.on_receive(now, false, i > 0 && i % 40 == 0);
      const bool m = c.next_mark(now);
      if (c.phase() == TPhase::Reflection) CHECK_FALSE(m);
      cycles_seen = c.cycles();
    }
    CHECK(cycles_seen >= 2);
    CHECK(c.reflection_sent() == 0);
  }
  CHECK_THROWS_AS(TClientState(TClientConfig{0, 1}), std::invalid_argument);
}

TEST_CASE("ack frames carry redundant ranges") {
  ReceiveTracker t(3);
  for (std::uint64_t s : {0, 1, 2, 4, 5}) t.on_packet(s);
  AckFrame a = t.make_ack();
  REQUIRE(a.ranges.size() == 2);
  CHECK(a.ranges[0] == SeqRange{0, 2});
  CHECK(a.ranges[1] == SeqRange{4, 5});
  t.on_packet(3);  // late arrival fills the gap
  a = t.make_ack();
  REQUIRE(a.ranges.size() == 1);
  CHECK(a.ranges[0] == SeqRange{0, 5});
  t.on_packet(6);
  a = t.make_ack();
  CHECK(a.largest() == 6);
  t.on_packet(7);
  a = t.make_ack();
  // The floor from three acks ago (5) is trimmed away.
  REQUIRE(a.ranges.size() == 1);
  CHECK(a.ranges[0].first <= 6);
  CHECK(a.ranges[0].last == 7);
}

TEST_CASE("loss detection") {
  SUBCASE("packet threshold") {
    LossDetector d;
    for (std::uint64_t s = 0; s < 14; ++s) d.on_sent(s, milliseconds(s), false);
    AckFrame ack{{{0, 9}, {11, 13}}};
    const auto out = d.on_ack(ack, milliseconds(50));
    REQUIRE(out.newly_lost.size() == 1);
    CHECK(out.newly_lost[0].seq == 10);
    CHECK(d.total_lost() == 1);
  }
  SUBCASE("not yet: only two later packets acked") {
    LossDetector d;
    for (std::uint64_t s = 0; s < 13; ++s) d.on_sent(s, milliseconds(40), false);
    AckFrame ack{{{0, 9}, {11, 12}}};
    CHECK(d.on_ack(ack, milliseconds(80)).newly_lost.empty());
    // srtt is 40 ms now; the time threshold fires at 40 + 45 ms.
    REQUIRE(d.loss_time().has_value());
    CHECK(*d.loss_time() == milliseconds(85));
    CHECK(d.detect_losses(milliseconds(84)).empty());
    CHECK(d.detect_losses(milliseconds(85)).size() == 1);
  }
  SUBCASE("a 64-packet burst is counted packet by packet") {
    LossDetector d;
    for (std::uint64_t s = 0; s < 100; ++s) d.on_sent(s, milliseconds(s), false);
    AckFrame ack{{{0, 19}, {84, 99}}};
    CHECK(d.on_ack(ack, milliseconds(150)).newly_lost.size() == 64);
  }
  SUBCASE("timeout covers data only") {
    LossDetector d;
    d.on_sent(0, milliseconds(0), false);
    CHECK_FALSE(d.timeout_time().has_value());
    d.on_sent(1, milliseconds(1), true);
    REQUIRE(d.timeout_time().has_value());
    CHECK(*d.timeout_time() == milliseconds(201));
    CHECK(d.on_timeout(milliseconds(200)).empty());
    const auto lost = d.on_timeout(milliseconds(201));
    REQUIRE(lost.size() == 1);
    CHECK(lost[0].seq == 1);
  }
}

TEST_CASE("marking endpoint feeds detected losses into L") {
  EndpointConfig cfg;
  MarkingEndpoint sender(Role::Server, cfg);
  for (int i = 0; i < 10; ++i) sender.stamp(milliseconds(i), 1250, false);
  MarkedHeader peer;
  peer.seq = 0;
  AckFrame ack{{{0, 3}, {5, 9}}};
  const auto out = sender.on_receive(milliseconds(50), peer, &ack);
  CHECK(out.newly_lost.size() == 1);
  CHECK(sender.l().counter() == 1);
  CHECK(sender.stamp(milliseconds(51), 1250, false).l);
  CHECK_FALSE(sender.stamp(milliseconds(52), 1250, false).l);
  CHECK(sender.log().losses_detected == 1);
  CHECK(sender.log().l_marks_sent == 1);
}
