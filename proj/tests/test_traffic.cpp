#include "doctest.h"
#include "efm/traffic.hpp"

using namespace efm;
using std::chrono::milliseconds;

TEST_CASE("CBR schedule") {
  CbrConfig cfg{1000, 5, 1250};
  for (std::uint64_t i = 0; i < 5; ++i) CHECK(*cbr_next_send(cfg, i) == milliseconds(i));
  CHECK_FALSE(cbr_next_send(cfg, 5).has_value());
  CHECK(*cbr_next_send(cfg, 2, milliseconds(7)) == milliseconds(9));

  CbrConfig defaults;
  CHECK(defaults.total_packets == 1'000'000);
  const Nanos last = *cbr_next_send(defaults, defaults.total_packets - 1);
  CHECK(last + Nanos(1'000'000'000 / defaults.rate_pps) == std::chrono::seconds(100));

  CbrConfig odd{3, 4, 1250};
  CHECK(cbr_next_send(odd, 1)->count() == 333'333'333);
  CHECK(cbr_next_send(odd, 3)->count() == 1'000'000'000);
}

TEST_CASE("New Reno") {
  NewRenoState st;
  for (int i = 0; i < 10; ++i) cc_on_sent(st);
  for (int i = 0; i < 10; ++i) cc_on_ack(st);
  CHECK(st.cwnd == doctest::Approx(20.0));
  CHECK(st.in_flight == 0);

  NewRenoState big;
  big.cwnd = 16;
  for (int i = 0; i < 16; ++i) cc_on_sent(big);
  cc_on_loss(big, 1, milliseconds(5), milliseconds(50));
  CHECK(big.ssthresh == doctest::Approx(8.0));
  CHECK(big.cwnd == doctest::Approx(8.0));
  CHECK(big.mode == CcMode::CongestionAvoidance);
  // A second loss from the same flight does not halve again.
  cc_on_loss(big, 1, milliseconds(6), milliseconds(51));
  CHECK(big.cwnd == doctest::Approx(8.0));
  // Congestion avoidance grows by 1/cwnd per ack.
  cc_on_ack(big);
  CHECK(big.cwnd == doctest::Approx(8.125));

  NewRenoState tiny;
  tiny.cwnd = 3;
  cc_on_loss(tiny, 1, milliseconds(1), milliseconds(2));
  CHECK(tiny.cwnd == doctest::Approx(kMinCwnd));

  NewRenoState grow;
  double last = grow.cwnd;
  for (int i = 0; i < 1000; ++i) {
    cc_on_sent(grow);
    cc_on_ack(grow);
    CHECK(grow.cwnd >= last);
    last = grow.cwnd;
  }
}

TEST_CASE("download sizes") {
  DownloadConfig small;
  small.volume_bytes = 50'000;
  CHECK(data_packets(small) == 40);
  DownloadConfig large;
  large.volume_bytes = 50'000'000;
  CHECK(data_packets(large) == 40'000);
  DownloadConfig partial;
  partial.volume_bytes = 1251;
  CHECK(data_packets(partial) == 2);
}

TEST_CASE("download sender bookkeeping") {
  DownloadConfig cfg;
  cfg.volume_bytes = 5 * 1250;
  DownloadSender s(cfg);
  CHECK(s.total() == 5);
  Nanos now{0};
  int sent = 0;
  while (s.has_pending() && s.window_open()) {
    CHECK(s.next_allowed_send() <= now);
    s.on_sent(now);
    now = s.next_allowed_send();
    ++sent;
  }
  CHECK(sent == 5);
  CHECK(now == Nanos(500'000));  // paced at 10k packets per second
  s.on_lost(1, Nanos(0), now);
  CHECK(s.has_pending());
  s.on_sent(now);
  CHECK(s.retransmissions() == 1);
  s.on_acked(5);
  CHECK(s.complete());
}

TEST_CASE("ack ratio") {
  DownloadConfig cfg;
  AckScheduler acks(cfg);
  int sent = 0;
  for (int i = 0; i < 40; ++i) {
    if (acks.on_data(milliseconds(i))) {
      acks.on_ack_sent();
      ++sent;
    }
  }
  CHECK(sent == 20);
  CHECK_FALSE(acks.on_data(milliseconds(50)));
  REQUIRE(acks.deadline());
  CHECK(*acks.deadline() == milliseconds(51));
}
