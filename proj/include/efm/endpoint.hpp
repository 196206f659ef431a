#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <variant>
#include <vector>

#include "efm/core.hpp"
#include "efm/phase_detector.hpp"

namespace efm {

enum class Role : std::uint8_t { Client, Server };

// ---------------------------------------------------------------------------
// Spin bit

/// The server echoes the last spin value it received; the client sends the
/// inverse of what it last received, which flips its value once per RTT.
class SpinState {
 public:
  explicit SpinState(Role role) : role_(role) {}

  /// Updates the outgoing value. Returns true when the received value differs
  /// from the previously received one (an observed spin edge).
  bool on_receive(bool incoming);

  bool outgoing() const { return current_; }
  std::optional<bool> last_received() const { return last_received_; }
  Role role() const { return role_; }

 private:
  Role role_;
  bool current_ = false;
  std::optional<bool> last_received_;
};

// ---------------------------------------------------------------------------
// L bit

class LState {
 public:
  void on_loss_detected(std::uint64_t n_lost) { counter_ += n_lost; }

  /// One call per outgoing packet: marks while losses are pending.
  bool next_mark() {
    if (counter_ == 0) return false;
    --counter_;
    return true;
  }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Q bit

/// Square wave with blocks of n packets, starting with n unset packets.
class QState {
 public:
  static constexpr std::uint32_t kDefaultBlockLength = 64;

  explicit QState(std::uint32_t n = kDefaultBlockLength);

  bool next_mark();

  std::uint32_t block_length() const { return n_; }
  std::uint32_t sent_in_block() const { return sent_in_block_; }
  bool current_level() const { return level_; }

 private:
  std::uint32_t n_;
  std::uint32_t sent_in_block_ = 0;
  bool level_ = false;
};

// ---------------------------------------------------------------------------
// R bit

/// Reflects the packet count of each received Q-Block as a run of equal R
/// values. While an R-Block is in progress, further completed Q-Blocks
/// re-target it to the rounded average count per block since it started, and
/// the latest of them seeds the next R-Block as soon as this one ends. With
/// nothing pending the level holds until a Q-Block completes.
class RState {
 public:
  explicit RState(std::uint32_t q_threshold = QPhaseDetector::kDefaultThreshold);

  /// One call per received packet with its Q bit.
  void on_receive(bool incoming_q);
  /// One call per outgoing packet.
  bool next_mark();

  bool current_level() const { return level_; }
  bool in_progress() const { return in_progress_; }
  std::uint64_t marking_target() const { return target_; }
  std::uint64_t marked_in_block() const { return marked_; }
  std::uint64_t qblocks_since_r_start() const { return blocks_; }
  std::uint64_t packets_since_r_start() const { return packets_; }
  std::uint64_t toggles() const { return toggles_; }
  const QPhaseDetector& phase_detector() const { return detector_; }

  /// Feeds a completed incoming Q-Block count directly (what on_receive does
  /// when the detector closes a phase).
  void on_qblock_complete(std::uint64_t count);
  std::optional<std::uint64_t> pending_count() const { return pending_; }

 private:
  void start_block(std::uint64_t count);
  void finish_block();

  QPhaseDetector detector_;
  bool level_ = false;
  bool in_progress_ = false;
  std::uint64_t target_ = 0;
  std::uint64_t marked_ = 0;
  std::uint64_t blocks_ = 0;
  std::uint64_t packets_ = 0;
  std::uint64_t toggles_ = 0;
  std::optional<std::uint64_t> pending_;
};

/// round-half-up(sum / count).
std::uint64_t rounded_average(std::uint64_t sum, std::uint64_t count);

// ---------------------------------------------------------------------------
// T bit

enum class TPhase : std::uint8_t { Generation, PauseA, Reflection, PauseB };

struct TClientConfig {
  std::uint32_t generation_periods = 2;
  std::uint32_t pause_periods = 1;
};

/// Client side of the round-trip loss bit. Phases are timed in spin periods
/// observed by the client; the client also counts the T-marked packets the
/// server reflects back during Generation and PauseA and re-sends that many
/// in Reflection.
class TClientState {
 public:
  explicit TClientState(TClientConfig cfg = {});

  /// One call per received packet. `spin_edge` is true when the client's
  /// observed spin value changed with this packet.
  void on_receive(Nanos now, bool t_mark, bool spin_edge);
  /// One call per outgoing packet.
  bool next_mark(Nanos now);

  TPhase phase() const { return phase_; }
  std::uint64_t generation_sent() const { return generation_sent_; }
  std::uint64_t reflected_received() const { return reflected_received_; }
  std::uint64_t reflection_budget() const { return reflection_budget_; }
  std::uint64_t reflection_sent() const { return reflection_sent_; }
  std::uint64_t cycles() const { return cycles_; }
  /// Cycles where more reflected marks arrived than were generated, i.e.
  /// phase assignment went wrong.
  std::uint64_t faulty_cycles() const { return faulty_cycles_; }
  std::optional<Nanos> spin_period() const { return period_; }

 private:
  void advance(Nanos now);
  bool pause_over(Nanos now) const;
  void enter(TPhase next, Nanos now);

  TClientConfig cfg_;
  TPhase phase_ = TPhase::Generation;
  Nanos phase_start_{0};
  std::uint32_t edges_in_phase_ = 0;
  std::optional<Nanos> last_edge_;
  std::optional<Nanos> period_;
  std::optional<Nanos> last_t_received_;
  std::uint64_t generation_sent_ = 0;
  std::uint64_t reflected_received_ = 0;
  std::uint64_t reflection_budget_ = 0;
  std::uint64_t reflection_sent_ = 0;
  std::uint64_t cycles_ = 0;
  std::uint64_t faulty_cycles_ = 0;
};

/// Server side: reflect one mark per received mark.
class TServerState {
 public:
  void on_receive(bool t_mark) {
    if (t_mark) {
      ++credit_;
      ++received_;
    }
  }
  bool next_mark() {
    if (credit_ == 0) return false;
    --credit_;
    ++emitted_;
    return true;
  }

  std::uint64_t credit() const { return credit_; }
  std::uint64_t received() const { return received_; }
  std::uint64_t emitted() const { return emitted_; }

 private:
  std::uint64_t credit_ = 0;
  std::uint64_t received_ = 0;
  std::uint64_t emitted_ = 0;
};

// ---------------------------------------------------------------------------
// Acknowledgments and loss detection

struct SeqRange {
  std::uint64_t first = 0;
  std::uint64_t last = 0;  // inclusive

  friend bool operator==(const SeqRange&, const SeqRange&) = default;
};

/// Acknowledged sequence ranges, ascending and disjoint.
struct AckFrame {
  std::vector<SeqRange> ranges;

  bool empty() const { return ranges.empty(); }
  std::uint64_t largest() const { return ranges.back().last; }
};

/// Receiver-side record of the peer's sequence numbers. Each ACK repeats the
/// ranges reported by the previous `redundancy - 1` ACKs so a single lost ACK
/// does not hide deliveries.
class ReceiveTracker {
 public:
  explicit ReceiveTracker(std::uint32_t redundancy = 3);

  void on_packet(std::uint64_t seq);
  AckFrame make_ack();
  bool has_unreported() const { return unreported_; }

 private:
  std::uint32_t redundancy_;
  std::vector<SeqRange> ranges_;
  std::deque<std::uint64_t> reported_floor_;
  std::optional<std::uint64_t> trimmed_;  // highest sequence dropped from the frame
  bool unreported_ = false;
};

struct LossDetectorConfig {
  std::uint32_t packet_threshold = 3;
  /// Time threshold as a fraction of the smoothed RTT.
  double time_threshold = 9.0 / 8.0;
  Nanos initial_rtt = std::chrono::milliseconds(100);
  /// Retransmission timeout as a multiple of the smoothed RTT.
  double timeout_rtts = 2.0;
};

struct SentInfo {
  std::uint64_t seq = 0;
  Nanos sent_time{0};
  bool data = false;
};

struct AckOutcome {
  std::vector<SentInfo> newly_acked;
  std::vector<SentInfo> newly_lost;
  std::optional<Nanos> rtt_sample;
};

/// Sender-side loss detection: a packet is lost once `packet_threshold`
/// later packets are acknowledged, or when it is older than
/// time_threshold * srtt and a later packet was acknowledged.
class LossDetector {
 public:
  explicit LossDetector(LossDetectorConfig cfg = {});

  void on_sent(std::uint64_t seq, Nanos now, bool data);
  AckOutcome on_ack(const AckFrame& ack, Nanos now);
  /// Packet- and time-threshold detection at `now`.
  std::vector<SentInfo> detect_losses(Nanos now);
  /// When the time threshold next expires for a packet below the largest
  /// acknowledged one.
  std::optional<Nanos> loss_time() const;
  /// Retransmission timeout for the oldest outstanding data packet.
  std::optional<Nanos> timeout_time() const;
  /// Declares every outstanding data packet older than the timeout lost.
  std::vector<SentInfo> on_timeout(Nanos now);

  Nanos smoothed_rtt() const { return srtt_; }
  std::optional<std::uint64_t> largest_acked() const { return largest_acked_; }
  std::uint64_t in_flight() const { return in_flight_; }
  std::uint64_t data_in_flight() const { return data_in_flight_; }
  std::uint64_t total_lost() const { return total_lost_; }

 private:
  enum class State : std::uint8_t { InFlight, Acked, Lost };
  struct Entry {
    Nanos sent{0};
    State state = State::InFlight;
    bool data = false;
  };

  Entry* find(std::uint64_t seq);
  void mark_lost(std::uint64_t seq, Entry& e, std::vector<SentInfo>& out);
  void trim();
  Nanos time_threshold() const;

  LossDetectorConfig cfg_;
  std::deque<Entry> sent_;
  std::uint64_t base_seq_ = 0;
  std::optional<std::uint64_t> largest_acked_;
  Nanos srtt_;
  bool has_rtt_sample_ = false;
  std::uint64_t in_flight_ = 0;
  std::uint64_t data_in_flight_ = 0;
  std::uint64_t total_lost_ = 0;
};

// ---------------------------------------------------------------------------
// Combined endpoint

struct EndpointConfig {
  std::uint32_t block_length = QState::kDefaultBlockLength;
  std::uint32_t q_threshold = QPhaseDetector::kDefaultThreshold;
  LossDetectorConfig loss;
  TClientConfig t_client;
};

struct EndpointLog {
  std::uint64_t packets_sent = 0;
  std::uint64_t packets_received = 0;
  std::uint64_t losses_detected = 0;
  std::uint64_t l_marks_sent = 0;
  std::uint64_t t_marks_sent = 0;
  std::uint64_t t_cycles = 0;
  std::uint64_t t_faulty_cycles = 0;
  std::uint64_t r_toggles = 0;
};

/// All marking state of one host plus its loss detection. Stamps outgoing
/// headers and digests incoming ones.
class MarkingEndpoint {
 public:
  MarkingEndpoint(Role role, const EndpointConfig& cfg);

  /// Assigns the next sequence number, sets all five bits and registers the
  /// packet with the loss detector.
  MarkedHeader stamp(Nanos now, std::uint32_t size_bytes, bool data);

  /// Digests an incoming packet; returns ack and loss outcomes for traffic
  /// logic. Detected losses are also fed to the L counter.
  AckOutcome on_receive(Nanos now, const MarkedHeader& h, const AckFrame* ack);
  /// Runs time-threshold detection at `now`.
  std::vector<SentInfo> on_loss_timer(Nanos now);
  /// Retransmission timeout.
  std::vector<SentInfo> on_timeout(Nanos now);

  AckFrame make_ack() { return tracker_.make_ack(); }
  bool has_unacked_receipts() const { return tracker_.has_unreported(); }

  Role role() const { return role_; }
  const LossDetector& loss_detector() const { return detector_; }
  const SpinState& spin() const { return spin_; }
  const LState& l() const { return l_; }
  const QState& q() const { return q_; }
  const RState& r() const { return r_; }
  const TClientState* t_client() const { return std::get_if<TClientState>(&t_); }
  const TServerState* t_server() const { return std::get_if<TServerState>(&t_); }
  EndpointLog log() const;

 private:
  void record_losses(const std::vector<SentInfo>& lost);

  Role role_;
  std::uint64_t next_seq_ = 0;
  SpinState spin_;
  LState l_;
  QState q_;
  RState r_;
  std::variant<TClientState, TServerState> t_;
  LossDetector detector_;
  ReceiveTracker tracker_;
  EndpointLog log_;
};

}  // namespace efm
