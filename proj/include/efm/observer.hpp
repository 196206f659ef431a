#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "efm/core.hpp"
#include "efm/phase_detector.hpp"

namespace efm {

enum class Mechanism : std::uint8_t { L, Q, R, T };

inline constexpr Mechanism kAllMechanisms[] = {Mechanism::L, Mechanism::Q,
                                               Mechanism::R, Mechanism::T};

std::string_view to_string(Mechanism m);

/// Path segments a mechanism's estimate covers, named for a downstream
/// (server-to-client) observer. For the upstream direction read Up for Down.
enum class PathScope : std::uint8_t {
  Down1,              // sender -> observer
  Down1Down2,         // whole sender -> receiver path
  ThreeQuarters,      // Up1 + Up2 + Down1
  EndToEndRoundTrip,  // all four segments
};

PathScope scope_of(Mechanism m);
/// "down1", "up1+up2", "three-quarters", ... for the given observed direction.
std::string scope_label(PathScope scope, Direction observed);

struct LossReport {
  Mechanism mechanism = Mechanism::L;
  Direction direction = Direction::ServerToClient;
  std::uint64_t packets_observed = 0;
  /// Signed: run-length accounting can yield negative contributions when
  /// blocks are stretched.
  std::int64_t packets_lost_estimate = 0;
  double loss_rate_estimate = 0.0;
  PathScope path_scope = PathScope::Down1;
  Nanos report_time{0};
  /// Bytes of this direction seen by the observer up to report_time.
  std::uint64_t bytes_observed = 0;
  /// Completed measurement units folded into this report (L marks, counted
  /// Q/R runs, T pairs).
  std::uint64_t measurements = 0;

  friend bool operator==(const LossReport&, const LossReport&) = default;
};

struct RttSample {
  Nanos rtt{0};
  Nanos edge_time{0};

  friend bool operator==(const RttSample&, const RttSample&) = default;
};

/// Power of two nearest to the median of the first observed run lengths.
/// Requires at least three runs.
struct BlockLengthGuess {
  std::uint32_t n = 0;
  bool within_tolerance = true;  // median within +-25% of n
};
BlockLengthGuess deduce_n(std::span<const std::uint64_t> first_runs);

/// Counts L marks against all observed packets.
class LDecoder {
 public:
  explicit LDecoder(Direction dir) : dir_(dir) {}

  /// Returns a report whenever an L-marked packet is seen.
  std::optional<LossReport> ingest(const TraceRecord& rec, std::uint64_t bytes_observed);
  /// Available as soon as one packet was observed.
  std::optional<LossReport> report() const;

 private:
  LossReport make(Nanos now, std::uint64_t bytes) const;

  Direction dir_;
  std::uint64_t observed_ = 0;
  std::uint64_t marks_ = 0;
  Nanos last_time_{0};
  std::uint64_t last_bytes_ = 0;
};

/// Run-length accounting shared by the Q and R decoders: a completed run of
/// length len counts as k = max(1, round(len / n)) blocks and k*n - len
/// lost packets.
class BlockRunDecoder {
 public:
  BlockRunDecoder(Mechanism mech, Direction dir, std::optional<std::uint32_t> n,
                  std::uint32_t threshold, bool discard_first_run);

  std::optional<LossReport> ingest(bool level, Nanos now, std::uint64_t bytes_observed);
  /// Supplies the block length when it was not configured. Runs buffered so
  /// far are accounted immediately; returns the resulting report if any.
  std::optional<LossReport> set_block_length(std::uint32_t n, Nanos now,
                                             std::uint64_t bytes_observed);

  std::optional<LossReport> report() const;
  std::optional<std::uint32_t> block_length() const { return n_; }
  std::span<const std::uint64_t> buffered_runs() const { return buffered_; }
  std::uint64_t completed_runs() const { return completed_runs_; }

 private:
  void account(std::uint64_t len);
  LossReport make(Nanos now, std::uint64_t bytes) const;

  Mechanism mech_;
  Direction dir_;
  std::optional<std::uint32_t> n_;
  QPhaseDetector detector_;
  bool discard_next_;
  std::vector<std::uint64_t> buffered_;
  std::uint64_t completed_runs_ = 0;
  std::uint64_t counted_runs_ = 0;
  std::uint64_t observed_ = 0;
  std::uint64_t expected_ = 0;
  std::int64_t lost_ = 0;
  Nanos last_time_{0};
  std::uint64_t last_bytes_ = 0;
};

/// Groups T-marked packets into trains separated by at least one spin period
/// of silence, pairs consecutive trains and compares their sizes.
class TDecoder {
 public:
  explicit TDecoder(Direction dir) : dir_(dir) {}

  /// `period` is the current spin-derived RTT estimate; without one no train
  /// is closed.
  std::optional<LossReport> ingest(const TraceRecord& rec, std::optional<Nanos> period,
                                   std::uint64_t bytes_observed);
  std::optional<LossReport> report() const;

  std::uint64_t trains_closed() const { return trains_closed_; }
  /// Sizes of all closed trains in order.
  const std::vector<std::uint64_t>& train_sizes() const { return sizes_; }
  std::optional<std::uint64_t> held_train() const { return held_; }

 private:
  std::optional<LossReport> close_train(Nanos now, std::uint64_t bytes);
  LossReport make(Nanos now, std::uint64_t bytes) const;

  Direction dir_;
  bool in_train_ = false;
  std::uint64_t train_size_ = 0;
  Nanos last_mark_{0};
  std::optional<std::uint64_t> held_;
  std::uint64_t trains_closed_ = 0;
  std::vector<std::uint64_t> sizes_;
  std::uint64_t pairs_ = 0;
  std::uint64_t generated_ = 0;
  std::uint64_t lost_ = 0;
  Nanos last_time_{0};
  std::uint64_t last_bytes_ = 0;
};

/// Spin-bit RTT: one sample per value transition, first transition dropped.
class SpinDecoder {
 public:
  std::optional<RttSample> ingest(const TraceRecord& rec);
  const std::vector<RttSample>& rtt_samples() const { return samples_; }
  std::optional<Nanos> current_rtt() const;

 private:
  std::optional<bool> last_value_;
  std::optional<Nanos> last_edge_;
  std::vector<RttSample> samples_;
};

struct ObserverConfig {
  /// Q-Block length; deduced from the first three Q runs when absent.
  std::optional<std::uint32_t> block_length = 64;
  std::uint32_t threshold = QPhaseDetector::kDefaultThreshold;
};

struct RttEvent {
  Direction direction = Direction::ServerToClient;
  RttSample sample;

  friend bool operator==(const RttEvent&, const RttEvent&) = default;
};

using ObserverEvent = std::variant<LossReport, RttEvent>;

/// All decoders for one observed direction.
class DirectionObserver {
 public:
  DirectionObserver(Direction dir, const ObserverConfig& cfg);

  void ingest(const TraceRecord& rec, std::vector<ObserverEvent>& events);

  Direction direction() const { return dir_; }
  std::optional<LossReport> report(Mechanism m) const;
  const SpinDecoder& spin() const { return spin_; }
  std::uint64_t packets_observed() const { return packets_; }
  std::uint64_t bytes_observed() const { return bytes_; }
  std::optional<std::uint32_t> block_length() const { return q_.block_length(); }
  const TDecoder& t() const { return t_; }
  /// Set once the block length was deduced from traffic.
  const std::optional<BlockLengthGuess>& deduced_block_length() const { return deduced_; }

 private:
  Direction dir_;
  std::uint64_t packets_ = 0;
  std::uint64_t bytes_ = 0;
  LDecoder l_;
  BlockRunDecoder q_;
  BlockRunDecoder r_;
  TDecoder t_;
  SpinDecoder spin_;
  std::optional<BlockLengthGuess> deduced_;
};

/// First report of one mechanism in one direction, and the totals at the end.
struct MechanismSummary {
  std::optional<LossReport> final_report;
  std::optional<Nanos> first_report_time;
  std::optional<std::uint64_t> first_report_bytes;
  std::uint64_t measurements = 0;
};

/// Passive observer over both directions of one flow. Feeding the same record
/// sequence always yields the same event log.
class Observer {
 public:
  explicit Observer(const ObserverConfig& cfg = {});

  void ingest(const TraceRecord& rec);

  const std::vector<ObserverEvent>& events() const { return events_; }
  const DirectionObserver& direction(Direction d) const;
  MechanismSummary summary(Direction d, Mechanism m) const;
  std::optional<Nanos> median_rtt(Direction d) const;

 private:
  DirectionObserver c2s_;
  DirectionObserver s2c_;
  std::vector<ObserverEvent> events_;
  // Time and size of the first packet per direction, indexed by Direction.
  std::optional<std::pair<Nanos, std::uint64_t>> first_packet_[2];
};

inline constexpr std::string_view kReportCsvHeader =
    "direction,mechanism,report_time_ns,observed,lost,rate,bytes_observed,rtt_ns";

std::string format_event(const ObserverEvent& ev);
void write_events_csv(std::ostream& out, std::span<const ObserverEvent> events);

}  // namespace efm
