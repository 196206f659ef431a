#pragma once

#include <cstdint>
#include <limits>
#include <optional>

#include "efm/core.hpp"

namespace efm {

/// Symmetric open-loop traffic: both hosts send `total_packets` evenly spaced
/// packets at `rate_pps`, independent of loss.
struct CbrConfig {
  std::uint64_t rate_pps = 10'000;
  std::uint64_t total_packets = 1'000'000;
  std::uint32_t packet_size = kDefaultPacketSize;
};

/// Send time of packet number `index` (0-based) of a CBR stream that starts
/// at `start`, or nullopt once the stream is exhausted.
std::optional<Nanos> cbr_next_send(const CbrConfig& cfg, std::uint64_t index,
                                   Nanos start = Nanos(0));

enum class CcMode : std::uint8_t { SlowStart, CongestionAvoidance };

/// Simplified New Reno in packets.
struct NewRenoState {
  double cwnd = 10.0;
  double ssthresh = std::numeric_limits<double>::infinity();
  CcMode mode = CcMode::SlowStart;
  std::uint64_t in_flight = 0;
  /// Losses of packets sent before this time belong to the previous event.
  Nanos recovery_start{-1};

  bool can_send() const { return static_cast<double>(in_flight) < cwnd; }
};

inline constexpr double kMinCwnd = 2.0;

void cc_on_sent(NewRenoState& st);
/// One call per newly acknowledged data packet.
void cc_on_ack(NewRenoState& st);
/// `sent_time` is the send time of the newest lost packet in this batch; a
/// window reduction happens at most once per recovery period.
void cc_on_loss(NewRenoState& st, std::uint64_t n_lost, Nanos sent_time, Nanos now);

/// Asymmetric congestion-controlled download: the client sends one request,
/// the server sends `volume_bytes` of data, the client acknowledges every
/// `ack_ratio` data packets.
struct DownloadConfig {
  std::uint64_t volume_bytes = 50'000;
  std::uint32_t packet_size = kDefaultPacketSize;
  std::uint32_t ack_ratio = 2;
  double initial_cwnd = 10.0;
  /// Sender line rate; consecutive data packets leave at least 1/rate apart.
  /// Zero disables pacing.
  std::uint64_t max_rate_pps = 10'000;
  /// Longest the client holds back an ACK for fewer than ack_ratio packets.
  Nanos max_ack_delay = std::chrono::milliseconds(1);
};

/// Number of data packets needed to carry the configured volume.
std::uint64_t data_packets(const DownloadConfig& cfg);

/// Server-side bookkeeping of a download: what is left to send, what has
/// been delivered, and when the next paced send may happen.
class DownloadSender {
 public:
  explicit DownloadSender(const DownloadConfig& cfg);

  bool has_pending() const { return new_remaining_ > 0 || retransmit_queue_ > 0; }
  bool complete() const { return delivered_ == total_; }
  /// Whether a data packet may leave now given cwnd; pacing is separate.
  bool window_open() const { return cc_.can_send(); }
  Nanos next_allowed_send() const { return next_allowed_; }

  void on_sent(Nanos now);
  void on_acked(std::uint64_t n_data);
  void on_lost(std::uint64_t n_data, Nanos newest_sent, Nanos now);

  const NewRenoState& cc() const { return cc_; }
  std::uint64_t total() const { return total_; }
  std::uint64_t delivered() const { return delivered_; }
  std::uint64_t retransmissions() const { return retransmissions_; }

 private:
  DownloadConfig cfg_;
  NewRenoState cc_;
  std::uint64_t total_;
  std::uint64_t new_remaining_;
  std::uint64_t retransmit_queue_ = 0;
  std::uint64_t delivered_ = 0;
  std::uint64_t retransmissions_ = 0;
  Nanos next_allowed_{0};
  Nanos interval_{0};
};

/// Client-side ACK pacing: acknowledge after every `ack_ratio` data packets
/// or after max_ack_delay.
class AckScheduler {
 public:
  explicit AckScheduler(const DownloadConfig& cfg)
      : ratio_(cfg.ack_ratio == 0 ? 1 : cfg.ack_ratio), delay_(cfg.max_ack_delay) {}

  /// Returns true when an ACK should be sent immediately.
  bool on_data(Nanos now);
  /// Deadline for a delayed ACK, if one is pending.
  std::optional<Nanos> deadline() const { return deadline_; }
  void on_ack_sent() {
    pending_ = 0;
    deadline_.reset();
  }

 private:
  std::uint32_t ratio_;
  Nanos delay_;
  std::uint32_t pending_ = 0;
  std::optional<Nanos> deadline_;
};

}  // namespace efm
