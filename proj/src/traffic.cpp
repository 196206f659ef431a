#include "efm/traffic.hpp"

#include <algorithm>
#include <stdexcept>

namespace efm {

std::optional<Nanos> cbr_next_send(const CbrConfig& cfg, std::uint64_t index, Nanos start) {
  if (cfg.rate_pps == 0) throw std::invalid_argument("CBR rate must be positive");
  if (index >= cfg.total_packets) return std::nullopt;
  // Integer arithmetic keeps the schedule drift-free.
  constexpr std::uint64_t kSecond = 1'000'000'000;
  const std::uint64_t whole = index / cfg.rate_pps;
  const std::uint64_t rest = index % cfg.rate_pps;
  const auto offset = static_cast<std::int64_t>(whole * kSecond + rest * kSecond / cfg.rate_pps);
  return start + Nanos(offset);
}

void cc_on_sent(NewRenoState& st) { ++st.in_flight; }

void cc_on_ack(NewRenoState& st) {
  if (st.in_flight > 0) --st.in_flight;
  if (st.mode == CcMode::SlowStart) {
    st.cwnd += 1.0;
    if (st.cwnd >= st.ssthresh) st.mode = CcMode::CongestionAvoidance;
  } else {
    st.cwnd += 1.0 / st.cwnd;
  }
}

void cc_on_loss(NewRenoState& st, std::uint64_t n_lost, Nanos sent_time, Nanos now) {
  st.in_flight -= std::min(st.in_flight, n_lost);
  if (n_lost == 0 || sent_time < st.recovery_start) return;
  st.ssthresh = std::max(kMinCwnd, st.cwnd / 2.0);
  st.cwnd = st.ssthresh;
  st.mode = CcMode::CongestionAvoidance;
  st.recovery_start = now;
}

std::uint64_t data_packets(const DownloadConfig& cfg) {
  if (cfg.packet_size == 0) throw std::invalid_argument("packet size must be positive");
  return (cfg.volume_bytes + cfg.packet_size - 1) / cfg.packet_size;
}

DownloadSender::DownloadSender(const DownloadConfig& cfg)
    : cfg_(cfg), total_(data_packets(cfg)), new_remaining_(total_) {
  if (cfg.volume_bytes == 0) throw std::invalid_argument("download volume must be positive");
  cc_.cwnd = std::max(kMinCwnd, cfg.initial_cwnd);
  if (cfg.max_rate_pps > 0) interval_ = Nanos(1'000'000'000 / cfg.max_rate_pps);
}

void DownloadSender::on_sent(Nanos now) {
  if (retransmit_queue_ > 0) {
    --retransmit_queue_;
    ++retransmissions_;
  } else if (new_remaining_ > 0) {
    --new_remaining_;
  } else {
    throw std::logic_error("download sender has nothing to send");
  }
  cc_on_sent(cc_);
  next_allowed_ = now + interval_;
}

void DownloadSender::on_acked(std::uint64_t n_data) {
  for (std::uint64_t i = 0; i < n_data; ++i) cc_on_ack(cc_);
  delivered_ += n_data;
}

void DownloadSender::on_lost(std::uint64_t n_data, Nanos newest_sent, Nanos now) {
  if (n_data == 0) return;
  retransmit_queue_ += n_data;
  cc_on_loss(cc_, n_data, newest_sent, now);
}

bool AckScheduler::on_data(Nanos now) {
  if (++pending_ >= ratio_) return true;
  if (!deadline_) deadline_ = now + delay_;
  return false;
}

}  // namespace efm
