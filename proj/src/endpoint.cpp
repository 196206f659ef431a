#include "efm/endpoint.hpp"

#include <algorithm>
#include <stdexcept>

namespace efm {

bool SpinState::on_receive(bool incoming) {
  const bool edge = last_received_.has_value() && *last_received_ != incoming;
  last_received_ = incoming;
  if (role_ == Role::Server) {
    current_ = incoming;
  } else if (incoming == current_) {
    current_ = !incoming;
  }
  return edge;
}

// ---------------------------------------------------------------------------

QState::QState(std::uint32_t n) : n_(n) {
  if (n_ == 0 || (n_ & (n_ - 1)) != 0) {
    throw std::invalid_argument("Q-Block length must be a power of two");
  }
}

bool QState::next_mark() {
  const bool out = level_;
  if (++sent_in_block_ == n_) {
    sent_in_block_ = 0;
    level_ = !level_;
  }
  return out;
}

// ---------------------------------------------------------------------------

std::uint64_t rounded_average(std::uint64_t sum, std::uint64_t count) {
  return (2 * sum + count) / (2 * count);
}

RState::RState(std::uint32_t q_threshold) : detector_(q_threshold) {}

void RState::on_receive(bool incoming_q) {
  if (auto run = detector_.push(incoming_q)) on_qblock_complete(run->length);
}

void RState::on_qblock_complete(std::uint64_t count) {
  if (!in_progress_) {
    start_block(count);
    return;
  }
  ++blocks_;
  packets_ += count;
  pending_ = count;
  const std::uint64_t avg = rounded_average(packets_, blocks_);
  target_ = avg > marked_ ? avg - marked_ : 0;
  if (target_ == 0) finish_block();
}

void RState::start_block(std::uint64_t count) {
  level_ = !level_;
  ++toggles_;
  in_progress_ = count > 0;
  blocks_ = 1;
  packets_ = count;
  marked_ = 0;
  target_ = count;
  pending_.reset();
}

void RState::finish_block() {
  in_progress_ = false;
  if (pending_) start_block(*pending_);
}

bool RState::next_mark() {
  if (!in_progress_) return level_;
  const bool mark = level_;
  ++marked_;
  if (--target_ == 0) finish_block();
  return mark;
}

// ---------------------------------------------------------------------------

TClientState::TClientState(TClientConfig cfg) : cfg_(cfg) {
  if (cfg_.generation_periods == 0 || cfg_.pause_periods == 0) {
    throw std::invalid_argument("T phases must span at least one spin period");
  }
}

void TClientState::on_receive(Nanos now, bool t_mark, bool spin_edge) {
  advance(now);
  if (spin_edge) {
    if (last_edge_) period_ = now - *last_edge_;
    last_edge_ = now;
    ++edges_in_phase_;
  }
  if (t_mark) {
    if (phase_ == TPhase::Generation || phase_ == TPhase::PauseA) ++reflected_received_;
    last_t_received_ = now;
  }
  advance(now);
}

bool TClientState::next_mark(Nanos now) {
  advance(now);
  switch (phase_) {
    case TPhase::Generation:
      ++generation_sent_;
      return true;
    case TPhase::Reflection:
      ++reflection_sent_;
      if (reflection_sent_ >= reflection_budget_) enter(TPhase::PauseB, now);
      return true;
    case TPhase::PauseA:
    case TPhase::PauseB:
      return false;
  }
  return false;
}

bool TClientState::pause_over(Nanos now) const {
  if (!period_ || edges_in_phase_ < cfg_.pause_periods) return false;
  if (now - phase_start_ < *period_ * cfg_.pause_periods) return false;
  // The incoming train must have gone quiet for half a period.
  return !last_t_received_ || now - *last_t_received_ >= *period_ / 2;
}

void TClientState::enter(TPhase next, Nanos now) {
  phase_ = next;
  phase_start_ = now;
  edges_in_phase_ = 0;
}

void TClientState::advance(Nanos now) {
  while (true) {
    switch (phase_) {
      case TPhase::Generation: {
        const bool enough_edges = edges_in_phase_ >= cfg_.generation_periods;
        const bool long_enough =
            !period_ || now - phase_start_ >= *period_ * cfg_.generation_periods;
        if (!(enough_edges && long_enough)) return;
        enter(TPhase::PauseA, now);
        break;
      }
      case TPhase::PauseA:
        if (!pause_over(now)) return;
        if (reflected_received_ > generation_sent_) ++faulty_cycles_;
        reflection_budget_ = reflected_received_;
        reflection_sent_ = 0;
        enter(reflection_budget_ == 0 ? TPhase::PauseB : TPhase::Reflection, now);
        break;
      case TPhase::Reflection:
        if (reflection_sent_ < reflection_budget_) return;
        enter(TPhase::PauseB, now);
        break;
      case TPhase::PauseB:
        if (!pause_over(now)) return;
        ++cycles_;
        generation_sent_ = 0;
        reflected_received_ = 0;
        enter(TPhase::Generation, now);
        break;
    }
  }
}

// ---------------------------------------------------------------------------

ReceiveTracker::ReceiveTracker(std::uint32_t redundancy) : redundancy_(redundancy) {
  if (redundancy_ == 0) throw std::invalid_argument("ack redundancy must be >= 1");
}

void ReceiveTracker::on_packet(std::uint64_t seq) {
  if (trimmed_ && seq <= *trimmed_) {
    // Below the trimmed window; already reported or given up on.
    return;
  }
  unreported_ = true;
  if (ranges_.empty() || seq > ranges_.back().last + 1) {
    ranges_.push_back({seq, seq});
    return;
  }
  if (seq == ranges_.back().last + 1) {
    ranges_.back().last = seq;
    return;
  }
  // Out-of-order arrival.
  auto it = std::lower_bound(ranges_.begin(), ranges_.end(), seq,
                             [](const SeqRange& r, std::uint64_t s) { return r.last + 1 < s; });
  if (it != ranges_.end() && seq >= it->first && seq <= it->last) return;
  if (it != ranges_.end() && it->last + 1 == seq) {
    it->last = seq;
    auto next = std::next(it);
    if (next != ranges_.end() && next->first == seq + 1) {
      it->last = next->last;
      ranges_.erase(next);
    }
  } else if (it != ranges_.end() && it->first == seq + 1) {
    it->first = seq;
  } else {
    ranges_.insert(it, {seq, seq});
  }
}

AckFrame ReceiveTracker::make_ack() {
  AckFrame frame;
  frame.ranges = ranges_;
  unreported_ = false;
  if (ranges_.empty()) return frame;

  reported_floor_.push_back(ranges_.back().last);
  if (reported_floor_.size() >= redundancy_) {
    const std::uint64_t floor = reported_floor_.front();
    reported_floor_.pop_front();
    trimmed_ = trimmed_ ? std::max(*trimmed_, floor) : floor;
    auto keep = std::find_if(ranges_.begin(), ranges_.end(),
                             [&](const SeqRange& r) { return r.last > floor; });
    ranges_.erase(ranges_.begin(), keep);
    if (!ranges_.empty() && ranges_.front().first <= floor) ranges_.front().first = floor + 1;
  }
  return frame;
}

// ---------------------------------------------------------------------------

LossDetector::LossDetector(LossDetectorConfig cfg) : cfg_(cfg), srtt_(cfg.initial_rtt) {
  if (cfg_.packet_threshold == 0) throw std::invalid_argument("packet threshold must be >= 1");
}

void LossDetector::on_sent(std::uint64_t seq, Nanos now, bool data) {
  if (seq != base_seq_ + sent_.size()) {
    throw std::logic_error("loss detector expects consecutive sequence numbers");
  }
  sent_.push_back({now, State::InFlight, data});
  ++in_flight_;
  if (data) ++data_in_flight_;
}

LossDetector::Entry* LossDetector::find(std::uint64_t seq) {
  if (seq < base_seq_ || seq >= base_seq_ + sent_.size()) return nullptr;
  return &sent_[seq - base_seq_];
}

Nanos LossDetector::time_threshold() const {
  const auto thr = Nanos(static_cast<std::int64_t>(
      static_cast<double>(srtt_.count()) * cfg_.time_threshold));
  return std::max<Nanos>(thr, std::chrono::milliseconds(1));
}

AckOutcome LossDetector::on_ack(const AckFrame& ack, Nanos now) {
  AckOutcome out;
  if (ack.empty() || sent_.empty()) return out;

  const std::uint64_t end = base_seq_ + sent_.size();
  for (const auto& range : ack.ranges) {
    const std::uint64_t lo = std::max(range.first, base_seq_);
    const std::uint64_t hi = std::min(range.last + 1, end);
    for (std::uint64_t s = lo; s < hi; ++s) {
      Entry& e = sent_[s - base_seq_];
      if (e.state != State::InFlight) continue;
      e.state = State::Acked;
      --in_flight_;
      if (e.data) --data_in_flight_;
      out.newly_acked.push_back({s, e.sent, e.data});
    }
  }

  const std::uint64_t largest = ack.largest();
  if (!largest_acked_ || largest > *largest_acked_) {
    largest_acked_ = largest;
    const bool newly = !out.newly_acked.empty() && out.newly_acked.back().seq == largest;
    if (newly) {
      const Nanos rtt = now - out.newly_acked.back().sent_time;
      out.rtt_sample = rtt;
      if (!has_rtt_sample_) {
        srtt_ = rtt;
        has_rtt_sample_ = true;
      } else {
        srtt_ = (srtt_ * 7 + rtt) / 8;
      }
    }
  }

  out.newly_lost = detect_losses(now);
  trim();
  return out;
}

void LossDetector::mark_lost(std::uint64_t seq, Entry& e, std::vector<SentInfo>& out) {
  e.state = State::Lost;
  --in_flight_;
  if (e.data) --data_in_flight_;
  ++total_lost_;
  out.push_back({seq, e.sent, e.data});
}

std::vector<SentInfo> LossDetector::detect_losses(Nanos now) {
  std::vector<SentInfo> lost;
  if (!largest_acked_) return lost;
  const Nanos thr = time_threshold();
  for (std::size_t i = 0; i < sent_.size(); ++i) {
    const std::uint64_t seq = base_seq_ + i;
    if (seq >= *largest_acked_) break;
    Entry& e = sent_[i];
    if (e.state != State::InFlight) continue;
    const bool by_count = *largest_acked_ >= seq + cfg_.packet_threshold;
    const bool by_time = e.sent + thr <= now;
    if (!(by_count || by_time)) break;
    mark_lost(seq, e, lost);
  }
  trim();
  return lost;
}

std::optional<Nanos> LossDetector::loss_time() const {
  if (!largest_acked_) return std::nullopt;
  for (std::size_t i = 0; i < sent_.size(); ++i) {
    const std::uint64_t seq = base_seq_ + i;
    if (seq >= *largest_acked_) break;
    if (sent_[i].state == State::InFlight) return sent_[i].sent + time_threshold();
  }
  return std::nullopt;
}

std::optional<Nanos> LossDetector::timeout_time() const {
  if (data_in_flight_ == 0) return std::nullopt;
  const auto timeout = Nanos(static_cast<std::int64_t>(
      static_cast<double>(srtt_.count()) * cfg_.timeout_rtts));
  for (const auto& e : sent_) {
    if (e.state == State::InFlight && e.data) return e.sent + timeout;
  }
  return std::nullopt;
}

std::vector<SentInfo> LossDetector::on_timeout(Nanos now) {
  std::vector<SentInfo> lost;
  const auto timeout = Nanos(static_cast<std::int64_t>(
      static_cast<double>(srtt_.count()) * cfg_.timeout_rtts));
  for (std::size_t i = 0; i < sent_.size(); ++i) {
    Entry& e = sent_[i];
    if (e.state != State::InFlight || !e.data) continue;
    if (e.sent + timeout > now) break;
    mark_lost(base_seq_ + i, e, lost);
  }
  trim();
  return lost;
}

void LossDetector::trim() {
  while (!sent_.empty() && sent_.front().state != State::InFlight) {
    sent_.pop_front();
    ++base_seq_;
  }
}

// ---------------------------------------------------------------------------

namespace {

std::variant<TClientState, TServerState> make_t(Role role, const EndpointConfig& cfg) {
  if (role == Role::Client) return TClientState(cfg.t_client);
  return TServerState{};
}

}  // namespace

MarkingEndpoint::MarkingEndpoint(Role role, const EndpointConfig& cfg)
    : role_(role),
      spin_(role),
      q_(cfg.block_length),
      r_(cfg.q_threshold),
      t_(make_t(role, cfg)),
      detector_(cfg.loss) {}

MarkedHeader MarkingEndpoint::stamp(Nanos now, std::uint32_t size_bytes, bool data) {
  MarkedHeader h;
  h.seq = next_seq_++;
  h.size_bytes = size_bytes;
  h.spin = spin_.outgoing();
  h.l = l_.next_mark();
  h.q = q_.next_mark();
  h.r = r_.next_mark();
  if (auto* client = std::get_if<TClientState>(&t_)) {
    h.t = client->next_mark(now);
  } else {
    h.t = std::get<TServerState>(t_).next_mark();
  }
  detector_.on_sent(h.seq, now, data);

  ++log_.packets_sent;
  if (h.l) ++log_.l_marks_sent;
  if (h.t) ++log_.t_marks_sent;
  return h;
}

AckOutcome MarkingEndpoint::on_receive(Nanos now, const MarkedHeader& h, const AckFrame* ack) {
  ++log_.packets_received;
  tracker_.on_packet(h.seq);
  const bool edge = spin_.on_receive(h.spin);
  r_.on_receive(h.q);
  if (auto* client = std::get_if<TClientState>(&t_)) {
    client->on_receive(now, h.t, edge);
  } else {
    std::get<TServerState>(t_).on_receive(h.t);
  }

  AckOutcome out;
  if (ack != nullptr) {
    out = detector_.on_ack(*ack, now);
    record_losses(out.newly_lost);
  }
  return out;
}

std::vector<SentInfo> MarkingEndpoint::on_loss_timer(Nanos now) {
  auto lost = detector_.detect_losses(now);
  record_losses(lost);
  return lost;
}

std::vector<SentInfo> MarkingEndpoint::on_timeout(Nanos now) {
  auto lost = detector_.on_timeout(now);
  record_losses(lost);
  return lost;
}

void MarkingEndpoint::record_losses(const std::vector<SentInfo>& lost) {
  if (lost.empty()) return;
  l_.on_loss_detected(lost.size());
  log_.losses_detected += lost.size();
}

EndpointLog MarkingEndpoint::log() const {
  EndpointLog out = log_;
  out.r_toggles = r_.toggles();
  if (const auto* client = t_client()) {
    out.t_cycles = client->cycles();
    out.t_faulty_cycles = client->faulty_cycles();
  }
  return out;
}

}  // namespace efm
