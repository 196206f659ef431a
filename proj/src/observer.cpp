#include "efm/observer.hpp"

#include <algorithm>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace efm {

std::string_view to_string(Mechanism m) {
  switch (m) {
    case Mechanism::L: return "L";
    case Mechanism::Q: return "Q";
    case Mechanism::R: return "R";
    case Mechanism::T: return "T";
  }
  return "?";
}

PathScope scope_of(Mechanism m) {
  switch (m) {
    case Mechanism::L: return PathScope::Down1Down2;
    case Mechanism::Q: return PathScope::Down1;
    case Mechanism::R: return PathScope::ThreeQuarters;
    case Mechanism::T: return PathScope::EndToEndRoundTrip;
  }
  return PathScope::Down1;
}

std::string scope_label(PathScope scope, Direction observed) {
  const std::string side = observed == Direction::ServerToClient ? "down" : "up";
  switch (scope) {
    case PathScope::Down1: return side + "1";
    case PathScope::Down1Down2: return side + "1+" + side + "2";
    case PathScope::ThreeQuarters: return "three-quarters";
    case PathScope::EndToEndRoundTrip: return "end-to-end";
  }
  return "?";
}

BlockLengthGuess deduce_n(std::span<const std::uint64_t> first_runs) {
  if (first_runs.size() < 3) {
    throw std::invalid_argument("deduce_n needs at least three completed runs");
  }
  std::vector<std::uint64_t> sorted(first_runs.begin(), first_runs.end());
  std::sort(sorted.begin(), sorted.end());
  const std::uint64_t median = std::max<std::uint64_t>(1, sorted[sorted.size() / 2]);

  std::uint64_t lower = 1;
  while (lower * 2 <= median) lower *= 2;
  const std::uint64_t upper = lower == median ? lower : lower * 2;
  // Ties go to the larger power: loss only ever shortens runs.
  const std::uint64_t n = (median - lower < upper - median) ? lower : upper;

  BlockLengthGuess guess;
  guess.n = static_cast<std::uint32_t>(n);
  const double ratio = static_cast<double>(median) / static_cast<double>(n);
  guess.within_tolerance = ratio >= 0.75 && ratio <= 1.25;
  return guess;
}

// ---------------------------------------------------------------------------

std::optional<LossReport> LDecoder::ingest(const TraceRecord& rec,
                                           std::uint64_t bytes_observed) {
  ++observed_;
  last_time_ = rec.observe_time;
  last_bytes_ = bytes_observed;
  if (!rec.header.l) return std::nullopt;
  ++marks_;
  return make(rec.observe_time, bytes_observed);
}

std::optional<LossReport> LDecoder::report() const {
  if (observed_ == 0) return std::nullopt;
  return make(last_time_, last_bytes_);
}

LossReport LDecoder::make(Nanos now, std::uint64_t bytes) const {
  LossReport rep;
  rep.mechanism = Mechanism::L;
  rep.direction = dir_;
  rep.packets_observed = observed_;
  rep.packets_lost_estimate = static_cast<std::int64_t>(marks_);
  rep.loss_rate_estimate =
      static_cast<double>(marks_) / static_cast<double>(observed_);
  rep.path_scope = scope_of(Mechanism::L);
  rep.report_time = now;
  rep.bytes_observed = bytes;
  rep.measurements = marks_;
  return rep;
}

// ---------------------------------------------------------------------------

BlockRunDecoder::BlockRunDecoder(Mechanism mech, Direction dir,
                                 std::optional<std::uint32_t> n,
                                 std::uint32_t threshold, bool discard_first_run)
    : mech_(mech), dir_(dir), n_(n), detector_(threshold),
      discard_next_(discard_first_run) {
  if (n_ && *n_ == 0) throw std::invalid_argument("block length must be >= 1");
}

std::optional<LossReport> BlockRunDecoder::ingest(bool level, Nanos now,
                                                  std::uint64_t bytes_observed) {
  last_time_ = now;
  last_bytes_ = bytes_observed;
  const auto closed = detector_.push(level);
  if (!closed) return std::nullopt;
  ++completed_runs_;
  if (discard_next_) {
    discard_next_ = false;
    return std::nullopt;
  }
  if (!n_) {
    buffered_.push_back(closed->length);
    return std::nullopt;
  }
  account(closed->length);
  return make(now, bytes_observed);
}

std::optional<LossReport> BlockRunDecoder::set_block_length(
    std::uint32_t n, Nanos now, std::uint64_t bytes_observed) {
  if (n == 0) throw std::invalid_argument("block length must be >= 1");
  n_ = n;
  const bool had_buffered = !buffered_.empty();
  for (std::uint64_t len : buffered_) account(len);
  buffered_.clear();
  if (!had_buffered) return std::nullopt;
  return make(now, bytes_observed);
}

void BlockRunDecoder::account(std::uint64_t len) {
  const std::uint64_t n = *n_;
  const std::uint64_t k = std::max<std::uint64_t>(1, (2 * len + n) / (2 * n));
  observed_ += len;
  expected_ += k * n;
  lost_ += static_cast<std::int64_t>(k * n) - static_cast<std::int64_t>(len);
  ++counted_runs_;
}

std::optional<LossReport> BlockRunDecoder::report() const {
  if (counted_runs_ == 0) return std::nullopt;
  return make(last_time_, last_bytes_);
}

LossReport BlockRunDecoder::make(Nanos now, std::uint64_t bytes) const {
  LossReport rep;
  rep.mechanism = mech_;
  rep.direction = dir_;
  rep.packets_observed = observed_;
  rep.packets_lost_estimate = lost_;
  rep.loss_rate_estimate =
      expected_ == 0 ? 0.0 : static_cast<double>(lost_) / static_cast<double>(expected_);
  rep.path_scope = scope_of(mech_);
  rep.report_time = now;
  rep.bytes_observed = bytes;
  rep.measurements = counted_runs_;
  return rep;
}

// ---------------------------------------------------------------------------

std::optional<LossReport> TDecoder::ingest(const TraceRecord& rec,
                                           std::optional<Nanos> period,
                                           std::uint64_t bytes_observed) {
  const Nanos now = rec.observe_time;
  last_time_ = now;
  last_bytes_ = bytes_observed;

  std::optional<LossReport> out;
  if (in_train_ && period && now - last_mark_ > *period) {
    out = close_train(now, bytes_observed);
  }
  if (rec.header.t) {
    if (!in_train_) {
      in_train_ = true;
      train_size_ = 0;
    }
    ++train_size_;
    last_mark_ = now;
  }
  return out;
}

std::optional<LossReport> TDecoder::close_train(Nanos now, std::uint64_t bytes) {
  in_train_ = false;
  ++trains_closed_;
  sizes_.push_back(train_size_);
  if (!held_) {
    held_ = train_size_;
    return std::nullopt;
  }
  const std::uint64_t generation = std::max(*held_, train_size_);
  const std::uint64_t reflection = std::min(*held_, train_size_);
  held_.reset();
  if (generation == 0) return std::nullopt;
  ++pairs_;
  generated_ += generation;
  lost_ += generation - reflection;
  return make(now, bytes);
}

std::optional<LossReport> TDecoder::report() const {
  if (pairs_ == 0) return std::nullopt;
  return make(last_time_, last_bytes_);
}

LossReport TDecoder::make(Nanos now, std::uint64_t bytes) const {
  LossReport rep;
  rep.mechanism = Mechanism::T;
  rep.direction = dir_;
  rep.packets_observed = generated_;
  rep.packets_lost_estimate = static_cast<std::int64_t>(lost_);
  rep.loss_rate_estimate =
      static_cast<double>(lost_) / static_cast<double>(generated_);
  rep.path_scope = scope_of(Mechanism::T);
  rep.report_time = now;
  rep.bytes_observed = bytes;
  rep.measurements = pairs_;
  return rep;
}

// ---------------------------------------------------------------------------

std::optional<RttSample> SpinDecoder::ingest(const TraceRecord& rec) {
  const bool value = rec.header.spin;
  std::optional<RttSample> out;
  if (last_value_ && *last_value_ != value) {
    if (last_edge_ && rec.observe_time > *last_edge_) {
      out = RttSample{rec.observe_time - *last_edge_, rec.observe_time};
      samples_.push_back(*out);
    }
    last_edge_ = rec.observe_time;
  }
  last_value_ = value;
  return out;
}

std::optional<Nanos> SpinDecoder::current_rtt() const {
  if (samples_.empty()) return std::nullopt;
  return samples_.back().rtt;
}

// ---------------------------------------------------------------------------

DirectionObserver::DirectionObserver(Direction dir, const ObserverConfig& cfg)
    : dir_(dir),
      l_(dir),
      q_(Mechanism::Q, dir, cfg.block_length, cfg.threshold, false),
      r_(Mechanism::R, dir, cfg.block_length, cfg.threshold, true),
      t_(dir) {}

void DirectionObserver::ingest(const TraceRecord& rec,
                               std::vector<ObserverEvent>& events) {
  ++packets_;
  bytes_ += rec.header.size_bytes;
  const Nanos now = rec.observe_time;

  if (auto s = spin_.ingest(rec)) events.emplace_back(RttEvent{dir_, *s});
  if (auto rep = l_.ingest(rec, bytes_)) events.emplace_back(*rep);
  if (auto rep = q_.ingest(rec.header.q, now, bytes_)) events.emplace_back(*rep);

  if (!q_.block_length() && q_.buffered_runs().size() >= 3) {
    const auto guess = deduce_n(q_.buffered_runs());
    deduced_ = guess;
    if (auto rep = q_.set_block_length(guess.n, now, bytes_)) events.emplace_back(*rep);
    if (!r_.block_length()) {
      if (auto rep = r_.set_block_length(guess.n, now, bytes_)) events.emplace_back(*rep);
    }
  }

  if (auto rep = r_.ingest(rec.header.r, now, bytes_)) events.emplace_back(*rep);
  if (auto rep = t_.ingest(rec, spin_.current_rtt(), bytes_)) events.emplace_back(*rep);
}

std::optional<LossReport> DirectionObserver::report(Mechanism m) const {
  switch (m) {
    case Mechanism::L: return l_.report();
    case Mechanism::Q: return q_.report();
    case Mechanism::R: return r_.report();
    case Mechanism::T: return t_.report();
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------

Observer::Observer(const ObserverConfig& cfg)
    : c2s_(Direction::ClientToServer, cfg), s2c_(Direction::ServerToClient, cfg) {}

void Observer::ingest(const TraceRecord& rec) {
  auto& dir = rec.direction == Direction::ClientToServer ? c2s_ : s2c_;
  dir.ingest(rec, events_);
  if (dir.packets_observed() == 1) {
    first_packet_[static_cast<int>(rec.direction)] = {rec.observe_time, rec.header.size_bytes};
  }
}

const DirectionObserver& Observer::direction(Direction d) const {
  return d == Direction::ClientToServer ? c2s_ : s2c_;
}

MechanismSummary Observer::summary(Direction d, Mechanism m) const {
  MechanismSummary s;
  s.final_report = direction(d).report(m);
  if (s.final_report) s.measurements = s.final_report->measurements;

  if (m == Mechanism::L) {
    // The L estimate exists from the first observed packet on.
    if (const auto& first = first_packet_[static_cast<int>(d)]) {
      s.first_report_time = first->first;
      s.first_report_bytes = first->second;
    }
    return s;
  }
  for (const auto& ev : events_) {
    const auto* rep = std::get_if<LossReport>(&ev);
    if (rep && rep->mechanism == m && rep->direction == d) {
      s.first_report_time = rep->report_time;
      s.first_report_bytes = rep->bytes_observed;
      break;
    }
  }
  return s;
}

std::optional<Nanos> Observer::median_rtt(Direction d) const {
  const auto& samples = direction(d).spin().rtt_samples();
  if (samples.empty()) return std::nullopt;
  std::vector<Nanos> rtts;
  rtts.reserve(samples.size());
  for (const auto& s : samples) rtts.push_back(s.rtt);
  auto mid = rtts.begin() + static_cast<std::ptrdiff_t>(rtts.size() / 2);
  std::nth_element(rtts.begin(), mid, rtts.end());
  return *mid;
}

// ---------------------------------------------------------------------------

std::string format_event(const ObserverEvent& ev) {
  char buf[192];
  if (const auto* rep = std::get_if<LossReport>(&ev)) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%lld,%llu,%lld,%.10g,%llu,",
                  std::string(to_string(rep->direction)).c_str(),
                  std::string(to_string(rep->mechanism)).c_str(),
                  static_cast<long long>(rep->report_time.count()),
                  static_cast<unsigned long long>(rep->packets_observed),
                  static_cast<long long>(rep->packets_lost_estimate),
                  rep->loss_rate_estimate,
                  static_cast<unsigned long long>(rep->bytes_observed));
  } else {
    const auto& rtt = std::get<RttEvent>(ev);
    std::snprintf(buf, sizeof(buf), "%s,spin,%lld,,,,,%lld",
                  std::string(to_string(rtt.direction)).c_str(),
                  static_cast<long long>(rtt.sample.edge_time.count()),
                  static_cast<long long>(rtt.sample.rtt.count()));
  }
  return buf;
}

void write_events_csv(std::ostream& out, std::span<const ObserverEvent> events) {
  out << kReportCsvHeader << '\n';
  for (const auto& ev : events) out << format_event(ev) << '\n';
}

}  // namespace efm
