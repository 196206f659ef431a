#include "efm/netsim.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <tuple>
#include <vector>

namespace efm {

std::string_view to_string(Link link) {
  switch (link) {
    case Link::Up1: return "up1";
    case Link::Up2: return "up2";
    case Link::Down1: return "down1";
    case Link::Down2: return "down2";
  }
  return "?";
}

std::optional<Link> parse_link(std::string_view name) {
  for (Link l : kAllLinks) {
    if (to_string(l) == name) return l;
  }
  return std::nullopt;
}

GilbertParams gilbert_params_for(double target_loss, double mean_burst) {
  if (!(target_loss >= 0.0) || target_loss >= 1.0) {
    throw ConfigError("Gilbert target loss must be in [0, 1)");
  }
  if (!(mean_burst >= 1.0)) throw ConfigError("Gilbert mean burst must be >= 1");
  GilbertParams g;
  g.r = 1.0 / mean_burst;
  g.p = g.r * target_loss / (1.0 - target_loss);
  return g;
}

std::uint64_t derive_seed(std::uint64_t run_seed, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(run_seed),
                    static_cast<std::uint32_t>(run_seed >> 32),
                    static_cast<std::uint32_t>(purpose),
                    static_cast<std::uint32_t>(purpose >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// ---------------------------------------------------------------------------

Arbiter::Arbiter(LossModel model, std::uint64_t seed) : model_(std::move(model)), rng_(seed) {
  if (const auto* rnd = std::get_if<RandomLoss>(&model_)) {
    if (!(rnd->probability >= 0.0 && rnd->probability <= 1.0)) {
      throw ConfigError("random loss probability must be in [0, 1]");
    }
  } else if (const auto* ge = std::get_if<GilbertLoss>(&model_)) {
    const auto& g = ge->params;
    if (!(g.p >= 0.0 && g.p <= 1.0 && g.r >= 0.0 && g.r <= 1.0)) {
      throw ConfigError("Gilbert p and r must be in [0, 1]");
    }
  }
}

double Arbiter::uniform() {
  return static_cast<double>(rng_() >> 11) * 0x1.0p-53;
}

bool Arbiter::step(const MarkedHeader& h) {
  const std::uint64_t ordinal = gt_.arbiter_in++;
  bool drop = false;
  if (const auto* rnd = std::get_if<RandomLoss>(&model_)) {
    drop = uniform() < rnd->probability;
  } else if (const auto* ge = std::get_if<GilbertLoss>(&model_)) {
    const double u = uniform();
    if (bad_) {
      if (u < ge->params.r) bad_ = false;
    } else if (u < ge->params.p) {
      bad_ = true;
    }
    drop = bad_;
  } else if (const auto* script = std::get_if<ScriptedLoss>(&model_)) {
    if (!script->t_marked_only) {
      drop = script->ordinals.contains(ordinal);
    } else if (h.t) {
      drop = script->ordinals.contains(t_ordinal_++);
    }
  }
  if (drop) {
    ++gt_.arbiter_dropped;
    if (!last_dropped_) ++gt_.bursts;
  }
  last_dropped_ = drop;
  return drop;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kAckPacketSize = 50;

enum class EventKind : std::uint8_t { HostSend, Arrive, LossTimer, Timeout, AckTimer };

struct Event {
  Nanos time{0};
  std::uint64_t order = 0;
  EventKind kind = EventKind::HostSend;
  Role host = Role::Client;
  Link link = Link::Up1;
  std::uint32_t packet = 0;
  std::uint64_t generation = 0;
};

struct EventLater {
  bool operator()(const Event& a, const Event& b) const {
    return std::tie(a.time, a.order) > std::tie(b.time, b.order);
  }
};

struct Packet {
  Direction dir = Direction::ClientToServer;
  MarkedHeader header;
  AckFrame ack;
  bool data = false;
};

struct TimerSlot {
  std::optional<Nanos> at;
  std::uint64_t generation = 0;
};

int idx(Role r) { return r == Role::Client ? 0 : 1; }

class Simulation {
 public:
  Simulation(const SimConfig& cfg, TraceWriter* trace)
      : cfg_(cfg),
        trace_(trace),
        client_(Role::Client, cfg.endpoint),
        server_(Role::Server, cfg.endpoint) {
    for (Link l : kAllLinks) {
      arbiters_.emplace_back(cfg.loss[static_cast<std::size_t>(l)],
                             derive_seed(cfg.seed, static_cast<std::uint64_t>(l) + 1));
    }
    for (Link l : kAllLinks) {
      if (cfg.topology[l] <= Nanos(0)) throw ConfigError("link delays must be positive");
    }
    result_.observer = Observer(cfg.observer);
    if (const auto* cbr = std::get_if<CbrConfig>(&cfg.traffic)) {
      cbr_ = *cbr;
      if (cbr_->rate_pps == 0) throw ConfigError("CBR rate must be positive");
    } else {
      const auto& dl = std::get<DownloadConfig>(cfg.traffic);
      if (dl.volume_bytes == 0) throw ConfigError("download volume must be positive");
      download_ = dl;
      sender_.emplace(dl);
      acks_.emplace(dl);
      result_.data_total = sender_->total();
    }
  }

  SimResult run() {
    if (cbr_) {
      if (auto t = cbr_next_send(*cbr_, 0)) push(*t, EventKind::HostSend, Role::Client);
      const Nanos server_start = Nanos(1'000'000'000 / cbr_->rate_pps / 2);
      if (auto t = cbr_next_send(*cbr_, 0, server_start)) {
        server_start_ = server_start;
        push(*t, EventKind::HostSend, Role::Server);
      }
    } else {
      push(Nanos(0), EventKind::HostSend, Role::Client);
    }

    while (!queue_.empty()) {
      const Event ev = queue_.top();
      queue_.pop();
      if (ev.time > cfg_.time_limit) {
        throw SimulationError("simulation exceeded its time limit");
      }
      now_ = ev.time;
      dispatch(ev);
    }

    if (sender_ && !sender_->complete()) {
      throw SimulationError("event queue drained with " + std::to_string(sender_->delivered()) +
                            " of " + std::to_string(sender_->total()) +
                            " data packets delivered");
    }

    for (Link l : kAllLinks) {
      result_.groundtruth[static_cast<std::size_t>(l)] =
          arbiters_[static_cast<std::size_t>(l)].groundtruth();
    }
    result_.client = client_.log();
    result_.server = server_.log();
    result_.end_time = now_;
    if (sender_) result_.data_delivered = sender_->delivered();
    return std::move(result_);
  }

 private:
  MarkingEndpoint& host(Role r) { return r == Role::Client ? client_ : server_; }

  void push(Nanos t, EventKind kind, Role host, Link link = Link::Up1, std::uint32_t packet = 0,
            std::uint64_t generation = 0) {
    queue_.push(Event{t, order_++, kind, host, link, packet, generation});
  }

  void schedule(TimerSlot& slot, std::optional<Nanos> at, EventKind kind, Role r) {
    if (at) at = std::max(*at, now_);
    if (slot.at == at) return;
    ++slot.generation;
    slot.at = at;
    if (at) push(*at, kind, r, Link::Up1, 0, slot.generation);
  }

  std::uint32_t alloc(Packet p) {
    if (!free_.empty()) {
      const std::uint32_t i = free_.back();
      free_.pop_back();
      pool_[i] = std::move(p);
      return i;
    }
    pool_.push_back(std::move(p));
    return static_cast<std::uint32_t>(pool_.size() - 1);
  }

  void release(std::uint32_t i) {
    pool_[i].ack.ranges.clear();
    free_.push_back(i);
  }

  void dispatch(const Event& ev) {
    switch (ev.kind) {
      case EventKind::HostSend:
        on_host_send(ev.host);
        break;
      case EventKind::Arrive:
        on_arrive(ev.link, ev.packet);
        break;
      case EventKind::LossTimer: {
        auto& slot = loss_timer_[idx(ev.host)];
        if (ev.generation != slot.generation) return;
        slot.at.reset();
        handle_losses(ev.host, host(ev.host).on_loss_timer(now_));
        update_timers(ev.host);
        break;
      }
      case EventKind::Timeout: {
        auto& slot = timeout_timer_[idx(ev.host)];
        if (ev.generation != slot.generation) return;
        slot.at.reset();
        handle_losses(ev.host, host(ev.host).on_timeout(now_));
        update_timers(ev.host);
        break;
      }
      case EventKind::AckTimer: {
        if (ev.generation != ack_timer_.generation) return;
        ack_timer_.at.reset();
        if (acks_->deadline()) send_client_ack();
        break;
      }
    }
  }

  // -- transmission --------------------------------------------------------

  void transmit(Role from, const MarkedHeader& h, AckFrame ack, bool data) {
    Packet p;
    p.dir = from == Role::Client ? Direction::ClientToServer : Direction::ServerToClient;
    p.header = h;
    p.ack = std::move(ack);
    p.data = data;
    enter_link(from == Role::Client ? Link::Up1 : Link::Down1, alloc(std::move(p)));
  }

  void enter_link(Link link, std::uint32_t packet) {
    auto& arb = arbiters_[static_cast<std::size_t>(link)];
    if (arb.step(pool_[packet].header)) {
      if (cfg_.record_drops) {
        result_.drops[static_cast<std::size_t>(link)].push_back(
            DropRecord{now_, arb.groundtruth().arbiter_in});
      }
      release(packet);
      return;
    }
    push(now_ + cfg_.topology[link], EventKind::Arrive, Role::Client, link, packet);
  }

  void on_arrive(Link link, std::uint32_t packet) {
    switch (link) {
      case Link::Up1:
      case Link::Down1: {
        const Packet& p = pool_[packet];
        const TraceRecord rec{now_, p.dir, p.header};
        result_.observer.ingest(rec);
        if (trace_ != nullptr) trace_->write(rec);
        ++result_.trace_records;
        enter_link(link == Link::Up1 ? Link::Up2 : Link::Down2, packet);
        break;
      }
      case Link::Up2:
        deliver(Role::Server, packet);
        release(packet);
        break;
      case Link::Down2:
        deliver(Role::Client, packet);
        release(packet);
        break;
    }
  }

  void deliver(Role to, std::uint32_t packet) {
    const Packet& p = pool_[packet];
    auto& ep = host(to);
    const AckOutcome outcome =
        ep.on_receive(now_, p.header, p.ack.empty() ? nullptr : &p.ack);

    if (download_) {
      if (to == Role::Server) {
        if (p.data) started_ = true;
        std::uint64_t acked_data = 0;
        for (const auto& a : outcome.newly_acked) acked_data += a.data ? 1 : 0;
        sender_->on_acked(acked_data);
        handle_losses(Role::Server, outcome.newly_lost);
        try_send_data();
      } else {
        handle_losses(Role::Client, outcome.newly_lost);
        if (p.data) {
          if (acks_->on_data(now_)) {
            send_client_ack();
          } else {
            schedule(ack_timer_, acks_->deadline(), EventKind::AckTimer, Role::Client);
          }
        }
      }
    }
    update_timers(to);
  }

  void handle_losses(Role r, const std::vector<SentInfo>& lost) {
    if (!download_ || lost.empty()) return;
    std::uint64_t lost_data = 0;
    Nanos newest{0};
    for (const auto& s : lost) {
      if (!s.data) continue;
      ++lost_data;
      newest = std::max(newest, s.sent_time);
    }
    if (lost_data == 0) return;
    if (r == Role::Server) {
      sender_->on_lost(lost_data, newest, now_);
      try_send_data();
    } else if (!started_client_) {
      // The request itself went missing.
      send_request();
    }
  }

  void update_timers(Role r) {
    const auto& det = host(r).loss_detector();
    schedule(loss_timer_[idx(r)], det.loss_time(), EventKind::LossTimer, r);
    if (download_) {
      schedule(timeout_timer_[idx(r)], det.timeout_time(), EventKind::Timeout, r);
    }
  }

  // -- traffic -------------------------------------------------------------

  void on_host_send(Role r) {
    if (cbr_) {
      auto& ep = host(r);
      auto& sent = cbr_sent_[idx(r)];
      const MarkedHeader h = ep.stamp(now_, cbr_->packet_size, false);
      transmit(r, h, ep.make_ack(), false);
      ++sent;
      const Nanos start = r == Role::Client ? Nanos(0) : server_start_;
      if (auto next = cbr_next_send(*cbr_, sent, start)) push(*next, EventKind::HostSend, r);
      update_timers(r);
      return;
    }
    if (r == Role::Client) {
      send_request();
    } else {
      send_timer_pending_ = false;
      try_send_data();
    }
  }

  void send_request() {
    const MarkedHeader h = client_.stamp(now_, kAckPacketSize, true);
    transmit(Role::Client, h, client_.make_ack(), true);
    update_timers(Role::Client);
  }

  void send_client_ack() {
    started_client_ = true;
    const MarkedHeader h = client_.stamp(now_, kAckPacketSize, false);
    transmit(Role::Client, h, client_.make_ack(), false);
    acks_->on_ack_sent();
    schedule(ack_timer_, std::nullopt, EventKind::AckTimer, Role::Client);
  }

  void try_send_data() {
    if (!started_) return;
    while (sender_->has_pending() && sender_->window_open()) {
      if (now_ < sender_->next_allowed_send()) {
        if (!send_timer_pending_) {
          send_timer_pending_ = true;
          push(sender_->next_allowed_send(), EventKind::HostSend, Role::Server);
        }
        break;
      }
      const MarkedHeader h = server_.stamp(now_, download_->packet_size, true);
      transmit(Role::Server, h, server_.make_ack(), true);
      sender_->on_sent(now_);
    }
    update_timers(Role::Server);
  }

  const SimConfig& cfg_;
  TraceWriter* trace_;
  SimResult result_;
  Nanos now_{0};

  std::priority_queue<Event, std::vector<Event>, EventLater> queue_;
  std::uint64_t order_ = 0;
  std::vector<Packet> pool_;
  std::vector<std::uint32_t> free_;
  std::vector<Arbiter> arbiters_;

  MarkingEndpoint client_;
  MarkingEndpoint server_;

  std::optional<CbrConfig> cbr_;
  std::array<std::uint64_t, 2> cbr_sent_{};
  Nanos server_start_{0};

  std::optional<DownloadConfig> download_;
  std::optional<DownloadSender> sender_;
  std::optional<AckScheduler> acks_;
  bool started_ = false;
  bool started_client_ = false;
  bool send_timer_pending_ = false;

  std::array<TimerSlot, 2> loss_timer_{};
  std::array<TimerSlot, 2> timeout_timer_{};
  TimerSlot ack_timer_;
};

}  // namespace

SimResult run_simulation(const SimConfig& cfg, TraceWriter* trace) {
  Simulation sim(cfg, trace);
  return sim.run();
}

}  // namespace efm
