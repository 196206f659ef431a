#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "efm/core.hpp"
#include "efm/endpoint.hpp"
#include "efm/observer.hpp"
#include "efm/traffic.hpp"

namespace efm {

/// Up1: client -> observer, Up2: observer -> server,
/// Down1: server -> observer, Down2: observer -> client.
enum class Link : std::uint8_t { Up1, Up2, Down1, Down2 };

inline constexpr std::array<Link, 4> kAllLinks = {Link::Up1, Link::Up2, Link::Down1,
                                                  Link::Down2};

std::string_view to_string(Link link);
std::optional<Link> parse_link(std::string_view name);

struct Topology {
  std::array<Nanos, 4> delay = {std::chrono::milliseconds(10), std::chrono::milliseconds(10),
                                std::chrono::milliseconds(10), std::chrono::milliseconds(10)};

  Nanos& operator[](Link l) { return delay[static_cast<std::size_t>(l)]; }
  Nanos operator[](Link l) const { return delay[static_cast<std::size_t>(l)]; }
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Simple Gilbert model: Good passes, Bad drops. p is Good->Bad, r is
/// Bad->Good, both per packet.
struct GilbertParams {
  double p = 0.0;
  double r = 1.0;

  double stationary_loss() const { return p / (p + r); }
  double mean_burst() const { return 1.0 / r; }
};

/// r = 1/mean_burst, p = r * loss / (1 - loss).
GilbertParams gilbert_params_for(double target_loss, double mean_burst);

struct NoLoss {};
struct RandomLoss {
  double probability = 0.0;
};
struct GilbertLoss {
  GilbertParams params;
};
/// Drops the listed 0-based ordinals of packets entering the link. With
/// `t_marked_only` the ordinal counts only T-marked packets.
struct ScriptedLoss {
  std::set<std::uint64_t> ordinals;
  bool t_marked_only = false;
};

using LossModel = std::variant<NoLoss, RandomLoss, GilbertLoss, ScriptedLoss>;

struct Groundtruth {
  std::uint64_t arbiter_in = 0;
  std::uint64_t arbiter_dropped = 0;
  std::uint64_t bursts = 0;

  double rate() const {
    return arbiter_in == 0 ? 0.0
                           : static_cast<double>(arbiter_dropped) / static_cast<double>(arbiter_in);
  }
  double mean_burst() const {
    return bursts == 0 ? 0.0
                       : static_cast<double>(arbiter_dropped) / static_cast<double>(bursts);
  }
};

/// Applies a loss model to every packet entering one link and keeps the
/// groundtruth counters.
class Arbiter {
 public:
  Arbiter(LossModel model, std::uint64_t seed);

  /// True when the packet is dropped.
  bool step(const MarkedHeader& h);

  const Groundtruth& groundtruth() const { return gt_; }
  const LossModel& model() const { return model_; }

 private:
  double uniform();

  LossModel model_;
  std::mt19937_64 rng_;
  bool bad_ = false;
  bool last_dropped_ = false;
  std::uint64_t t_ordinal_ = 0;
  Groundtruth gt_;
};

/// Derives an independent RNG seed for one purpose from a run seed.
std::uint64_t derive_seed(std::uint64_t run_seed, std::uint64_t purpose);

struct DropRecord {
  Nanos time{0};
  /// Packets that had entered the link when this one was dropped, itself
  /// included.
  std::uint64_t entered = 0;
};

using TrafficConfig = std::variant<CbrConfig, DownloadConfig>;

struct SimConfig {
  Topology topology;
  /// Per-link loss; the standard experiments only put loss on Down1.
  std::array<LossModel, 4> loss = {NoLoss{}, NoLoss{}, NoLoss{}, NoLoss{}};
  TrafficConfig traffic = CbrConfig{};
  EndpointConfig endpoint;
  ObserverConfig observer;
  std::uint64_t seed = 1;
  /// Hard stop for runaway simulations.
  Nanos time_limit = std::chrono::hours(24);
  /// Keep every drop per link in SimResult::drops.
  bool record_drops = false;
};

struct SimResult {
  Observer observer;
  std::array<Groundtruth, 4> groundtruth{};
  EndpointLog client;
  EndpointLog server;
  Nanos end_time{0};
  std::uint64_t trace_records = 0;
  /// Download only: data packets acknowledged and total required.
  std::uint64_t data_delivered = 0;
  std::uint64_t data_total = 0;
  std::array<std::vector<DropRecord>, 4> drops;

  const Groundtruth& gt(Link l) const { return groundtruth[static_cast<std::size_t>(l)]; }
};

class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Runs the client-observer-server simulation to completion. Every packet
/// reaching the observer is fed to the result's Observer and, when `trace` is
/// given, written to it. Identical configurations give identical results.
SimResult run_simulation(const SimConfig& cfg, TraceWriter* trace = nullptr);

}  // namespace efm
