#pragma once

#include <cstdint>
#include <optional>

namespace efm {

/// A completed phase of a square-wave bit: its level and how many packets
/// were assigned to it.
struct PhaseRun {
  bool level = false;
  std::uint64_t length = 0;

  friend bool operator==(const PhaseRun&, const PhaseRun&) = default;
};

/// Reordering-tolerant square-wave phase tracker used by both observers and
/// the R-bit reflector. A level change is committed only after `threshold`
/// consecutive packets at the opposite level; shorter opposite-level runs are
/// credited to the phase in progress.
class QPhaseDetector {
 public:
  static constexpr std::uint32_t kDefaultThreshold = 8;

  explicit QPhaseDetector(std::uint32_t threshold = kDefaultThreshold);

  /// Feeds one packet's bit. Returns the phase that was closed if this packet
  /// committed a level change.
  std::optional<PhaseRun> push(bool level);

  std::uint32_t threshold() const { return threshold_; }
  std::optional<bool> confirmed_level() const { return level_; }
  /// Packets assigned to the current confirmed phase so far (strays included,
  /// pending candidates excluded).
  std::uint64_t confirmed_count() const { return count_; }
  std::uint32_t candidate_count() const { return candidates_; }

 private:
  std::uint32_t threshold_;
  std::optional<bool> level_;
  std::uint64_t count_ = 0;
  std::uint32_t candidates_ = 0;
};

}  // namespace efm
