#include "efm/phase_detector.hpp"

#include <stdexcept>

namespace efm {

QPhaseDetector::QPhaseDetector(std::uint32_t threshold) : threshold_(threshold) {
  if (threshold_ == 0) throw std::invalid_argument("phase threshold must be >= 1");
}

std::optional<PhaseRun> QPhaseDetector::push(bool level) {
  if (!level_) {
    level_ = level;
    count_ = 1;
    return std::nullopt;
  }
  if (level == *level_) {
    count_ += candidates_ + 1;
    candidates_ = 0;
    return std::nullopt;
  }
  if (++candidates_ < threshold_) return std::nullopt;

  PhaseRun closed{*level_, count_};
  level_ = level;
  count_ = candidates_;
  candidates_ = 0;
  return closed;
}

}  // namespace efm
