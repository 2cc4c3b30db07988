#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "latentflow/core/error.hpp"

namespace latentflow {

enum class ScheduleKind { constant, exponential, milestones, linear_warmup };

/// Learning-rate schedule.
///  - exponential: base · rate^(step / interval)
///  - milestones:  base · factor^(number of milestones ≤ epoch)
///  - linear_warmup: base · min(1, max(step, 1) / warmup_steps); step 0 is
///    lifted to 1 so the emitted rate stays positive.
struct LrSchedule {
  ScheduleKind kind = ScheduleKind::constant;
  double base = 1e-3;
  double decay_rate = 0.1;
  std::size_t decay_interval = 10000;
  std::vector<std::size_t> milestones{};
  double factor = 0.1;
  std::size_t warmup_steps = 1;

  void validate() const {
    if (!(base > 0)) throw ConfigError("schedule: base rate must be > 0");
    if (kind == ScheduleKind::exponential && (!(decay_rate > 0) || decay_interval == 0)) {
      throw ConfigError("schedule: exponential decay needs rate > 0 and interval > 0");
    }
    if (kind == ScheduleKind::milestones && !(factor > 0)) throw ConfigError("schedule: milestone factor must be > 0");
    if (kind == ScheduleKind::linear_warmup && warmup_steps == 0) throw ConfigError("schedule: warmup steps must be > 0");
  }

  double rate(std::size_t step, std::size_t epoch) const {
    switch (kind) {
      case ScheduleKind::constant:
        return base;
      case ScheduleKind::exponential:
        return base * std::pow(decay_rate, static_cast<double>(step) / static_cast<double>(decay_interval));
      case ScheduleKind::milestones: {
        const auto passed = std::count_if(milestones.begin(), milestones.end(), [&](std::size_t m) { return m <= epoch; });
        return base * std::pow(factor, static_cast<double>(passed));
      }
      case ScheduleKind::linear_warmup: {
        const double s = static_cast<double>(std::max<std::size_t>(step, 1));
        return base * std::min(1.0, s / static_cast<double>(warmup_steps));
      }
    }
    return base;
  }
};

inline double schedule_rate(const LrSchedule& schedule, std::size_t step, std::size_t epoch) {
  return schedule.rate(step, epoch);
}

inline const char* schedule_kind_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::exponential: return "exponential";
    case ScheduleKind::milestones: return "milestones";
    case ScheduleKind::linear_warmup: return "linear_warmup";
  }
  return "constant";
}

}  // namespace latentflow
