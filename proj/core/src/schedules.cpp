#include "smdk/schedules.hpp"

#include <cmath>

namespace smdk {

KSchedule KSchedule::linear(int k_min, int k_max, int total_steps) {
  KSchedule s{k_min, k_max, total_steps, Mode::kLinear};
  s.validate();
  return s;
}

KSchedule KSchedule::constant(int k, int total_steps) {
  KSchedule s{k, k, total_steps, Mode::kConstant};
  s.validate();
  return s;
}

void KSchedule::validate() const {
  if (k_min < 1 || k_min > k_max)
    throw ValueError("k schedule: need 1 <= k_min <= k_max, got " +
                     std::to_string(k_min) + ".." + std::to_string(k_max));
  if (total_steps < 1) throw ValueError("k schedule: total_steps must be >= 1");
}

int k_at(const KSchedule& sched, int step) {
  if (step < 0 || step >= sched.total_steps)
    throw ValueError("k_at: step " + std::to_string(step) +
                     " out of range [0," + std::to_string(sched.total_steps) + ")");
  if (sched.mode == KSchedule::Mode::kConstant) return sched.k_max;
  int64_t span = sched.k_max - sched.k_min;
  int64_t denom = sched.total_steps > 1 ? sched.total_steps - 1 : 1;
  return sched.k_min + static_cast<int>(span * step / denom);
}

double lr_at(const LrSchedule& sched, int step) {
  double frac = static_cast<double>(step) / sched.total_steps;
  if (frac >= 1.0) return 0.0;
  if (sched.decay == LrDecay::kLinear) return sched.lr0 * (1.0 - frac);
  return sched.lr0 * 0.5 * (1.0 + std::cos(M_PI * frac));
}

}  // namespace smdk
