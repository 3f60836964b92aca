#pragma once

#include <string>

#include "smdk/tensor.hpp"

namespace smdk {

// Linear curriculum for the activated expert count.
struct KSchedule {
  int k_min = 2;
  int k_max = 8;
  int total_steps = 1000;
  enum class Mode { kLinear, kConstant };
  Mode mode = Mode::kLinear;

  static KSchedule linear(int k_min, int k_max, int total_steps);
  static KSchedule constant(int k, int total_steps);
  void validate() const;
};

// k(step) = k_min + floor((k_max - k_min) * step / max(1, T-1)) in linear
// mode; k_max always in constant mode.
int k_at(const KSchedule& sched, int step);

enum class LrDecay { kCosine, kLinear };

struct LrSchedule {
  double lr0 = 2.5e-4;
  int total_steps = 1000;
  LrDecay decay = LrDecay::kCosine;
};

double lr_at(const LrSchedule& sched, int step);

}  // namespace smdk
