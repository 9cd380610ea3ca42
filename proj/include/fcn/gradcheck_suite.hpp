#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fcn/grad_check.hpp"

namespace fcn {

/// One sampled check. `near_kink` marks points too close to a ReLU kink or
/// a max-pool tie for central differences to be meaningful; the harness
/// draws another sample instead.
struct GradCheckSample {
  double max_rel_err = 0.0;
  bool near_kink = false;
};

struct GradCheckCase {
  std::string name;
  std::function<GradCheckSample(std::uint64_t seed)> run;
};

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  bool passed = false;
  std::string error;  // set when the check threw or never left a kink
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  bool passed = true;
  double seconds = 0.0;
};

inline constexpr double kGradCheckTolerance = 1e-4;
inline constexpr double kGradCheckStep = 1e-5;

/// Every layer, the loss, the three attention variants at one and eight
/// heads, and the assembled model for all seven variants, in 64-bit.
std::vector<GradCheckCase> default_gradcheck_cases();

GradCheckReport run_gradcheck(const std::vector<GradCheckCase>& cases,
                              double tolerance = kGradCheckTolerance);

std::string format_gradcheck(const GradCheckReport& report);

}  // namespace fcn
