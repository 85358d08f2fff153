#pragma once

#include <string>
#include <vector>

#include "corenet/gradcheck.h"
#include "corenet/model.h"

namespace corenet {

struct GradCheckCase {
  std::string name;
  double tolerance = 0.0;
  GradCheckReport report;
  bool passed() const { return report.max_rel_error < tolerance; }
};

/// Small f64 model used by the composed-pipeline check: 4x4 token grid,
/// narrow widths and a larger init std so gradients are well above the
/// finite-difference noise floor.
ModelConfig gradcheck_model_config();

/// Isolated ops and layers (tolerance 1e-6); with `full`, also the composed
/// pipeline on a 4x4-grid episode (tolerance 1e-4).
std::vector<GradCheckCase> run_gradcheck_suite(bool full);

}  // namespace corenet
