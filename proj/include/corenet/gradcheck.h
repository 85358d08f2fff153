#pragma once

#include <functional>
#include <string>
#include <vector>

#include "corenet/tensor.h"

namespace corenet {

/// Gradients below this magnitude are compared in absolute terms.
inline constexpr double kGradFloor = 1e-6;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;  // label of the tensor holding the worst entry
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

/// Compares reverse-mode gradients of `loss_fn` against the fourth-order
/// central difference (-f(p+2e) + 8f(p+e) - 8f(p-e) + f(p-2e)) / 12e for
/// every entry of every tensor in `params`.
/// The error for one entry is |a - n| / max(|a|, |n|, kGradFloor).
///
/// All params must be f64 leaves with requires_grad. Throws
/// ReproducibilityError if two evaluations at the same point disagree.
GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params,
                                  double eps = 1e-3, const std::vector<std::string>& labels = {});

}  // namespace corenet
