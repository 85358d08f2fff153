#include "corenet/gradcheck.h"

#include <algorithm>
#include <cmath>

namespace corenet {

GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params,
                                  double eps, const std::vector<std::string>& labels) {
  std::vector<Tensor> ps = params;
  for (const Tensor& p : ps) {
    if (p.dtype() != DType::f64) throw ContractError("finite_diff_check requires f64 parameters");
    if (!p.requires_grad()) throw ContractError("finite_diff_check: parameter does not require grad");
  }
  for (Tensor& p : ps) p.zero_grad();
  const Tensor loss = loss_fn();
  const double base = loss.item();
  backward(loss);

  auto evaluate = [&]() {
    NoGradGuard guard;
    return loss_fn().item();
  };
  const double again = evaluate();
  if (again != base) {
    throw ReproducibilityError("loss function is not deterministic: " + std::to_string(base) + " vs " +
                               std::to_string(again));
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < ps.size(); ++pi) {
    Tensor& p = ps[pi];
    const std::vector<double> analytic = p.grad_vector();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double original = p.at(i);
      auto at_offset = [&](double k) {
        p.set_(i, original + k * eps);
        return evaluate();
      };
      const double up2 = at_offset(2.0), up1 = at_offset(1.0), down1 = at_offset(-1.0), down2 = at_offset(-2.0);
      p.set_(i, original);
      const double numeric = (-up2 + 8.0 * up1 - 8.0 * down1 + down2) / (12.0 * eps);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kGradFloor});
      ++report.entries_checked;
      if (err > report.max_rel_error || report.entries_checked == 1) {
        report.max_rel_error = err;
        report.worst_tensor = pi < labels.size() ? labels[pi] : "param[" + std::to_string(pi) + "]";
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace corenet
