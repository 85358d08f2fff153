#pragma once

#include <cstdint>
#include <string>

#include "corenet/params.h"

namespace corenet {

enum class OptimizerKind { sgd, adam };

OptimizerKind parse_optimizer(const std::string& name);
std::string to_string(OptimizerKind kind);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Plain SGD (p <- p - lr g) or Adam with bias correction.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, AdamHyper hyper = {}) : kind_(kind), lr_(lr), hyper_(hyper) {}

  /// Applies one update to every parameter. Throws ContractError if any
  /// parameter has no gradient buffer.
  void step(ParameterSet& params);

  std::uint64_t steps() const { return steps_; }
  OptimizerKind kind() const { return kind_; }
  double lr() const { return lr_; }

 private:
  OptimizerKind kind_;
  double lr_;
  AdamHyper hyper_;
  std::uint64_t steps_ = 0;
};

}  // namespace corenet
