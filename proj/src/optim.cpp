#include "corenet/optim.h"

#include <cmath>

namespace corenet {

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + name + "' (expected adam or sgd)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

void Optimizer::step(ParameterSet& params) {
  for (const auto& p : params.items()) {
    if (!p.tensor.has_grad()) throw ContractError("parameter '" + p.name + "' has no gradient");
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double correction1 = 1.0 - std::pow(hyper_.beta1, t);
  const double correction2 = 1.0 - std::pow(hyper_.beta2, t);
  for (auto& p : params.items()) {
    dispatch(p.tensor.dtype(), [&]<typename T>() {
      auto values = p.tensor.mutable_data<T>();
      auto grads = p.tensor.mutable_grad<T>();
      if (kind_ == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<T>(values[i] - lr_ * grads[i]);
        return;
      }
      auto& m = p.state.first_moment;
      auto& v = p.state.second_moment;
      if (m.size() != values.size()) {
        m.assign(values.size(), 0.0);
        v.assign(values.size(), 0.0);
      }
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double g = grads[i];
        m[i] = hyper_.beta1 * m[i] + (1.0 - hyper_.beta1) * g;
        v[i] = hyper_.beta2 * v[i] + (1.0 - hyper_.beta2) * g * g;
        const double m_hat = m[i] / correction1;
        const double v_hat = v[i] / correction2;
        values[i] = static_cast<T>(values[i] - lr_ * m_hat / (std::sqrt(v_hat) + hyper_.eps));
      }
    });
  }
}

}  // namespace corenet
