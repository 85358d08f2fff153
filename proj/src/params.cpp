#include "corenet/params.h"

namespace corenet {

Tensor ParameterSet::add(const std::string& name, const Shape& shape, Init init, Rng& rng) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  std::vector<double> values(numel_of(shape));
  for (double& v : values) {
    v = init.kind == Init::Kind::constant ? init.value : rng.truncated_normal(init.value);
  }
  Tensor t = Tensor::from(shape, std::move(values), dtype_);
  t.set_requires_grad(true);
  index_[name] = params_.size();
  params_.push_back({name, t, {}});
  return t;
}

Tensor ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw NotFoundError("no parameter named '" + name + "'");
  return params_[it->second].tensor;
}

std::vector<Tensor> ParameterSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

void ParameterSet::copy_values_from(const ParameterSet& other) {
  for (auto& p : params_) {
    const Tensor src = other.get(p.name);
    if (src.shape() != p.tensor.shape()) {
      throw DimensionError("parameter '" + p.name + "' has shape " + shape_str(p.tensor.shape()) + ", source has " +
                           shape_str(src.shape()));
    }
    const std::vector<double> v = src.to_vector();
    p.tensor.assign_(v);
  }
}

}  // namespace corenet
