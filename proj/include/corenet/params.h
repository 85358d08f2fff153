#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "corenet/rng.h"
#include "corenet/tensor.h"

namespace corenet {

/// How a parameter is initialized.
struct Init {
  enum class Kind { constant, truncated_normal };
  Kind kind = Kind::constant;
  double value = 0.0;  // constant value, or std for truncated_normal

  static Init zeros() { return {Kind::constant, 0.0}; }
  static Init constant(double v) { return {Kind::constant, v}; }
  static Init trunc_normal(double std) { return {Kind::truncated_normal, std}; }
};

/// Per-parameter optimizer slots (Adam moments), sized like the tensor.
struct OptimizerSlots {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
};

struct Parameter {
  std::string name;
  Tensor tensor;
  OptimizerSlots state;
};

/// Ordered registry of named trainable tensors.
class ParameterSet {
 public:
  explicit ParameterSet(DType dtype = DType::f32) : dtype_(dtype) {}

  /// Registers a new parameter; names must be unique.
  Tensor add(const std::string& name, const Shape& shape, Init init, Rng& rng);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor get(const std::string& name) const;
  std::span<Parameter> items() { return params_; }
  std::span<const Parameter> items() const { return params_; }
  std::vector<Tensor> tensors() const;

  /// Resets every gradient to an allocated zero buffer.
  void zero_grad();
  std::size_t scalar_count() const;
  DType dtype() const { return dtype_; }

  /// Copies values from `other` (matching names and shapes).
  void copy_values_from(const ParameterSet& other);

 private:
  DType dtype_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace corenet
