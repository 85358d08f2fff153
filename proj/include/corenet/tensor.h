#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "corenet/errors.h"

namespace corenet {

enum class DType : std::uint8_t { f32, f64 };

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

/// Invokes `fn.template operator()<T>()` with T matching `dtype`.
template <typename Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::f32) return fn.template operator()<float>();
  return fn.template operator()<double>();
}

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

namespace detail {

/// One recorded value in the computation graph. Nodes are created in a
/// strictly increasing sequence, so sorting reachable nodes by `seq` replays
/// the tape in reverse.
struct Node {
  Shape shape;
  DType dtype = DType::f64;
  Buffer value;
  Buffer grad;  // empty vector until first accumulation
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  template <typename T>
  std::vector<T>& values() { return std::get<std::vector<T>>(value); }
  template <typename T>
  const std::vector<T>& values() const { return std::get<std::vector<T>>(value); }
  /// Gradient buffer, zero-allocated on first access.
  template <typename T>
  std::vector<T>& grads() {
    auto& g = std::get<std::vector<T>>(grad);
    if (g.empty()) g.assign(numel_of(shape), T(0));
    return g;
  }
  bool has_grad() const;
};

std::uint64_t next_seq();

}  // namespace detail

/// Whether ops currently record graph edges. Thread-local.
bool grad_enabled();

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor handle. Copies share the underlying node; values of
/// non-leaf tensors are never modified after construction.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, DType dtype = DType::f64);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::f64);
  static Tensor from(const Shape& shape, std::vector<double> values, DType dtype = DType::f64);
  static Tensor from(const Shape& shape, std::vector<float> values);
  static Tensor scalar(double value, DType dtype = DType::f64);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return numel_of(node_->shape); }
  DType dtype() const { return node_->dtype; }

  template <typename T>
  std::span<const T> data() const {
    check_dtype<T>();
    return node_->values<T>();
  }
  /// Writable view; only leaves may be mutated (parameters, gradient checks).
  template <typename T>
  std::span<T> mutable_data() {
    check_leaf();
    check_dtype<T>();
    return node_->values<T>();
  }

  double at(std::size_t flat) const;
  double item() const;
  std::vector<double> to_vector() const;

  void fill_(double value);
  void assign_(std::span<const double> values);
  void set_(std::size_t flat, double value);

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const { return node_->has_grad(); }
  /// Gradient as a constant tensor (zeros if none accumulated).
  Tensor grad() const;
  std::vector<double> grad_vector() const;
  template <typename T>
  std::span<T> mutable_grad() {
    check_dtype<T>();
    return node_->grads<T>();
  }
  /// Allocates (or resets) the gradient buffer to zeros.
  void zero_grad();

  /// Same values, cut from the graph.
  Tensor detach() const;
  /// Deep copy with its own storage; a fresh leaf.
  Tensor clone() const;
  /// Value conversion; the result is a constant leaf.
  Tensor to(DType dtype) const;

  const char* op_name() const { return node_->op; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  template <typename T>
  void check_dtype() const {
    if (dtype_of<T>() != node_->dtype) {
      throw ContractError(std::string("tensor dtype is ") + dtype_name(node_->dtype));
    }
  }
  void check_leaf() const;

  std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable tensor that requires grad; intermediate gradients are released.
void backward(const Tensor& loss);

}  // namespace corenet
