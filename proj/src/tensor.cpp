#include "corenet/tensor.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace corenet {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

namespace detail {

bool Node::has_grad() const {
  return std::visit([](const auto& g) { return !g.empty(); }, grad);
}

std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

namespace {

std::shared_ptr<Node> make_leaf(const Shape& shape, DType dtype) {
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->dtype = dtype;
  node->seq = next_seq();
  if (dtype == DType::f32) {
    node->value = std::vector<float>(numel_of(shape), 0.0f);
    node->grad = std::vector<float>();
  } else {
    node->value = std::vector<double>(numel_of(shape), 0.0);
    node->grad = std::vector<double>();
  }
  return node;
}

}  // namespace
}  // namespace detail

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(const Shape& shape, DType dtype) { return Tensor(detail::make_leaf(shape, dtype)); }

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  Tensor t = zeros(shape, dtype);
  t.fill_(value);
  return t;
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, DType dtype) {
  if (values.size() != numel_of(shape)) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " needs " + std::to_string(numel_of(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  Tensor t = zeros(shape, dtype);
  if (dtype == DType::f64) {
    t.node_->value = std::move(values);
  } else {
    t.assign_(values);
  }
  return t;
}

Tensor Tensor::from(const Shape& shape, std::vector<float> values) {
  if (values.size() != numel_of(shape)) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " needs " + std::to_string(numel_of(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  Tensor t = zeros(shape, DType::f32);
  t.node_->value = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

double Tensor::at(std::size_t flat) const {
  return dispatch(dtype(), [&]<typename T>() { return static_cast<double>(node_->values<T>().at(flat)); });
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&]<typename T>() {
    const auto& v = node_->values<T>();
    return std::vector<double>(v.begin(), v.end());
  });
}

void Tensor::check_leaf() const {
  if (!node_->inputs.empty() || node_->backward) {
    throw ContractError(std::string("cannot mutate the output of op '") + node_->op + "'");
  }
}

void Tensor::fill_(double value) {
  check_leaf();
  dispatch(dtype(), [&]<typename T>() {
    auto& v = node_->values<T>();
    std::fill(v.begin(), v.end(), static_cast<T>(value));
  });
}

void Tensor::assign_(std::span<const double> values) {
  check_leaf();
  if (values.size() != numel()) {
    throw DimensionError("assign of " + std::to_string(values.size()) + " values to " + shape_str(shape()));
  }
  dispatch(dtype(), [&]<typename T>() {
    auto& v = node_->values<T>();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(values[i]);
  });
}

void Tensor::set_(std::size_t flat, double value) {
  check_leaf();
  dispatch(dtype(), [&]<typename T>() { node_->values<T>().at(flat) = static_cast<T>(value); });
}

Tensor& Tensor::set_requires_grad(bool flag) {
  check_leaf();
  node_->requires_grad = flag;
  return *this;
}

Tensor Tensor::grad() const {
  Tensor g = zeros(shape(), dtype());
  if (has_grad()) {
    g.node_->value = node_->grad;
  }
  return g;
}

std::vector<double> Tensor::grad_vector() const { return grad().to_vector(); }

void Tensor::zero_grad() {
  dispatch(dtype(), [&]<typename T>() {
    auto& g = std::get<std::vector<T>>(node_->grad);
    g.assign(numel(), T(0));
  });
}

Tensor Tensor::detach() const {
  Tensor t(std::make_shared<detail::Node>());
  t.node_->shape = node_->shape;
  t.node_->dtype = node_->dtype;
  t.node_->value = node_->value;
  t.node_->grad = dtype() == DType::f32 ? Buffer(std::vector<float>()) : Buffer(std::vector<double>());
  t.node_->seq = detail::next_seq();
  t.node_->op = "detach";
  return t;
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->op = "leaf";
  t.node_->requires_grad = node_->requires_grad;
  return t;
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return detach();
  Tensor t = zeros(shape(), target);
  dispatch(dtype(), [&]<typename S>() {
    const auto& src = node_->values<S>();
    dispatch(target, [&]<typename D>() {
      auto& dst = t.node_->values<D>();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
    });
  });
  return t;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward on an undefined tensor");
  if (loss.numel() != 1) throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw ContractError("loss does not depend on any tensor that requires grad");

  // Collect every reachable node that participates in differentiation.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{loss.node().get()};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  dispatch(loss.dtype(), [&]<typename T>() { loss.node()->grads<T>()[0] += T(1); });
  for (detail::Node* n : order) {
    if (!n->backward || !n->has_grad()) continue;
    n->backward(*n);
    // Interior gradients are not needed once propagated.
    std::visit([](auto& g) { std::decay_t<decltype(g)>().swap(g); }, n->grad);
  }
}

}  // namespace corenet
