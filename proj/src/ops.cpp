#include "corenet/ops.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace corenet::ops {

using detail::Node;

namespace {

template <typename T>
using MatRef = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatRef = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ContractError(std::string(op) + ": mixed dtypes " + dtype_name(a.dtype()) + " and " + dtype_name(b.dtype()));
  }
}

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined input");
}

/// Output node for an op; records graph edges when any input is tracked.
struct Output {
  std::shared_ptr<Node> node;
  bool track = false;

  Tensor tensor() const { return Tensor(node); }
};

Output make_output(const Shape& shape, DType dtype, const char* op, std::initializer_list<const Tensor*> inputs) {
  Output out;
  out.node = Tensor::zeros(shape, dtype).node();
  out.node->op = op;
  if (grad_enabled()) {
    for (const Tensor* t : inputs) {
      if (t && t->defined() && t->requires_grad()) out.track = true;
    }
  }
  if (out.track) {
    out.node->requires_grad = true;
    for (const Tensor* t : inputs) {
      if (t && t->defined()) out.node->inputs.push_back(t->node());
    }
  }
  return out;
}

template <typename T>
std::vector<T>& vals(const Tensor& t) {
  return t.node()->values<T>();
}

/// Gradient buffer of an input if it participates in differentiation.
template <typename T>
std::vector<T>* grad_of(const std::shared_ptr<Node>& n) {
  return n->requires_grad ? &n->grads<T>() : nullptr;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

/// For each flat index of `out`, the flat index of the broadcast source.
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t n = numel_of(out);
  std::vector<std::size_t> idx(n);
  if (in == out) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }
  const std::size_t r = out.size();
  const std::size_t off = r - in.size();
  std::vector<std::size_t> in_stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > off;) {
    const std::size_t e = in[i - off];
    in_stride[i] = e == 1 ? 0 : s;
    s *= e;
  }
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    idx[flat] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      src += in_stride[d];
      if (counter[d] < out[d]) break;
      src -= in_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

enum class BinaryKind { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  check_defined(a, name);
  check_defined(b, name);
  check_same_dtype(a, b, name);
  const Shape shape = broadcast_shape(a.shape(), b.shape(), name);
  Output out = make_output(shape, a.dtype(), name, {&a, &b});
  dispatch(a.dtype(), [&]<typename T>() {
    const auto& va = vals<T>(a);
    const auto& vb = vals<T>(b);
    auto& vo = out.node->values<T>();
    const bool same = a.shape() == shape && b.shape() == shape;
    std::vector<std::size_t> ia, ib;
    if (!same) {
      ia = broadcast_index(a.shape(), shape);
      ib = broadcast_index(b.shape(), shape);
    }
    for (std::size_t i = 0; i < vo.size(); ++i) {
      const T x = same ? va[i] : va[ia[i]];
      const T y = same ? vb[i] : vb[ib[i]];
      vo[i] = kind == BinaryKind::add ? x + y : kind == BinaryKind::sub ? x - y : x * y;
    }
    if (!out.track) return;
    out.node->backward = [kind, same, ia = std::move(ia), ib = std::move(ib)](Node& self) {
      auto& g = self.grads<T>();
      auto& na = self.inputs[0];
      auto& nb = self.inputs[1];
      auto* ga = grad_of<T>(na);
      auto* gb = grad_of<T>(nb);
      const auto& xa = na->values<T>();
      const auto& xb = nb->values<T>();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t pa = same ? i : ia[i];
        const std::size_t pb = same ? i : ib[i];
        switch (kind) {
          case BinaryKind::add:
            if (ga) (*ga)[pa] += g[i];
            if (gb) (*gb)[pb] += g[i];
            break;
          case BinaryKind::sub:
            if (ga) (*ga)[pa] += g[i];
            if (gb) (*gb)[pb] -= g[i];
            break;
          case BinaryKind::mul:
            if (ga) (*ga)[pa] += g[i] * xb[pb];
            if (gb) (*gb)[pb] += g[i] * xa[pa];
            break;
        }
      }
    };
  });
  return out.tensor();
}

/// Pointwise unary map whose derivative is expressed through input x and
/// output y.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, const char* name, Fwd fwd, Deriv deriv) {
  check_defined(a, name);
  Output out = make_output(a.shape(), a.dtype(), name, {&a});
  dispatch(a.dtype(), [&]<typename T>() {
    const auto& va = vals<T>(a);
    auto& vo = out.node->values<T>();
    for (std::size_t i = 0; i < vo.size(); ++i) vo[i] = static_cast<T>(fwd(va[i]));
    if (!out.track) return;
    out.node->backward = [deriv](Node& self) {
      auto& g = self.grads<T>();
      auto& in = self.inputs[0];
      auto& gi = in->grads<T>();
      const auto& x = in->values<T>();
      const auto& y = self.values<T>();
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * static_cast<T>(deriv(x[i], y[i]));
    };
  });
  return out.tensor();
}

/// Splits `shape` around `axis` into (outer, length, inner).
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::size_t valid_kernel(std::size_t k) {
  if (k != 1 && k != 3 && k != 5 && k != 7) {
    throw ConfigError("conv2d: unsupported kernel size " + std::to_string(k) + " (supported: 1, 3, 5, 7)");
  }
  return k;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::mul, "hadamard"); }

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, "scale", [factor](auto x) { return x * factor; }, [factor](auto, auto) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      a, "add_scalar", [value](auto x) { return x + value; }, [](auto, auto) { return 1.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](auto x) {
        using T = decltype(x);
        // Split by sign so exp never overflows.
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](auto, auto y) { return y * (1 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](auto x) { return x > 0 ? x : decltype(x)(0); }, [](auto x, auto) { return x > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  return unary(
      a, "gelu",
      [](auto x) {
        using T = decltype(x);
        return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
      },
      [](auto x, auto) {
        const double v = static_cast<double>(x);
        return 0.5 * (1.0 + std::erf(v * M_SQRT1_2)) + v * std::exp(-0.5 * v * v) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
      });
}

Tensor elementwise(Elementwise op, const Tensor& a, const Tensor* b, double factor) {
  auto need_b = [&]() -> const Tensor& {
    if (!b) throw ContractError("elementwise: binary op needs a second operand");
    return *b;
  };
  switch (op) {
    case Elementwise::add:
      return add(a, need_b());
    case Elementwise::hadamard:
      return mul(a, need_b());
    case Elementwise::scale:
      return scale(a, factor);
    case Elementwise::sigmoid:
      return sigmoid(a);
    case Elementwise::relu:
      return relu(a);
    case Elementwise::gelu:
      return gelu(a);
  }
  throw ContractError("elementwise: unknown op");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  check_same_dtype(a, b, "matmul");
  if (a.rank() < 2 || b.rank() < 2 || a.shape()[a.rank() - 1] != b.shape()[b.rank() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t n = b.shape()[b.rank() - 1];
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = broadcast_shape(batch_a, batch_b, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch extents of " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are not broadcastable");
  }
  Shape shape = batch;
  shape.push_back(m);
  shape.push_back(n);
  Output out = make_output(shape, a.dtype(), "matmul", {&a, &b});
  const std::vector<std::size_t> ia = broadcast_index(batch_a, batch);
  const std::vector<std::size_t> ib = broadcast_index(batch_b, batch);

  dispatch(a.dtype(), [&]<typename T>() {
    const auto& va = vals<T>(a);
    const auto& vb = vals<T>(b);
    auto& vo = out.node->values<T>();
    for (std::size_t p = 0; p < ia.size(); ++p) {
      ConstMatRef<T> A(va.data() + ia[p] * m * k, m, k);
      ConstMatRef<T> B(vb.data() + ib[p] * k * n, k, n);
      MatRef<T> C(vo.data() + p * m * n, m, n);
      C.noalias() = A * B;
    }
    if (!out.track) return;
    out.node->backward = [m, k, n, ia, ib](Node& self) {
      const auto& g = self.grads<T>();
      auto& na = self.inputs[0];
      auto& nb = self.inputs[1];
      auto* ga = grad_of<T>(na);
      auto* gb = grad_of<T>(nb);
      const auto& xa = na->values<T>();
      const auto& xb = nb->values<T>();
      for (std::size_t p = 0; p < ia.size(); ++p) {
        ConstMatRef<T> G(g.data() + p * m * n, m, n);
        if (ga) {
          MatRef<T> GA(ga->data() + ia[p] * m * k, m, k);
          ConstMatRef<T> B(xb.data() + ib[p] * k * n, k, n);
          GA.noalias() += G * B.transpose();
        }
        if (gb) {
          MatRef<T> GB(gb->data() + ib[p] * k * n, k, n);
          ConstMatRef<T> A(xa.data() + ia[p] * m * k, m, k);
          GB.noalias() += A.transpose() * G;
        }
      }
    };
  });
  return out.tensor();
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  check_defined(a, "reshape");
  if (numel_of(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Output out = make_output(shape, a.dtype(), "reshape", {&a});
  out.node->value = a.node()->value;
  if (out.track) {
    out.node->backward = [](Node& self) {
      dispatch(self.dtype, [&]<typename T>() {
        auto& g = self.grads<T>();
        auto& gi = self.inputs[0]->grads<T>();
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
      });
    };
  }
  return out.tensor();
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  check_defined(a, "permute");
  const std::size_t r = a.rank();
  if (axes.size() != r) throw DimensionError("permute: axis list does not match rank of " + shape_str(a.shape()));
  std::vector<bool> used(r, false);
  for (std::size_t ax : axes) {
    if (ax >= r || used[ax]) throw DimensionError("permute: invalid axis permutation");
    used[ax] = true;
  }
  Shape shape(r);
  for (std::size_t i = 0; i < r; ++i) shape[i] = a.shape()[axes[i]];
  // Source stride for each output axis.
  std::vector<std::size_t> in_stride(r);
  {
    std::vector<std::size_t> st(r, 1);
    for (std::size_t i = r; i-- > 1;) st[i - 1] = st[i] * a.shape()[i];
    for (std::size_t i = 0; i < r; ++i) in_stride[i] = st[axes[i]];
  }
  const std::size_t n = a.numel();
  std::vector<std::size_t> src(n);
  {
    std::vector<std::size_t> counter(r, 0);
    std::size_t s = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
      src[flat] = s;
      for (std::size_t d = r; d-- > 0;) {
        ++counter[d];
        s += in_stride[d];
        if (counter[d] < shape[d]) break;
        s -= in_stride[d] * counter[d];
        counter[d] = 0;
      }
    }
  }
  Output out = make_output(shape, a.dtype(), "permute", {&a});
  dispatch(a.dtype(), [&]<typename T>() {
    const auto& va = vals<T>(a);
    auto& vo = out.node->values<T>();
    for (std::size_t i = 0; i < n; ++i) vo[i] = va[src[i]];
    if (!out.track) return;
    out.node->backward = [src = std::move(src)](Node& self) {
      auto& g = self.grads<T>();
      auto& gi = self.inputs[0]->grads<T>();
      for (std::size_t i = 0; i < g.size(); ++i) gi[src[i]] += g[i];
    };
  });
  return out.tensor();
}

Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1) {
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  if (axis0 >= axes.size() || axis1 >= axes.size()) {
    throw DimensionError("transpose: axes out of range for " + shape_str(a.shape()));
  }
  std::swap(axes[axis0], axes[axis1]);
  return permute(a, axes);
}

Tensor expand(const Tensor& a, const Shape& shape) {
  check_defined(a, "expand");
  if (broadcast_shape(a.shape(), shape, "expand") != shape) {
    throw DimensionError("expand: cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<std::size_t> idx = broadcast_index(a.shape(), shape);
  Output out = make_output(shape, a.dtype(), "expand", {&a});
  dispatch(a.dtype(), [&]<typename T>() {
    const auto& va = vals<T>(a);
    auto& vo = out.node->values<T>();
    for (std::size_t i = 0; i < vo.size(); ++i) vo[i] = va[idx[i]];
    if (!out.track) return;
    out.node->backward = [idx = std::move(idx)](Node& self) {
      auto& g = self.grads<T>();
      auto& gi = self.inputs[0]->grads<T>();
      for (std::size_t i = 0; i < g.size(); ++i) gi[idx[i]] += g[i];
    };
  });
  return out.tensor();
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Tensor& first = parts.front();
  check_defined(first, "concat");
  Shape shape = first.shape();
  if (axis >= shape.size()) throw DimensionError("concat: axis out of range for " + shape_str(shape));
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    check_defined(p, "concat");
    check_same_dtype(first, p, "concat");
    bool ok = p.rank() == shape.size();
    for (std::size_t i = 0; ok && i < shape.size(); ++i) {
      if (i != axis && p.shape()[i] != shape[i]) ok = false;
    }
    if (!ok) {
      throw DimensionError("concat: " + shape_str(p.shape()) + " incompatible with " + shape_str(shape) +
                           " along axis " + std::to_string(axis));
    }
    total += p.shape()[axis];
  }
  shape[axis] = total;
  const AxisSplit s = split_axis(shape, axis, "concat");

  auto out_node = Tensor::zeros(shape, first.dtype()).node();
  out_node->op = "concat";
  bool track = false;
  if (grad_enabled()) {
    for (const Tensor& p : parts) track = track || p.requires_grad();
  }
  std::vector<std::size_t> lengths;
  for (const Tensor& p : parts) lengths.push_back(p.shape()[axis]);
  if (track) {
    out_node->requires_grad = true;
    for (const Tensor& p : parts) out_node->inputs.push_back(p.node());
  }
  dispatch(first.dtype(), [&]<typename T>() {
    auto& vo = out_node->values<T>();
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const auto& vp = vals<T>(parts[pi]);
      const std::size_t chunk = lengths[pi] * s.inner;
      for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(vp.data() + o * chunk, chunk, vo.data() + o * s.length * s.inner + offset * s.inner);
      }
      offset += lengths[pi];
    }
    if (!track) return;
    out_node->backward = [s, lengths](Node& self) {
      auto& g = self.grads<T>();
      std::size_t offset = 0;
      for (std::size_t pi = 0; pi < lengths.size(); ++pi) {
        auto& in = self.inputs[pi];
        const std::size_t chunk = lengths[pi] * s.inner;
        if (in->requires_grad) {
          auto& gi = in->grads<T>();
          for (std::size_t o = 0; o < s.outer; ++o) {
            const T* src = g.data() + o * s.length * s.inner + offset * s.inner;
            T* dst = gi.data() + o * chunk;
            for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
          }
        }
        offset += lengths[pi];
      }
    };
  });
  return Tensor(out_node);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  check_defined(a, "slice");
  const AxisSplit s = split_axis(a.shape(), axis, "slice");
  if (begin >= end || end > s.length) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis " +
                         std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  Shape shape = a.shape();
  shape[axis] = end - begin;
  Output out = make_output(shape, a.dtype(), "slice", {&a});
  const std::size_t chunk = (end - begin) * s.inner;
  dispatch(a.dtype(), [&]<typename T>() {
    const auto& va = vals<T>(a);
    auto& vo = out.node->values<T>();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(va.data() + o * s.length * s.inner + begin * s.inner, chunk, vo.data() + o * chunk);
    }
    if (!out.track) return;
    out.node->backward = [s, begin, chunk](Node& self) {
      auto& g = self.grads<T>();
      auto& gi = self.inputs[0]->grads<T>();
      for (std::size_t o = 0; o < s.outer; ++o) {
        T* dst = gi.data() + o * s.length * s.inner + begin * s.inner;
        const T* src = g.data() + o * chunk;
        for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
      }
    };
  });
  return out.tensor();
}

Tensor sum(const Tensor& a) {
  check_defined(a, "sum");
  Output out = make_output({}, a.dtype(), "sum", {&a});
  dispatch(a.dtype(), [&]<typename T>() {
    double acc = 0.0;
    for (T v : vals<T>(a)) acc += v;
    out.node->values<T>()[0] = static_cast<T>(acc);
    if (!out.track) return;
    out.node->backward = [](Node& self) {
      const T g = self.grads<T>()[0];
      for (T& gi : self.inputs[0]->grads<T>()) gi += g;
    };
  });
  return out.tensor();
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
  check_defined(a, "sum");
  const AxisSplit s = split_axis(a.shape(), axis, "sum");
  Shape shape = a.shape();
  if (keepdim) {
    shape[axis] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  Output out = make_output(shape, a.dtype(), "sum_axis", {&a});
  dispatch(a.dtype(), [&]<typename T>() {
    const auto& va = vals<T>(a);
    auto& vo = out.node->values<T>();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        T acc = 0;
        for (std::size_t l = 0; l < s.length; ++l) acc += va[(o * s.length + l) * s.inner + i];
        vo[o * s.inner + i] = acc;
      }
    }
    if (!out.track) return;
    out.node->backward = [s](Node& self) {
      auto& g = self.grads<T>();
      auto& gi = self.inputs[0]->grads<T>();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t l = 0; l < s.length; ++l) {
          for (std::size_t i = 0; i < s.inner; ++i) gi[(o * s.length + l) * s.inner + i] += g[o * s.inner + i];
        }
      }
    };
  });
  return out.tensor();
}

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim) {
  const double n = static_cast<double>(split_axis(a.shape(), axis, "mean").length);
  return scale(sum(a, axis, keepdim), 1.0 / n);
}

namespace {

Tensor softmax_impl(const Tensor& a, std::size_t axis, bool log_space) {
  const char* name = log_space ? "log_softmax" : "softmax";
  check_defined(a, name);
  const AxisSplit s = split_axis(a.shape(), axis, name);
  Output out = make_output(a.shape(), a.dtype(), name, {&a});
  dispatch(a.dtype(), [&]<typename T>() {
    const auto& va = vals<T>(a);
    auto& vo = out.node->values<T>();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.length * s.inner + i;
        T mx = va[base];
        for (std::size_t l = 1; l < s.length; ++l) mx = std::max(mx, va[base + l * s.inner]);
        T z = 0;
        for (std::size_t l = 0; l < s.length; ++l) z += std::exp(va[base + l * s.inner] - mx);
        const T log_z = std::log(z);
        for (std::size_t l = 0; l < s.length; ++l) {
          const std::size_t p = base + l * s.inner;
          vo[p] = log_space ? va[p] - mx - log_z : std::exp(va[p] - mx) / z;
        }
      }
    }
    if (!out.track) return;
    out.node->backward = [s, log_space](Node& self) {
      auto& g = self.grads<T>();
      auto& gi = self.inputs[0]->grads<T>();
      const auto& y = self.values<T>();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.length * s.inner + i;
          T acc = 0;
          for (std::size_t l = 0; l < s.length; ++l) {
            const std::size_t p = base + l * s.inner;
            acc += log_space ? g[p] : g[p] * y[p];
          }
          for (std::size_t l = 0; l < s.length; ++l) {
            const std::size_t p = base + l * s.inner;
            gi[p] += log_space ? g[p] - std::exp(y[p]) * acc : y[p] * (g[p] - acc);
          }
        }
      }
    };
  });
  return out.tensor();
}

}  // namespace

Tensor softmax(const Tensor& a, std::size_t axis) { return softmax_impl(a, axis, false); }
Tensor log_softmax(const Tensor& a, std::size_t axis) { return softmax_impl(a, axis, true); }

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  check_defined(x, "conv2d");
  check_defined(weight, "conv2d");
  check_same_dtype(x, weight, "conv2d");
  if (x.rank() != 3 || weight.rank() != 4) {
    throw DimensionError("conv2d: expected x[c,h,w] and w[o,c,k,k], got " + shape_str(x.shape()) + " and " +
                         shape_str(weight.shape()));
  }
  const std::size_t c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t c_out = weight.dim(0), k = weight.dim(2);
  if (weight.dim(3) != k) throw ConfigError("conv2d: non-square kernel " + shape_str(weight.shape()));
  valid_kernel(k);
  if (weight.dim(1) != c_in) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " has " + std::to_string(c_in) +
                         " channels but weight " + shape_str(weight.shape()) + " expects " +
                         std::to_string(weight.dim(1)));
  }
  if (bias.defined()) {
    check_same_dtype(x, bias, "conv2d");
    if (bias.shape() != Shape{c_out}) {
      throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(c_out) +
                           " output channels");
    }
  }
  const std::size_t pad = (k - 1) / 2;
  const std::size_t hw = h * w;
  const std::size_t rows = c_in * k * k;
  Output out = make_output({c_out, h, w}, x.dtype(), "conv2d", {&x, &weight, bias.defined() ? &bias : nullptr});

  dispatch(x.dtype(), [&]<typename T>() {
    const auto& vx = vals<T>(x);
    // im2col: cols[(c*k + ky)*k + kx, y*w + x]
    std::vector<T> cols;
    const T* col_ptr = vx.data();
    if (k > 1) {
      cols.assign(rows * hw, T(0));
      for (std::size_t c = 0; c < c_in; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            T* dst = cols.data() + ((c * k + ky) * k + kx) * hw;
            for (std::size_t yy = 0; yy < h; ++yy) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(yy + ky) - static_cast<std::ptrdiff_t>(pad);
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t xx = 0; xx < w; ++xx) {
                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - static_cast<std::ptrdiff_t>(pad);
                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
                dst[yy * w + xx] = vx[(c * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
              }
            }
          }
        }
      }
      col_ptr = cols.data();
    }
    ConstMatRef<T> W(vals<T>(weight).data(), c_out, rows);
    ConstMatRef<T> X(col_ptr, rows, hw);
    auto& vo = out.node->values<T>();
    MatRef<T> Y(vo.data(), c_out, hw);
    Y.noalias() = W * X;
    if (bias.defined()) {
      const auto& vb = vals<T>(bias);
      for (std::size_t o = 0; o < c_out; ++o) {
        for (std::size_t p = 0; p < hw; ++p) vo[o * hw + p] += vb[o];
      }
    }
    if (!out.track) return;
    out.node->backward = [=, cols = std::move(cols), has_bias = bias.defined()](Node& self) {
      const auto& g = self.grads<T>();
      ConstMatRef<T> G(g.data(), c_out, hw);
      auto& nx = self.inputs[0];
      auto& nw = self.inputs[1];
      const T* colp = k > 1 ? cols.data() : nx->values<T>().data();
      if (nw->requires_grad) {
        MatRef<T> GW(nw->grads<T>().data(), c_out, rows);
        GW.noalias() += G * ConstMatRef<T>(colp, rows, hw).transpose();
      }
      if (has_bias && self.inputs[2]->requires_grad) {
        auto& gb = self.inputs[2]->grads<T>();
        for (std::size_t o = 0; o < c_out; ++o) {
          T acc = 0;
          for (std::size_t p = 0; p < hw; ++p) acc += g[o * hw + p];
          gb[o] += acc;
        }
      }
      if (nx->requires_grad) {
        ConstMatRef<T> Wm(nw->values<T>().data(), c_out, rows);
        auto& gx = nx->grads<T>();
        if (k == 1) {
          MatRef<T> GX(gx.data(), rows, hw);
          GX.noalias() += Wm.transpose() * G;
          return;
        }
        std::vector<T> gcols(rows * hw);
        MatRef<T> GC(gcols.data(), rows, hw);
        GC.noalias() = Wm.transpose() * G;
        for (std::size_t c = 0; c < c_in; ++c) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const T* src = gcols.data() + ((c * k + ky) * k + kx) * hw;
              for (std::size_t yy = 0; yy < h; ++yy) {
                const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(yy + ky) - static_cast<std::ptrdiff_t>(pad);
                if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t xx = 0; xx < w; ++xx) {
                  const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - static_cast<std::ptrdiff_t>(pad);
                  if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
                  gx[(c * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] += src[yy * w + xx];
                }
              }
            }
          }
        }
      }
    };
  });
  return out.tensor();
}

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta, double eps) {
  check_defined(x, "group_norm");
  check_defined(gamma, "group_norm");
  check_defined(beta, "group_norm");
  check_same_dtype(x, gamma, "group_norm");
  check_same_dtype(x, beta, "group_norm");
  if (x.rank() != 3) throw DimensionError("group_norm: expected x[B,C,S], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), channels = x.dim(1), spatial = x.dim(2);
  if (groups == 0 || channels % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels}) {
    throw DimensionError("group_norm: affine parameters must have shape (" + std::to_string(channels) + ")");
  }
  const std::size_t per_group = channels / groups * spatial;
  Output out = make_output(x.shape(), x.dtype(), "group_norm", {&x, &gamma, &beta});
  dispatch(x.dtype(), [&]<typename T>() {
    const auto& vx = vals<T>(x);
    const auto& vg = vals<T>(gamma);
    const auto& vb = vals<T>(beta);
    auto& vo = out.node->values<T>();
    std::vector<T> xhat(vx.size());
    std::vector<T> inv_std(batch * groups);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t gi = 0; gi < groups; ++gi) {
        const std::size_t base = (b * channels + gi * (channels / groups)) * spatial;
        double mu = 0.0;
        for (std::size_t j = 0; j < per_group; ++j) mu += vx[base + j];
        mu /= static_cast<double>(per_group);
        double var = 0.0;
        for (std::size_t j = 0; j < per_group; ++j) {
          const double d = vx[base + j] - mu;
          var += d * d;
        }
        var /= static_cast<double>(per_group);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[b * groups + gi] = static_cast<T>(is);
        for (std::size_t j = 0; j < per_group; ++j) {
          const std::size_t p = base + j;
          xhat[p] = static_cast<T>((vx[p] - mu) * is);
          const std::size_t c = (p / spatial) % channels;
          vo[p] = xhat[p] * vg[c] + vb[c];
        }
      }
    }
    if (!out.track) return;
    out.node->backward = [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
      const auto& g = self.grads<T>();
      auto& nx = self.inputs[0];
      auto& ng = self.inputs[1];
      auto& nb = self.inputs[2];
      const auto& gam = ng->values<T>();
      if (ng->requires_grad || nb->requires_grad) {
        for (std::size_t p = 0; p < g.size(); ++p) {
          const std::size_t c = (p / spatial) % channels;
          if (ng->requires_grad) ng->grads<T>()[c] += g[p] * xhat[p];
          if (nb->requires_grad) nb->grads<T>()[c] += g[p];
        }
      }
      if (!nx->requires_grad) return;
      auto& gx = nx->grads<T>();
      const double n = static_cast<double>(per_group);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t gi = 0; gi < groups; ++gi) {
          const std::size_t base = (b * channels + gi * (channels / groups)) * spatial;
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t j = 0; j < per_group; ++j) {
            const std::size_t p = base + j;
            const double d = static_cast<double>(g[p]) * gam[(p / spatial) % channels];
            sum_d += d;
            sum_dx += d * xhat[p];
          }
          const double is = inv_std[b * groups + gi];
          for (std::size_t j = 0; j < per_group; ++j) {
            const std::size_t p = base + j;
            const double d = static_cast<double>(g[p]) * gam[(p / spatial) % channels];
            gx[p] += static_cast<T>(is / n * (n * d - sum_d - xhat[p] * sum_dx));
          }
        }
      }
    };
  });
  return out.tensor();
}

namespace {

/// Source sample positions for one axis under align_corners=false.
struct Taps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

Taps resize_taps(std::size_t in, std::size_t out) {
  Taps t;
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    std::size_t lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    t.lo.push_back(lo);
    t.hi.push_back(hi);
    t.frac.push_back(src - static_cast<double>(lo));
  }
  return t;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  check_defined(x, "bilinear_resize");
  if (x.rank() != 3) throw DimensionError("bilinear_resize: expected x[c,h,w], got " + shape_str(x.shape()));
  if (out_h == 0 || out_w == 0 || x.dim(1) == 0 || x.dim(2) == 0) {
    throw DimensionError("bilinear_resize: zero extent in " + shape_str(x.shape()) + " -> (" + std::to_string(out_h) +
                         "," + std::to_string(out_w) + ")");
  }
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Taps ty = resize_taps(h, out_h);
  const Taps tx = resize_taps(w, out_w);
  Output out = make_output({c, out_h, out_w}, x.dtype(), "bilinear_resize", {&x});
  dispatch(x.dtype(), [&]<typename T>() {
    const auto& vx = vals<T>(x);
    auto& vo = out.node->values<T>();
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = vx.data() + ch * h * w;
      for (std::size_t i = 0; i < out_h; ++i) {
        const T fy = static_cast<T>(ty.frac[i]);
        const T* r0 = src + ty.lo[i] * w;
        const T* r1 = src + ty.hi[i] * w;
        for (std::size_t j = 0; j < out_w; ++j) {
          const T fx = static_cast<T>(tx.frac[j]);
          // Lerp form keeps constant inputs exact.
          const T top = r0[tx.lo[j]] + fx * (r0[tx.hi[j]] - r0[tx.lo[j]]);
          const T bot = r1[tx.lo[j]] + fx * (r1[tx.hi[j]] - r1[tx.lo[j]]);
          vo[(ch * out_h + i) * out_w + j] = top + fy * (bot - top);
        }
      }
    }
    if (!out.track) return;
    out.node->backward = [=](Node& self) {
      const auto& g = self.grads<T>();
      auto& gx = self.inputs[0]->grads<T>();
      for (std::size_t ch = 0; ch < c; ++ch) {
        T* dst = gx.data() + ch * h * w;
        for (std::size_t i = 0; i < out_h; ++i) {
          const T fy = static_cast<T>(ty.frac[i]);
          for (std::size_t j = 0; j < out_w; ++j) {
            const T fx = static_cast<T>(tx.frac[j]);
            const T gv = g[(ch * out_h + i) * out_w + j];
            dst[ty.lo[i] * w + tx.lo[j]] += gv * (1 - fy) * (1 - fx);
            dst[ty.lo[i] * w + tx.hi[j]] += gv * (1 - fy) * fx;
            dst[ty.hi[i] * w + tx.lo[j]] += gv * fy * (1 - fx);
            dst[ty.hi[i] * w + tx.hi[j]] += gv * fy * fx;
          }
        }
      }
    };
  });
  return out.tensor();
}

Tensor window_avg_pool(const Tensor& x, std::size_t fh, std::size_t fw) {
  check_defined(x, "window_avg_pool");
  if (x.rank() != 4) throw DimensionError("window_avg_pool: expected x[B,h,w,C], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (fh == 0 || fw == 0 || h % fh != 0 || w % fw != 0) {
    throw ConfigError("window_avg_pool: grid " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by window " + std::to_string(fh) + "x" + std::to_string(fw));
  }
  const std::size_t oh = h / fh, ow = w / fw;
  Output out = make_output({b, oh, ow, c}, x.dtype(), "window_avg_pool", {&x});
  dispatch(x.dtype(), [&]<typename T>() {
    const auto& vx = vals<T>(x);
    auto& vo = out.node->values<T>();
    const T count = static_cast<T>(fh * fw);
    for (std::size_t bi = 0; bi < b; ++bi) {
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          T* dst = vo.data() + ((bi * oh + i) * ow + j) * c;
          for (std::size_t ch = 0; ch < c; ++ch) {
            T acc = 0;
            for (std::size_t dy = 0; dy < fh; ++dy) {
              for (std::size_t dx = 0; dx < fw; ++dx) {
                acc += vx[((bi * h + i * fh + dy) * w + j * fw + dx) * c + ch];
              }
            }
            dst[ch] = acc / count;
          }
        }
      }
    }
    if (!out.track) return;
    out.node->backward = [=](Node& self) {
      const auto& g = self.grads<T>();
      auto& gx = self.inputs[0]->grads<T>();
      for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t i = 0; i < oh; ++i) {
          for (std::size_t j = 0; j < ow; ++j) {
            const T* src = g.data() + ((bi * oh + i) * ow + j) * c;
            for (std::size_t dy = 0; dy < fh; ++dy) {
              for (std::size_t dx = 0; dx < fw; ++dx) {
                T* dst = gx.data() + ((bi * h + i * fh + dy) * w + j * fw + dx) * c;
                for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch] / count;
              }
            }
          }
        }
      }
    };
  });
  return out.tensor();
}

}  // namespace corenet::ops
