#pragma once

#include <span>
#include <vector>

#include "corenet/tensor.h"

/// Differentiable tensor operations. Every op checks shapes, computes its
/// forward value eagerly and, when grad recording is on and an input requires
/// grad, records a backward closure on the output node.
namespace corenet::ops {

// Elementwise. Binary ops broadcast numpy-style (trailing alignment).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Hadamard product.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& a);

enum class Elementwise { add, hadamard, scale, sigmoid, relu, gelu };
/// Table-driven entry point over the elementwise family. `b` is the second
/// operand for add/hadamard; `factor` is used by scale.
Tensor elementwise(Elementwise op, const Tensor& a, const Tensor* b = nullptr, double factor = 1.0);

/// Batched contraction a[..., m, k] x b[..., k, n] -> [..., m, n]; batch
/// extents broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

// Shape manipulation.
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1);
Tensor expand(const Tensor& a, const Shape& shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);

/// Same-padded convolution of x[c_in,h,w] with w[c_out,c_in,k,k]; `bias`
/// may be undefined. k must be one of {1,3,5,7}.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor());

inline constexpr double kGroupNormEps = 1e-5;

/// Group normalization of x[B, C, S] with per-channel affine gamma/beta[C].
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                  double eps = kGroupNormEps);

/// Bilinear resize of x[c,h,w] to [c,out_h,out_w], align_corners=false.
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

/// Non-overlapping window average of x[B, h, w, C] -> [B, h/fh, w/fw, C].
Tensor window_avg_pool(const Tensor& x, std::size_t fh, std::size_t fw);

}  // namespace corenet::ops
