#pragma once

#include <string>
#include <vector>

#include "corenet/ops.h"
#include "corenet/params.h"

/// Small parameterized building blocks shared by the correlation transformer
/// and the decoder. Each layer registers its tensors in a ParameterSet under
/// a name prefix and keeps handles to them.
namespace corenet::nn {

inline constexpr double kInitStd = 0.02;

/// y = x W (+ b) over the last axis of x[..., in].
class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet& params, const std::string& prefix, std::size_t in, std::size_t out, bool bias, Rng& rng,
         double init_std = kInitStd);
  Tensor operator()(const Tensor& x) const;

  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined
};

/// Same-padded 2-D convolution on [c, h, w] maps.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterSet& params, const std::string& prefix, std::size_t in, std::size_t out, std::size_t kernel,
         bool bias, Rng& rng, double init_std = kInitStd);
  Tensor operator()(const Tensor& x) const { return ops::conv2d(x, weight, bias); }

  Tensor weight;  // [out, in, k, k]
  Tensor bias;
};

/// Group normalization applied per token: x[..., C] is viewed as [B, C, 1].
class TokenGroupNorm {
 public:
  TokenGroupNorm() = default;
  TokenGroupNorm(ParameterSet& params, const std::string& prefix, std::size_t channels, std::size_t groups, Rng& rng);
  Tensor operator()(const Tensor& x) const;

  std::size_t groups = 1;
  Tensor gamma, beta;
};

/// Multi-head scaled dot-product attention with separate query and key/value
/// inputs. `key_bias`, when given, is added to the key/value input before the
/// key projection only. Keys carry no projection bias (softmax would cancel it).
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterSet& params, const std::string& prefix, std::size_t dim, std::size_t heads, Rng& rng,
                     double init_std = kInitStd);

  /// queries[B, Tq, C], keys_values[B, T, C], key_bias broadcastable to
  /// [B, T, C]. Returns [B, Tq, C]; if `weights_out` is non-null the
  /// attention weights [B, H, Tq, T] are stored there.
  Tensor operator()(const Tensor& queries, const Tensor& keys_values, const Tensor& key_bias = Tensor(),
                    Tensor* weights_out = nullptr) const;

  std::size_t dim = 0, heads = 1;
  Linear q_proj, k_proj, v_proj, out_proj;
};

/// Two linear maps with a GELU between them.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterSet& params, const std::string& prefix, std::size_t dim, std::size_t hidden, Rng& rng,
      double init_std = kInitStd);
  Tensor operator()(const Tensor& x) const { return fc2(ops::gelu(fc1(x))); }

  Linear fc1, fc2;
};

}  // namespace corenet::nn
