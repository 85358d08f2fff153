#include "corenet/layers.h"

#include <cmath>

namespace corenet::nn {

Linear::Linear(ParameterSet& params, const std::string& prefix, std::size_t in, std::size_t out, bool with_bias,
               Rng& rng, double init_std) {
  weight = params.add(prefix + ".weight", {in, out}, Init::trunc_normal(init_std), rng);
  if (with_bias) bias = params.add(prefix + ".bias", {out}, Init::zeros(), rng);
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = ops::matmul(x, weight);
  return bias.defined() ? ops::add(y, bias) : y;
}

Conv2d::Conv2d(ParameterSet& params, const std::string& prefix, std::size_t in, std::size_t out, std::size_t kernel,
               bool with_bias, Rng& rng, double init_std) {
  weight = params.add(prefix + ".weight", {out, in, kernel, kernel}, Init::trunc_normal(init_std), rng);
  if (with_bias) bias = params.add(prefix + ".bias", {out}, Init::zeros(), rng);
}

TokenGroupNorm::TokenGroupNorm(ParameterSet& params, const std::string& prefix, std::size_t channels,
                               std::size_t num_groups, Rng& rng)
    : groups(num_groups) {
  if (num_groups == 0 || channels % num_groups != 0) {
    throw ConfigError(prefix + ": " + std::to_string(channels) + " channels not divisible into " +
                      std::to_string(num_groups) + " groups");
  }
  gamma = params.add(prefix + ".gamma", {channels}, Init::constant(1.0), rng);
  beta = params.add(prefix + ".beta", {channels}, Init::zeros(), rng);
}

Tensor TokenGroupNorm::operator()(const Tensor& x) const {
  const Shape shape = x.shape();
  const std::size_t c = shape.back();
  const std::size_t rows = x.numel() / c;
  Tensor y = ops::group_norm(ops::reshape(x, {rows, c, 1}), groups, gamma, beta);
  return ops::reshape(y, shape);
}

MultiHeadAttention::MultiHeadAttention(ParameterSet& params, const std::string& prefix, std::size_t model_dim,
                                       std::size_t num_heads, Rng& rng, double init_std)
    : dim(model_dim), heads(num_heads) {
  if (num_heads == 0 || model_dim % num_heads != 0) {
    throw ConfigError(prefix + ": dimension " + std::to_string(model_dim) + " not divisible by " +
                      std::to_string(num_heads) + " heads");
  }
  q_proj = Linear(params, prefix + ".q", dim, dim, true, rng, init_std);
  k_proj = Linear(params, prefix + ".k", dim, dim, false, rng, init_std);
  v_proj = Linear(params, prefix + ".v", dim, dim, true, rng, init_std);
  out_proj = Linear(params, prefix + ".out", dim, dim, true, rng, init_std);
}

Tensor MultiHeadAttention::operator()(const Tensor& queries, const Tensor& keys_values, const Tensor& key_bias,
                                      Tensor* weights_out) const {
  if (queries.rank() != 3 || keys_values.rank() != 3 || queries.dim(2) != dim || keys_values.dim(2) != dim ||
      queries.dim(0) != keys_values.dim(0)) {
    throw DimensionError("attention: expected queries[B,Tq," + std::to_string(dim) + "] and keys[B,T," +
                         std::to_string(dim) + "], got " + shape_str(queries.shape()) + " and " +
                         shape_str(keys_values.shape()));
  }
  const std::size_t b = queries.dim(0), tq = queries.dim(1), t = keys_values.dim(1);
  const std::size_t dh = dim / heads;

  auto split_heads = [&](const Tensor& x, std::size_t len) {
    return ops::permute(ops::reshape(x, {b, len, heads, dh}), {0, 2, 1, 3});  // [B,H,len,dh]
  };
  const Tensor q = split_heads(q_proj(queries), tq);
  const Tensor k_in = key_bias.defined() ? ops::add(keys_values, key_bias) : keys_values;
  const Tensor k = ops::permute(ops::reshape(k_proj(k_in), {b, t, heads, dh}), {0, 2, 3, 1});  // [B,H,dh,T]
  const Tensor v = split_heads(v_proj(keys_values), t);

  const Tensor scores = ops::scale(ops::matmul(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
  const Tensor weights = ops::softmax(scores, 3);
  if (weights_out) *weights_out = weights;
  const Tensor mixed = ops::matmul(weights, v);  // [B,H,Tq,dh]
  const Tensor merged = ops::reshape(ops::permute(mixed, {0, 2, 1, 3}), {b, tq, dim});
  return out_proj(merged);
}

Mlp::Mlp(ParameterSet& params, const std::string& prefix, std::size_t dim, std::size_t hidden, Rng& rng,
         double init_std)
    : fc1(params, prefix + ".fc1", dim, hidden, true, rng, init_std),
      fc2(params, prefix + ".fc2", hidden, dim, true, rng, init_std) {}

}  // namespace corenet::nn
