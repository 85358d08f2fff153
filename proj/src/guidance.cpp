#include "corenet/guidance.h"

namespace corenet::guidance {

ClassGuidance::ClassGuidance(ParameterSet& params, const std::string& prefix, std::size_t channels, Rng& rng,
                             double init_std)
    : conv3(params, prefix + ".conv3", channels, channels, 3, true, rng, init_std),
      conv1(params, prefix + ".conv1", channels, 1, 1, true, rng, init_std) {}

Tensor ClassGuidance::refine(const Tensor& c_fusion, const AttentionMap& attention) const {
  if (c_fusion.rank() != 3) throw DimensionError("class guidance expects [C, h, w], got " + shape_str(c_fusion.shape()));
  const std::size_t h = c_fusion.dim(1), w = c_fusion.dim(2);
  const Tensor a_c = resize_bilinear(attention.values, h, w).to_tensor(c_fusion.dtype());
  const Tensor gated = ops::mul(c_fusion, a_c);
  return ops::reshape(ops::sigmoid(conv1(conv3(gated))), {h, w});
}

Tensor apply_guidance(const Tensor& c_fusion, const Tensor& refined) {
  if (c_fusion.rank() != 3 || refined.rank() != 2 || refined.dim(0) != c_fusion.dim(1) ||
      refined.dim(1) != c_fusion.dim(2)) {
    throw DimensionError("apply_guidance: correlation " + shape_str(c_fusion.shape()) + " vs attention " +
                         shape_str(refined.shape()));
  }
  const Tensor a = ops::reshape(refined, {1, refined.dim(0), refined.dim(1)});
  return ops::add(ops::mul(c_fusion, a), c_fusion);
}

EmbeddingProjection::EmbeddingProjection(ParameterSet& params, const std::string& prefix, std::size_t in_channels,
                                         std::size_t out_channels, Rng& rng, double init_std)
    : proj(params, prefix + ".proj", in_channels, out_channels, 1, false, rng, init_std) {}

Tensor EmbeddingProjection::operator()(const FeatureStack& stack) const {
  stack.validate();
  const std::size_t k = stack.layers(), md = stack.heads() * stack.head_dim();
  if (md != proj.weight.dim(1)) {
    throw DimensionError("embedding projection expects " + std::to_string(proj.weight.dim(1)) +
                         " concatenated head channels, got " + std::to_string(md));
  }
  const Tensor tokens = stack.patch_tokens.detach().to(proj.weight.dtype());
  const Tensor summed = ops::sum(ops::reshape(tokens, {k, md, stack.grid_h(), stack.grid_w()}), 0);
  return proj(summed);
}

QueryPrediction prediction_from_logits(const Tensor& logits) {
  if (logits.rank() != 3 || logits.dim(0) != 2) {
    throw DimensionError("prediction expects logits [2, H, W], got " + shape_str(logits.shape()));
  }
  QueryPrediction p;
  p.logits = logits;
  p.prob_fg = ops::reshape(ops::slice(ops::softmax(logits, 0), 0, 1, 2), {logits.dim(1), logits.dim(2)});
  p.binary = MaskGrid(logits.dim(1), logits.dim(2));
  const std::vector<double> prob = p.prob_fg.to_vector();
  for (std::size_t i = 0; i < prob.size(); ++i) p.binary.values[i] = prob[i] > 0.5 ? 1.0 : 0.0;
  return p;
}

Decoder::Decoder(ParameterSet& params, const std::string& prefix, const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  const std::size_t d = cfg.width();
  const std::size_t hidden = cfg.mlp_hidden ? cfg.mlp_hidden : d;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = prefix + ".layer" + std::to_string(l);
    Layer layer;
    layer.attention = nn::MultiHeadAttention(params, p + ".attn", d, cfg.heads, rng, cfg.init_std);
    layer.norm1 = nn::TokenGroupNorm(params, p + ".norm1", d, cfg.norm_groups, rng);
    layer.mlp = nn::Mlp(params, p + ".mlp", d, hidden, rng, cfg.init_std);
    layer.norm2 = nn::TokenGroupNorm(params, p + ".norm2", d, cfg.norm_groups, rng);
    layers.push_back(std::move(layer));
  }
  if (cfg.positional_encoding) {
    positional = params.add(prefix + ".positional", {cfg.grid_h * cfg.grid_w, d}, Init::trunc_normal(cfg.init_std),
                            rng);
  }
  head = nn::Linear(params, prefix + ".head", d, 2, true, rng, cfg.init_std);
}

Tensor Decoder::tokens(const Tensor& guided, const Tensor& support_embed, const Tensor& query_embed) const {
  if (guided.rank() != 3 || query_embed.rank() != 3 || support_embed.rank() != 3) {
    throw DimensionError("decoder inputs must be [C, h, w] maps");
  }
  const std::size_t h = guided.dim(1), w = guided.dim(2);
  if (query_embed.dim(1) != h || query_embed.dim(2) != w) {
    throw DimensionError("decoder: query embedding grid " + shape_str(query_embed.shape()) +
                         " differs from correlation grid " + shape_str(guided.shape()));
  }
  const Tensor fs = (support_embed.dim(1) != h || support_embed.dim(2) != w)
                        ? ops::bilinear_resize(support_embed, h, w)
                        : support_embed;
  const std::size_t d = guided.dim(0) + fs.dim(0) + query_embed.dim(0);
  if (d != cfg_.width() || guided.dim(0) != cfg_.correlation_channels) {
    throw DimensionError("decoder: channel accounting " + std::to_string(guided.dim(0)) + "+" +
                         std::to_string(fs.dim(0)) + "+" + std::to_string(query_embed.dim(0)) + " != " +
                         std::to_string(cfg_.width()));
  }
  const std::vector<Tensor> parts{guided, fs, query_embed};
  return ops::transpose(ops::reshape(ops::concat(parts, 0), {d, h * w}), 0, 1);
}

Tensor Decoder::token_logits(const Tensor& tokens) const {
  if (tokens.rank() != 2 || tokens.dim(1) != cfg_.width()) {
    throw DimensionError("decoder tokens must be [P, " + std::to_string(cfg_.width()) + "], got " +
                         shape_str(tokens.shape()));
  }
  const std::size_t p = tokens.dim(0);
  Tensor x = tokens;
  if (positional.defined()) {
    if (positional.dim(0) != p) {
      throw DimensionError("decoder positional encodings cover " + std::to_string(positional.dim(0)) +
                           " tokens, got " + std::to_string(p));
    }
    x = ops::add(x, positional);
  }
  x = ops::reshape(x, {1, p, cfg_.width()});
  for (const Layer& layer : layers) {
    const Tensor h = layer.norm1(ops::add(layer.attention(x, x), x));
    x = layer.norm2(ops::add(layer.mlp(h), h));
  }
  return head(ops::reshape(x, {p, cfg_.width()}));
}

QueryPrediction Decoder::operator()(const Tensor& guided, const Tensor& support_embed, const Tensor& query_embed,
                                    std::size_t height, std::size_t width) const {
  const std::size_t h = guided.dim(1), w = guided.dim(2);
  const Tensor logits_tokens = token_logits(tokens(guided, support_embed, query_embed));  // [P, 2]
  const Tensor grid = ops::reshape(ops::transpose(logits_tokens, 0, 1), {2, h, w});
  return prediction_from_logits(ops::bilinear_resize(grid, height, width));
}

}  // namespace corenet::guidance
