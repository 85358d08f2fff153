#pragma once

#include <string>

#include "corenet/features.h"
#include "corenet/grid.h"
#include "corenet/layers.h"

/// Class guidance (attention refinement and correlation filtering) and
/// embedding guidance (appearance embeddings and the mask decoder).
namespace corenet::guidance {

/// A_r = sigmoid(conv1x1(conv3x3(C_fusion * A_c))), A_c resized to the grid.
class ClassGuidance {
 public:
  ClassGuidance() = default;
  ClassGuidance(ParameterSet& params, const std::string& prefix, std::size_t channels, Rng& rng, double init_std);

  /// c_fusion [C, h, w]; attention at any resolution. Returns A_r as [h, w].
  Tensor refine(const Tensor& c_fusion, const AttentionMap& attention) const;

  nn::Conv2d conv3;  // C -> C, 3x3
  nn::Conv2d conv1;  // C -> 1, 1x1
};

/// C~ = C_fusion * A_r + C_fusion, with A_r [h, w] broadcast over channels.
Tensor apply_guidance(const Tensor& c_fusion, const Tensor& refined);

/// F = conv1x1(sum_k f^k), with heads concatenated into channels per layer.
class EmbeddingProjection {
 public:
  EmbeddingProjection() = default;
  EmbeddingProjection(ParameterSet& params, const std::string& prefix, std::size_t in_channels,
                      std::size_t out_channels, Rng& rng, double init_std);

  /// Returns [out, h, w] in the parameter dtype.
  Tensor operator()(const FeatureStack& stack) const;

  nn::Conv2d proj;  // bias-free
};

struct DecoderConfig {
  std::size_t correlation_channels = 64;
  std::size_t embed_channels = 64;
  std::size_t heads = 4;
  std::size_t norm_groups = 4;
  std::size_t layers = 2;
  std::size_t mlp_hidden = 0;  // 0: same as the token width
  std::size_t grid_h = 8, grid_w = 8;
  bool positional_encoding = true;
  double init_std = nn::kInitStd;

  std::size_t width() const { return correlation_channels + 2 * embed_channels; }
};

struct QueryPrediction {
  Tensor logits;   // [2, H, W]
  Tensor prob_fg;  // [H, W]
  MaskGrid binary;
};

/// Softmax over the two logit channels, foreground probability and its
/// strict 0.5 threshold.
QueryPrediction prediction_from_logits(const Tensor& logits);

/// Token transformer over Cat(C~, F_s, F_q) followed by a two-way linear
/// head and bilinear upsampling.
class Decoder {
 public:
  Decoder() = default;
  Decoder(ParameterSet& params, const std::string& prefix, const DecoderConfig& cfg, Rng& rng);

  /// Token sequence [P, D] in row-major grid order.
  Tensor tokens(const Tensor& guided, const Tensor& support_embed, const Tensor& query_embed) const;
  /// Per-token logits [P, 2] for a token sequence [P, D]. Positional
  /// encodings are added when enabled.
  Tensor token_logits(const Tensor& tokens) const;
  /// Full prediction at (height, width).
  QueryPrediction operator()(const Tensor& guided, const Tensor& support_embed, const Tensor& query_embed,
                             std::size_t height, std::size_t width) const;

  const DecoderConfig& config() const { return cfg_; }

  struct Layer {
    nn::MultiHeadAttention attention;
    nn::TokenGroupNorm norm1, norm2;
    nn::Mlp mlp;
  };
  std::vector<Layer> layers;
  Tensor positional;  // [P, D] or undefined
  nn::Linear head;    // D -> 2

 private:
  DecoderConfig cfg_;
};

}  // namespace corenet::guidance
