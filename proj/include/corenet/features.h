#pragma once

#include <cstdint>
#include <string>

#include "corenet/grid.h"
#include "corenet/tensor.h"
#include "corenet/tensor_pack.h"

namespace corenet {

/// Frozen-backbone output for one image: per-layer, per-head patch tokens and
/// class tokens.
struct FeatureStack {
  Tensor patch_tokens;  // [K, M, d, h, w]
  Tensor class_tokens;  // [K, M, d]
  std::string image_id;

  std::size_t layers() const { return patch_tokens.dim(0); }
  std::size_t heads() const { return patch_tokens.dim(1); }
  std::size_t head_dim() const { return patch_tokens.dim(2); }
  std::size_t grid_h() const { return patch_tokens.dim(3); }
  std::size_t grid_w() const { return patch_tokens.dim(4); }
  std::size_t tokens() const { return grid_h() * grid_w(); }

  /// Checks shapes, positivity of every extent and finiteness.
  void validate() const;
  FeatureStack to(DType dtype) const;
};

/// Reads `patch_tokens` and `class_tokens` entries from a pack.
FeatureStack load_feature_stack(const TensorPack& pack, const std::string& image_id);
void save_feature_stack(const std::filesystem::path& dir, const FeatureStack& stack);

struct BackboneConfig {
  std::size_t layers = 3;    // K
  std::size_t heads = 2;     // M
  std::size_t head_dim = 8;  // d
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
};

/// Deterministic stand-in for a frozen self-supervised ViT. Each patch is
/// summarized by local statistics (mean color, saturation, gradient energy,
/// position encoding); per layer and head the summary goes through a fixed
/// random projection and tanh, plus a saliency component along a seeded
/// per-head direction. The class token is the mean patch token plus an offset
/// along that direction. Patch tokens depend only on their own patch.
///
/// image: [3, H, W] with values in [0, 1]; H and W must be multiples of the
/// token grid.
FeatureStack synthetic_backbone(const Tensor& image, std::uint64_t seed, const BackboneConfig& cfg,
                                const std::string& image_id = "");

/// Coarse class-attention map with values in [0, 1].
struct AttentionMap {
  enum class Source { clip_export, synthetic };
  Grid2D values;
  Source source = Source::synthetic;
};

/// Blurred, noise-perturbed version of a binary hint, renormalized by its
/// maximum into [0, 1]. Blur uses a tent kernel of the given radius. An empty
/// hint (or one whose perturbed maximum is not positive) yields a uniform 0.5
/// map.
AttentionMap synthetic_clip_attention(const MaskGrid& hint, std::size_t blur_radius, double noise_level,
                                      std::uint64_t seed);

/// Reads a [h, w] (or [1, h, w]) attention tensor, clamping into [0, 1].
AttentionMap attention_from_tensor(const Tensor& t, AttentionMap::Source source);

}  // namespace corenet
